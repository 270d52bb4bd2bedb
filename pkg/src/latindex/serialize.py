"""Deterministic text serialization shared by the file-facing modules.

Every number leaving the pipeline is written with 17 significant digits so
reruns are byte-identical and values round-trip through float64 exactly.
"""

from __future__ import annotations

import csv
import io
import math
from typing import Iterable, Sequence

from .errors import SchemaError


def fmt17(x: float) -> str:
    """Format a float with 17 significant digits (full float64 precision)."""
    if isinstance(x, bool):
        raise TypeError("fmt17 expects a real number")
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def fmt3(x: float) -> str:
    """3-decimal display format for report tables."""
    return format(float(x), ".3f")


def write_delimited(path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Write a UTF-8 comma-delimited file with a header row and LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))


def read_delimited(path, required: Sequence[str] | None = None) -> tuple[list[str], list[dict[str, str]]]:
    """Read a delimited file into (header, row dicts), checking required columns."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty") from None
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(raw)}"
                )
            rows.append(dict(zip(header, raw)))
    if required is not None:
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing mandatory column(s): {', '.join(missing)}")
    return header, rows


class JsonWriter:
    """Tiny JSON emitter with fmt17 floats and stable key order.

    The stdlib json module formats floats with repr, which is shortest
    round-trip rather than a fixed significant-digit count; this writer
    keeps the 17-digit file contract.
    """

    def __init__(self):
        self._buf = io.StringIO()

    def emit(self, value, indent: int = 0) -> None:
        b = self._buf
        pad = "  " * indent
        if isinstance(value, dict):
            if not value:
                b.write("{}")
                return
            b.write("{\n")
            items = list(value.items())
            for i, (k, v) in enumerate(items):
                b.write(f'{pad}  "{k}": ')
                self.emit(v, indent + 1)
                b.write(",\n" if i < len(items) - 1 else "\n")
            b.write(pad + "}")
        elif isinstance(value, (list, tuple)):
            if not value:
                b.write("[]")
                return
            b.write("[\n")
            for i, v in enumerate(value):
                b.write(pad + "  ")
                self.emit(v, indent + 1)
                b.write(",\n" if i < len(value) - 1 else "\n")
            b.write(pad + "]")
        elif isinstance(value, bool):
            b.write("true" if value else "false")
        elif isinstance(value, (int,)):
            b.write(str(value))
        elif isinstance(value, float):
            b.write(fmt17(value))
        elif isinstance(value, str):
            b.write('"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"')
        elif value is None:
            b.write("null")
        else:
            raise TypeError(f"cannot serialize {type(value)!r}")

    def render(self, value) -> str:
        self.emit(value)
        self._buf.write("\n")
        return self._buf.getvalue()


def to_json_text(value) -> str:
    """Serialize a dict/list tree to deterministic JSON text."""
    return JsonWriter().render(value)
