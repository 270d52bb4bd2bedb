"""Declarative pipeline configuration.

One JSON file drives every stage; every under-specified constant
(quadrature order, tolerances, replicate counts, seeds) is explicit and
printable via the show-config command. Seeds are plain integers - there
are no wall-clock or entropy defaults anywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ValidationError
from .serialize import to_json_text


@dataclass(frozen=True)
class EmSettings:
    max_iter: int = 500
    tol: float = 1e-6
    ridge: float = 1e-4


@dataclass(frozen=True)
class EbpSettings:
    B: int = 500
    seed: int = 20240901
    statistic: str = "median"
    # Off by default: min-max rescaling of the per-domain estimates at
    # report time (an optional reading of the scaling step).
    rescale_estimates: bool = False


@dataclass(frozen=True)
class LqmmSettings:
    taus: tuple[float, ...] = (0.25, 0.5, 0.75)
    bootstrap_B: int = 200
    seed: int = 20240902
    restarts: int = 5


@dataclass(frozen=True)
class Flags:
    reml: bool = False
    weighted_summaries: bool = False
    quantile_base: str = "rates"  # "rates" | "counts" sensitivity switch


@dataclass(frozen=True)
class SimulateSettings:
    seed: int = 20240903
    n_units: int = 1323


@dataclass(frozen=True)
class PipelineConfig:
    survey_path: str = "survey.csv"
    province_path: str = "provinces.csv"
    frame_path: str = "frame.csv"
    output_dir: str = "out"
    quadrature_order: int = 61
    em: EmSettings = field(default_factory=EmSettings)
    ebp: EbpSettings = field(default_factory=EbpSettings)
    lqmm: LqmmSettings = field(default_factory=LqmmSettings)
    flags: Flags = field(default_factory=Flags)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)

    def validate(self) -> "PipelineConfig":
        if not all(0.0 < t < 1.0 for t in self.lqmm.taus):
            raise ValidationError("every tau must lie strictly inside (0, 1)")
        for name, seed in (
            ("ebp.seed", self.ebp.seed),
            ("lqmm.seed", self.lqmm.seed),
            ("simulate.seed", self.simulate.seed),
        ):
            if not isinstance(seed, int):
                raise ValidationError(f"{name} must be an explicit integer")
        if self.flags.quantile_base not in ("rates", "counts"):
            raise ValidationError("flags.quantile_base must be 'rates' or 'counts'")
        if self.ebp.statistic not in ("median", "mean") and not (
            isinstance(self.ebp.statistic, float) and 0 < self.ebp.statistic < 1
        ):
            raise ValidationError("ebp.statistic must be 'median', 'mean' or a quantile level")
        if self.quadrature_order < 1 or self.quadrature_order > 200:
            raise ValidationError("quadrature_order must be in [1, 200]")
        return self

    def to_json(self) -> str:
        doc = asdict(self)
        doc["lqmm"]["taus"] = list(self.lqmm.taus)
        return to_json_text(doc)


def _merge(section_cls, doc: dict, defaults):
    unknown = set(doc) - {f for f in defaults.__dataclass_fields__}
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return replace(defaults, **doc)


def load_config(path: str | None) -> PipelineConfig:
    """Read the config file on top of the documented defaults."""
    cfg = PipelineConfig()
    if path is None:
        return cfg.validate()
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")

    sections = {
        "em": EmSettings,
        "ebp": EbpSettings,
        "lqmm": LqmmSettings,
        "flags": Flags,
        "simulate": SimulateSettings,
    }
    updates = {}
    for key, value in doc.items():
        if key in sections:
            if not isinstance(value, dict):
                raise ValidationError(f"config section {key!r} must be an object")
            if key == "lqmm" and "taus" in value:
                value = {**value, "taus": tuple(float(t) for t in value["taus"])}
            updates[key] = _merge(sections[key], value, getattr(cfg, key))
        elif key in cfg.__dataclass_fields__:
            updates[key] = value
        else:
            raise ValidationError(f"unknown config key {key!r}")
    return replace(cfg, **updates).validate()
