"""Nested-error regression and Monte Carlo best prediction of domain statistics.

The unit-level model is

    y_pl = x_pl' beta + u_p + e_pl,   u_p ~ N(0, s2_u),  e_pl ~ N(0, s2_e)

fitted by profile likelihood: for a fixed variance ratio rho = s2_u / s2_e,
beta and s2_e have closed forms, so the fit is a 1-d search over log rho
with the boundary s2_u = 0 checked explicitly. The best prediction of a
nonlinear per-domain statistic (median by default) averages the statistic
over synthetic censuses drawn from the conditional distribution of the
unobserved units given the sample.

Dimension bookkeeping: N_p is the number of sampled units of domain p and
M_p its population size, so synthetic vectors have length M_p - N_p. Out-
of-sample domains are predicted with gamma = 0, u_tilde = 0 and the full
random-effect variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr as scipy_qr

from .errors import NumericalError, ValidationError

DEFAULT_REPLICATES = 500


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleData:
    """Sampled units: responses in [0,1], encoded design matrix, domain labels.

    validate_support=False skips only the [0,1] range check, for model
    studies on unclipped Gaussian draws; the production pipeline always
    feeds scaled index values and keeps the check on.
    """

    y: np.ndarray
    X: np.ndarray
    domain: tuple[str, ...]
    column_names: tuple[str, ...] | None = None
    validate_support: bool = True

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "domain", tuple(str(d) for d in self.domain))
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValidationError("y must be (n,) and X (n, P) with matching n")
        if len(self.domain) != y.shape[0]:
            raise ValidationError("domain labels must match the number of rows")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise ValidationError("y and X must be finite")
        if self.validate_support and (np.any(y < 0.0) or np.any(y > 1.0)):
            raise ValidationError("responses must lie in [0, 1] (scaled index values)")
        if self.column_names is not None:
            names = tuple(str(c) for c in self.column_names)
            if len(names) != X.shape[1]:
                raise ValidationError("column_names must match the design width")
            object.__setattr__(self, "column_names", names)
        y.setflags(write=False)
        X.setflags(write=False)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    def domain_sizes(self) -> dict[str, int]:
        sizes: dict[str, int] = {}
        for d in self.domain:
            sizes[d] = sizes.get(d, 0) + 1
        return sizes


@dataclass(frozen=True)
class PopulationFrame:
    """Out-of-sample units' covariates plus total population size per domain.

    X_r rows cover only the units NOT in the sample, encoded with the same
    columns as SampleData.X. domain_sizes_pop[d] is the total number of
    population units of domain d (sampled + unsampled); domains with no
    sampled units at all are allowed.
    """

    X_r: np.ndarray
    domain: tuple[str, ...]
    domain_sizes_pop: dict[str, int]

    def __post_init__(self):
        X_r = np.asarray(self.X_r, dtype=float)
        if X_r.ndim != 2:
            raise ValidationError("X_r must be a 2-d matrix (possibly with zero rows)")
        object.__setattr__(self, "X_r", X_r)
        object.__setattr__(self, "domain", tuple(str(d) for d in self.domain))
        object.__setattr__(self, "domain_sizes_pop", dict(self.domain_sizes_pop))
        if len(self.domain) != X_r.shape[0]:
            raise ValidationError("domain labels must match the number of frame rows")
        if not np.all(np.isfinite(X_r)):
            raise ValidationError("frame covariates must be finite")
        counts: dict[str, int] = {}
        for d in self.domain:
            counts[d] = counts.get(d, 0) + 1
        for d, c in counts.items():
            if d not in self.domain_sizes_pop:
                raise ValidationError(f"frame rows reference unknown domain {d!r}")
            if c > self.domain_sizes_pop[d]:
                raise ValidationError(
                    f"domain {d!r} has more frame rows ({c}) than population units"
                )
        X_r.setflags(write=False)


@dataclass(frozen=True)
class NestedErrorFit:
    """Estimated fixed effects, variance components and per-domain effects.

    gamma[d] = s2_u / (s2_u + s2_e / N_d) and u_hat[d] = gamma[d] times the
    mean residual of domain d, for every sampled domain. boundary marks a
    fit that ended on the s2_u = 0 edge.
    """

    beta: np.ndarray
    sigma2_u: float
    sigma2_e: float
    u_hat: dict[str, float]
    gamma: dict[str, float]
    loglik: float
    column_names: tuple[str, ...] | None = None
    boundary: bool = False

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if self.sigma2_u < 0 or self.sigma2_e < 0:
            raise ValidationError("variance components must be nonnegative")
        if not np.all(np.isfinite(beta)):
            raise ValidationError("fixed effects must be finite")


@dataclass(frozen=True)
class EBPResult:
    """Per-domain Monte Carlo best predictions.

    estimate is the raw replicate average; estimate_clamped projects it
    onto the [0, 1] index support for reporting. mc_sd is the replicate
    standard deviation divided by sqrt(B) (0 when B = 1).
    """

    domains: tuple[str, ...]
    estimate: np.ndarray
    estimate_clamped: np.ndarray
    mc_sd: np.ndarray
    B: int
    seed: int
    statistic: str


# ---------------------------------------------------------------------------
# Elementary quantities
# ---------------------------------------------------------------------------


def shrinkage_gamma(sigma2_u: float, sigma2_e: float, N_p: int) -> float:
    """Reliability weight s2_u / (s2_u + s2_e / N_p); 0 for empty domains."""
    if sigma2_u < 0 or sigma2_e <= 0:
        raise ValidationError("need sigma2_u >= 0 and sigma2_e > 0")
    if N_p < 0:
        raise ValidationError("N_p must be nonnegative")
    if N_p == 0 or sigma2_u == 0.0:
        return 0.0
    return sigma2_u / (sigma2_u + sigma2_e / N_p)


def conditional_effect(fit: NestedErrorFit, domain_residuals) -> float:
    """Conditional domain effect from its residuals.

    Evaluates both algebraically identical forms - the matrix expression
    s2_u * 1' V^{-1} r with V = s2_u 11' + s2_e I, and the scalar
    gamma * mean(r) - and insists they agree before returning the value.
    """
    r = np.asarray(domain_residuals, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValidationError("domain_residuals must be a nonempty vector")
    if fit.sigma2_e <= 0:
        raise ValidationError("matrix form requires sigma2_e > 0")
    n = r.size
    gamma = shrinkage_gamma(fit.sigma2_u, fit.sigma2_e, n)
    scalar = gamma * float(r.mean())

    V = fit.sigma2_u * np.ones((n, n)) + fit.sigma2_e * np.eye(n)
    matrix = fit.sigma2_u * float(np.ones(n) @ np.linalg.solve(V, r))

    scale = max(abs(scalar), abs(matrix), 1.0)
    if abs(scalar - matrix) > 1e-8 * scale:
        raise NumericalError(
            f"conditional effect forms disagree: scalar={scalar!r}, matrix={matrix!r}"
        )
    return scalar


# ---------------------------------------------------------------------------
# Profile-likelihood fit
# ---------------------------------------------------------------------------


def _check_full_rank(X: np.ndarray, column_names: tuple[str, ...] | None) -> None:
    _, R, piv = scipy_qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        bad = sorted(piv[rank:])
        if column_names is not None:
            names = ", ".join(column_names[j] for j in bad)
        else:
            names = ", ".join(str(j) for j in bad)
        raise ValidationError(f"design matrix is rank deficient; collinear column(s): {names}")


class _ProfileWorkspace:
    """Per-domain cross-products reused across profile evaluations."""

    def __init__(self, sample: SampleData):
        self.n, self.P = sample.X.shape
        order = np.argsort(np.asarray(sample.domain, dtype=object), kind="stable")
        self.domains = []
        self.sizes = []
        self.XtX = []
        self.Xty = []
        self.s = []  # column sums of X per domain
        self.ty = []  # sum of y per domain
        self.yty = 0.0
        dom = np.asarray(sample.domain, dtype=object)[order]
        X = sample.X[order]
        y = sample.y[order]
        start = 0
        for i in range(1, len(dom) + 1):
            if i == len(dom) or dom[i] != dom[start]:
                Xp, yp = X[start:i], y[start:i]
                self.domains.append(str(dom[start]))
                self.sizes.append(i - start)
                self.XtX.append(Xp.T @ Xp)
                self.Xty.append(Xp.T @ yp)
                self.s.append(Xp.sum(axis=0))
                self.ty.append(float(yp.sum()))
                start = i
        self.yty = float(y @ y)
        self.sizes = np.asarray(self.sizes)

    def gls(self, rho: float) -> tuple[np.ndarray, float, float]:
        """(beta, weighted RSS, sum log det factor) at variance ratio rho."""
        A = np.zeros((self.P, self.P))
        b = np.zeros(self.P)
        yty = self.yty
        logdet = 0.0
        for k, N in enumerate(self.sizes):
            a = rho / (1.0 + rho * N)
            A += self.XtX[k] - a * np.outer(self.s[k], self.s[k])
            b += self.Xty[k] - a * self.s[k] * self.ty[k]
            yty -= a * self.ty[k] ** 2
            logdet += math.log1p(rho * N)
        beta = np.linalg.solve(A, b)
        rss = yty - 2.0 * float(beta @ b) + float(beta @ A @ beta)
        self._A = A
        return beta, max(rss, 0.0), logdet

    def profile_ml(self, rho: float) -> float:
        _, rss, logdet = self.gls(rho)
        if rss <= 0:
            return -math.inf
        s2e = rss / self.n
        return -0.5 * (self.n * math.log(2 * math.pi) + self.n * math.log(s2e) + logdet + self.n)

    def profile_reml(self, rho: float) -> float:
        _, rss, logdet = self.gls(rho)
        if rss <= 0:
            return -math.inf
        dof = self.n - self.P
        s2e = rss / dof
        sign, logdet_A = np.linalg.slogdet(self._A)
        if sign <= 0:
            return -math.inf
        return -0.5 * (dof * (math.log(2 * math.pi) + math.log(s2e) + 1.0) + logdet + logdet_A)


def _golden_max(fun, lo: float, hi: float, iters: int = 80) -> float:
    """Golden-section maximization of a unimodal scalar function."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def fit_nested_error(sample: SampleData, *, reml: bool = False) -> NestedErrorFit:
    """Maximum-likelihood fit of the nested-error model by profiling.

    The 1-d criterion over log rho is first scanned on a coarse grid,
    refined by golden section, and compared against the rho = 0 boundary
    (no domain effect); the boundary winning is valid output and flagged.
    Set reml=True for the restricted-likelihood variant of the variance
    profile; the reported loglik is always the marginal Gaussian
    log-density of y at the returned estimates.

    Raises ValidationError for rank-deficient designs (naming the
    collinear columns) and for fewer than 2 domains with 2+ units.
    """
    ws = _ProfileWorkspace(sample)
    if int((ws.sizes >= 2).sum()) < 2:
        raise ValidationError("need at least 2 domains with at least 2 units each")
    _check_full_rank(sample.X, sample.column_names)

    objective = ws.profile_reml if reml else ws.profile_ml

    grid = np.concatenate([[-math.inf], np.linspace(-16.0, 16.0, 65)])
    vals = [objective(0.0 if not math.isfinite(t) else math.exp(t)) for t in grid]
    best = int(np.argmax(vals))
    if best == 0:
        rho_hat = 0.0
    else:
        lo = grid[max(best - 1, 1)]
        hi = grid[min(best + 1, len(grid) - 1)]
        t_hat = _golden_max(lambda t: objective(math.exp(t)), lo, hi)
        rho_hat = math.exp(t_hat)
        if objective(rho_hat) < vals[0]:
            rho_hat = 0.0

    beta, rss, _ = ws.gls(rho_hat)
    dof = ws.n - ws.P if reml else ws.n
    s2e = rss / dof
    s2u = rho_hat * s2e
    boundary = rho_hat == 0.0

    # Per-domain shrinkage and conditional effects from raw residuals.
    gamma: dict[str, float] = {}
    u_hat: dict[str, float] = {}
    resid = sample.y - sample.X @ beta
    dom = np.asarray(sample.domain, dtype=object)
    for d, N in zip(ws.domains, ws.sizes):
        g = shrinkage_gamma(s2u, s2e, int(N)) if s2e > 0 else 0.0
        gamma[d] = g
        u_hat[d] = g * float(resid[dom == d].mean())

    loglik = marginal_loglik(sample, beta, s2u, s2e)
    return NestedErrorFit(
        beta=beta,
        sigma2_u=float(s2u),
        sigma2_e=float(s2e),
        u_hat=u_hat,
        gamma=gamma,
        loglik=loglik,
        column_names=sample.column_names,
        boundary=boundary,
    )


def marginal_loglik(sample: SampleData, beta: np.ndarray, sigma2_u: float, sigma2_e: float) -> float:
    """Marginal Gaussian log-density of the sample under the nested-error model.

    Uses the closed-form determinant and inverse of the exchangeable
    per-domain covariance, so it is exact and cheap for any domain sizes.
    """
    if sigma2_e <= 0:
        raise ValidationError("sigma2_e must be positive")
    rho = sigma2_u / sigma2_e
    resid = sample.y - sample.X @ beta
    dom = np.asarray(sample.domain, dtype=object)
    total = 0.0
    for d in dict.fromkeys(sample.domain):
        r = resid[dom == d]
        N = r.size
        a = rho / (1.0 + rho * N)
        quad = (float(r @ r) - a * float(r.sum()) ** 2) / sigma2_e
        logdet = N * math.log(sigma2_e) + math.log1p(rho * N)
        total += -0.5 * (N * math.log(2 * math.pi) + logdet + quad)
    return total


# ---------------------------------------------------------------------------
# Synthetic censuses and the Monte Carlo best prediction
# ---------------------------------------------------------------------------


def _domain_order(fit: NestedErrorFit, frame: PopulationFrame, sample: SampleData) -> list[str]:
    return sorted(set(frame.domain_sizes_pop) | set(sample.domain))


def _frame_rows_by_domain(frame: PopulationFrame) -> dict[str, np.ndarray]:
    dom = np.asarray(frame.domain, dtype=object)
    return {d: np.flatnonzero(dom == d) for d in dict.fromkeys(frame.domain)}


def _validate_pair(sample: SampleData, frame: PopulationFrame) -> None:
    sizes = sample.domain_sizes()
    missing = sorted(set(sizes) - set(frame.domain_sizes_pop))
    if missing:
        raise ValidationError(
            "sampled domain(s) absent from the population frame: " + ", ".join(missing)
        )
    counts: dict[str, int] = {}
    for d in frame.domain:
        counts[d] = counts.get(d, 0) + 1
    for d, M in frame.domain_sizes_pop.items():
        if sizes.get(d, 0) + counts.get(d, 0) != M:
            raise ValidationError(
                f"domain {d!r}: sampled ({sizes.get(d, 0)}) plus frame rows "
                f"({counts.get(d, 0)}) must equal the population size ({M})"
            )


def simulate_census(
    fit: NestedErrorFit,
    frame: PopulationFrame,
    sample: SampleData,
    seed: int | tuple[int, ...],
) -> dict[str, np.ndarray]:
    """One synthetic replicate of the full population, keyed by domain.

    Sampled units keep their observed responses. Every out-of-sample unit
    receives x' beta + u_tilde_p + u_star_p + eps, with
    u_star_p ~ N(0, s2_u (1 - gamma_p)) shared within the domain and
    idiosyncratic eps ~ N(0, s2_e). Domains in the frame but absent from
    the fit are treated as unsampled (gamma = 0, u_tilde = 0). Each
    domain draws from its own substream derived from (seed, domain), so
    results do not depend on iteration order.
    """
    _validate_pair(sample, frame)
    if frame.X_r.shape[0] and frame.X_r.shape[1] != fit.beta.shape[0]:
        raise ValidationError("frame design width does not match the fitted coefficients")
    seed_tuple = (seed,) if isinstance(seed, (int, np.integer)) else tuple(int(s) for s in seed)

    order = _domain_order(fit, frame, sample)
    rows_by_domain = _frame_rows_by_domain(frame)
    base = frame.X_r @ fit.beta if frame.X_r.shape[0] else np.zeros(0)
    sdom = np.asarray(sample.domain, dtype=object)

    out: dict[str, np.ndarray] = {}
    for idx, d in enumerate(order):
        observed = sample.y[sdom == d]
        rows = rows_by_domain.get(d)
        if rows is None or rows.size == 0:
            out[d] = observed.copy()
            continue
        g = fit.gamma.get(d, 0.0)
        u_tilde = fit.u_hat.get(d, 0.0)
        rng = np.random.default_rng(np.random.SeedSequence((*seed_tuple, idx)))
        u_star = rng.normal(0.0, math.sqrt(max(fit.sigma2_u * (1.0 - g), 0.0)))
        eps = rng.normal(0.0, math.sqrt(fit.sigma2_e), size=rows.size) if fit.sigma2_e > 0 else np.zeros(rows.size)
        synthetic = base[rows] + u_tilde + u_star + eps
        out[d] = np.concatenate([observed, synthetic])
    return out


def _statistic_fn(statistic):
    if statistic == "median":
        return np.median, "median"
    if statistic == "mean":
        return np.mean, "mean"
    if isinstance(statistic, float) and 0.0 < statistic < 1.0:
        return (lambda v: np.quantile(v, statistic)), f"q{statistic:g}"
    raise ValidationError(f"unsupported statistic {statistic!r}")


def ebp_indicator(
    fit: NestedErrorFit,
    frame: PopulationFrame,
    sample: SampleData,
    *,
    statistic="median",
    B: int = DEFAULT_REPLICATES,
    seed: int = 0,
) -> EBPResult:
    """Monte Carlo best prediction of a per-domain population statistic.

    Builds B synthetic censuses, evaluates the statistic over each
    domain's full population (observed plus synthetic), and averages
    over replicates. A pure function of (fit, frame, sample, statistic,
    B, seed): reruns are identical. Fully sampled domains reproduce the
    direct statistic exactly for any B.
    """
    if B < 1:
        raise ValidationError("B must be at least 1")
    _validate_pair(sample, frame)
    if frame.X_r.shape[0] and frame.X_r.shape[1] != fit.beta.shape[0]:
        raise ValidationError("frame design width does not match the fitted coefficients")

    stat, stat_name = _statistic_fn(statistic)
    order = _domain_order(fit, frame, sample)
    rows_by_domain = _frame_rows_by_domain(frame)
    base = frame.X_r @ fit.beta if frame.X_r.shape[0] else np.zeros(0)
    sdom = np.asarray(sample.domain, dtype=object)
    sd_e = math.sqrt(fit.sigma2_e) if fit.sigma2_e > 0 else 0.0

    estimates = np.empty((len(order), B))
    direct: dict[int, float] = {}
    for idx, d in enumerate(order):
        observed = sample.y[sdom == d]
        rows = rows_by_domain.get(d)
        if rows is None or rows.size == 0:
            # No synthetic units: the direct statistic, exactly, for any B.
            direct[idx] = float(stat(observed))
            estimates[idx, :] = direct[idx]
            continue
        g = fit.gamma.get(d, 0.0)
        u_tilde = fit.u_hat.get(d, 0.0)
        sd_u = math.sqrt(max(fit.sigma2_u * (1.0 - g), 0.0))
        mean_part = base[rows] + u_tilde
        values = np.empty(observed.size + rows.size)
        values[: observed.size] = observed
        if sd_u == 0.0 and sd_e == 0.0:
            # Degenerate variances: every replicate is the same census.
            values[observed.size :] = mean_part
            direct[idx] = float(stat(values))
            estimates[idx, :] = direct[idx]
            continue
        for b in range(B):
            rng = np.random.default_rng(np.random.SeedSequence((seed, b, idx)))
            u_star = rng.normal(0.0, sd_u)
            eps = rng.normal(0.0, sd_e, size=rows.size) if sd_e > 0 else 0.0
            values[observed.size :] = mean_part + u_star + eps
            estimates[idx, b] = stat(values)

    est = estimates.mean(axis=1)
    if B > 1:
        mc_sd = estimates.std(axis=1, ddof=1) / math.sqrt(B)
    else:
        mc_sd = np.zeros(len(order))
    for idx, val in direct.items():
        est[idx] = val
        mc_sd[idx] = 0.0
    return EBPResult(
        domains=tuple(order),
        estimate=est,
        estimate_clamped=np.clip(est, 0.0, 1.0),
        mc_sd=mc_sd,
        B=B,
        seed=seed,
        statistic=stat_name,
    )
