"""Multistage zoom-in plans and the experiment driver.

Stage 1 spreads its share of the budget over [0, 1] and fits both segments
and the split jointly.  Each later stage samples inside a window centred on
the previous estimate and relocates the split with the stage-one segment
parameters frozen.

Window constants either come from the user (``K``) or from the allocation
calculus, which sizes the stage-q window to the level ``1 - 2 zeta_{q-1}``
neighbourhood of the stage-(q-1) estimate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidStageCount, MissingQuantiles, StageUnderflow, ValidationError
from .estimator import SplitFit, Window, fit_fixed, fit_free
from .model import Oracle, TabulatedDensity, draw_density_covariates, draw_uniform_covariates

# below this many stage-one points per stage an equispaced first stage is used
EQUISPACED_BELOW = 60

STAGE_ONE_DESIGNS = ("auto", "random", "equispaced")

# plug-in SNRs above this (e.g. noiseless responses) use the cap; the limit law is
# then indistinguishable from the noiseless one
PLUGIN_SNR_CAP = 50.0


@dataclass(frozen=True)
class StagePlan:
    P: int = 2
    lam: tuple[float, ...] | None = None
    gamma: tuple[float, ...] | None = None
    zeta: tuple[float, ...] | None = None
    K: tuple[float, ...] | None = None
    first_stage_design: str = "auto"
    # "uniform", "equispaced", or a density name from model.KERNELS
    second_stage_density: str = "uniform"
    center: str = "av"
    reestimate_stump: bool = False
    snr: float | None = None
    eps0: float = 0.05

    def __post_init__(self):
        P = self.P
        if not isinstance(P, int) or P < 1:
            raise InvalidStageCount(f"P must be a positive integer, got {P!r}")
        lam = tuple(self.lam) if self.lam is not None else tuple([1.0 / P] * P)
        gamma = tuple(self.gamma) if self.gamma is not None else tuple(
            1.0 / (q + 1) for q in range(1, P))
        zeta = tuple(self.zeta) if self.zeta is not None else tuple(
            [zeta_from_delta(P, 0.001) / 2] * (P - 1) if P > 1 else [])
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "zeta", zeta)
        if self.K is not None:
            object.__setattr__(self, "K", tuple(float(k) for k in self.K))
        if len(lam) != P or any(not x > 0 for x in lam) or not math.isclose(sum(lam), 1.0, abs_tol=1e-9):
            raise ValidationError(f"lam must hold {P} positive fractions summing to 1, got {lam}")
        if len(gamma) != P - 1 or any(not 0 < g < 1 for g in gamma):
            raise ValidationError(f"gamma must hold {P - 1} values in (0, 1), got {gamma}")
        if any(a <= b for a, b in zip(gamma, gamma[1:])):
            raise ValidationError("gamma must be strictly decreasing across stages")
        if len(zeta) != P - 1 or any(not 0 < z < 0.5 for z in zeta):
            raise ValidationError(f"zeta must hold {P - 1} values in (0, 1/2), got {zeta}")
        if self.K is not None and (len(self.K) != P - 1 or any(not k > 0 for k in self.K)):
            raise ValidationError(f"K must hold {P - 1} positive values, got {self.K}")
        if self.first_stage_design not in STAGE_ONE_DESIGNS:
            raise ValidationError(f"first_stage_design must be one of {STAGE_ONE_DESIGNS}")
        if self.center not in ("av", "lo"):
            raise ValidationError("center must be 'av' or 'lo'")
        if self.snr is not None and not self.snr > 0:
            raise ValidationError("snr must be positive")

    @property
    def uses_calculus(self) -> bool:
        return self.K is None

    def stage_one_design(self, n: int) -> str:
        if self.first_stage_design != "auto":
            return self.first_stage_design
        return "equispaced" if n / self.P < EQUISPACED_BELOW else "random"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "StagePlan":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown plan fields: {sorted(extra)}")
        data = dict(data)
        for key in ("lam", "gamma", "zeta", "K"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


def equal_plan(P: int = 2, **kw) -> StagePlan:
    return StagePlan(P=P, lam=tuple([1.0 / P] * P), **kw)


def fixed_k_plan(K: float, gamma: float, **kw) -> StagePlan:
    """Two-stage plan with a user window constant and lambda = gamma / (1 + gamma)."""
    lam1 = gamma / (1.0 + gamma)
    return StagePlan(P=2, lam=(lam1, 1.0 - lam1), gamma=(gamma,), K=(K,), **kw)


def zeta_from_delta(P: int, delta: float) -> float:
    """Per-stage miss probability psi = 2 zeta giving overall trap probability 1 - delta."""
    if P < 2:
        raise InvalidStageCount("need at least two stages to spend a miss probability")
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    return 1.0 - (1.0 - delta) ** (1.0 / (P - 1))


def allocate_counts(n: int, lam) -> list[int]:
    """Largest-remainder rounding of ``lam * n``; ties go to earlier stages."""
    raw = np.asarray(lam, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(int)
    short = n - int(counts.sum())
    rem = raw - counts
    # stable sort on -rem keeps earlier stages first among equal remainders
    for i in np.argsort(-np.round(rem, 12), kind="stable")[:short]:
        counts[i] += 1
    return counts.tolist()


def window_constant(q: int, plan: StagePlan, C: Callable[[float], float], n: int,
                    lam=None) -> float:
    """K_{q-1} from the allocation calculus.

    ``C(zeta)`` returns the canonical upper quantile; ``lam`` overrides the
    plan fractions (the driver passes realized ``n_i / n``).
    """
    if q < 2 or q > plan.P:
        raise ValidationError(f"stage {q} has no window in a {plan.P}-stage plan")
    lam = plan.lam if lam is None else tuple(lam)
    g = plan.gamma[q - 2]
    if not 0 < g < 1:
        raise ValidationError("gamma must lie in (0, 1)")
    try:
        prod_c = math.prod(C(z) for z in plan.zeta[: q - 1])
    except (KeyError, MissingQuantiles) as exc:
        raise MissingQuantiles(f"no quantiles for stage {q}: {exc}") from exc
    denom = n ** (1.0 - g) * math.prod(lam[: q - 2]) * lam[q - 2] ** (-g - q + 3)
    return 2.0 ** (q - 2) * prod_c / denom


def window_half_width(q: int, K: float, n_prev: int, gamma: float) -> float:
    return K * n_prev ** (-((q - 2) + gamma))


def stage_window(center: float, q: int, K: float, n_prev: int, gamma: float) -> Window:
    """Zoom-in window for stage ``q`` around the previous estimate, clipped to [0, 1]."""
    if q < 2:
        raise ValidationError("stage windows start at q = 2")
    half = window_half_width(q, K, n_prev, gamma)
    return Window.clipped(center - half, center + half)


@dataclass
class StageRecord:
    q: int
    n: int
    window: Window
    K: float | None
    design: str
    fit: SplitFit
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    missed: bool | None = None


@dataclass
class RunResult:
    plan: StagePlan
    n: int
    stages: list[StageRecord]
    snr_used: float | None
    budget_used: int
    d0: float | None = None

    @property
    def final(self) -> SplitFit:
        return self.stages[-1].fit

    @property
    def estimate(self) -> tuple[float, float, float]:
        f = self.final
        return f.d_lo, f.d_hi, f.d_av

    @property
    def window_missed(self) -> list[bool | None]:
        return [s.missed for s in self.stages[1:]]

    @property
    def any_missed(self) -> bool:
        return any(bool(m) for m in self.window_missed)

    def to_json(self) -> dict:
        stages = []
        for s in self.stages:
            stages.append({
                "q": s.q, "n": s.n, "design": s.design, "K": s.K,
                "window": [s.window.lo, s.window.hi],
                "window_nominal": list(s.window.nominal) if s.window.nominal else None,
                "d_lo": s.fit.d_lo, "d_hi": s.fit.d_hi, "d_av": s.fit.d_av,
                "beta_l": s.fit.beta_l.tolist(), "beta_u": s.fit.beta_u.tolist(),
                "rss": s.fit.rss, "sigma_hat": s.fit.sigma_hat, "missed": s.missed,
            })
        return {"plan": self.plan.to_json(), "n": self.n, "snr_used": self.snr_used,
                "budget_used": self.budget_used, "d0": self.d0, "stages": stages}


def _stream(rng, k: int) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        seq = rng.bit_generator.seed_seq
        if not isinstance(seq, np.random.SeedSequence):
            seq = np.random.SeedSequence(int(rng.integers(2 ** 63)))
    elif isinstance(rng, np.random.SeedSequence):
        seq = rng
    else:
        seq = np.random.SeedSequence(rng)
    return [np.random.Generator(np.random.Philox(s)) for s in seq.spawn(k)]


def run_experiment(oracle: Oracle, plan: StagePlan, rng, left_basis: str = "constant",
                   right_basis: str = "constant", n: int | None = None,
                   quantiles: Callable[[float], object] | object | None = None,
                   d0: float | None = None) -> RunResult:
    """Run every stage of ``plan`` against ``oracle``.

    ``rng`` is an int seed, a SeedSequence or a Generator; one child stream
    is spawned per stage.  ``quantiles`` is a CppQuantiles-like object with a
    ``C(zeta)`` method, or a callable mapping an SNR to one; it is required
    only when the plan derives its window constants.  ``d0`` (simulation
    only) enables window-miss bookkeeping.
    """
    n = oracle.remaining if n is None else int(n)
    if n > oracle.remaining:
        raise ValidationError(f"budget {n} exceeds the oracle's remaining {oracle.remaining}")
    counts = allocate_counts(n, plan.lam)
    for q, c in enumerate(counts, start=1):
        if c < 2:
            raise StageUnderflow(f"stage {q} gets {c} points (lam={plan.lam[q - 1]}, n={n})")
    streams = _stream(rng, plan.P)
    realized = [c / n for c in counts]

    design = plan.stage_one_design(n)
    x1 = draw_uniform_covariates(Window(0.0, 1.0), counts[0], streams[0], mode=design)
    x1, y1 = oracle.query_batch(x1, streams[0])
    fit1 = fit_free(x1, y1, Window(plan.eps0, 1.0 - plan.eps0), left_basis, right_basis)
    stages = [StageRecord(1, counts[0], Window(plan.eps0, 1.0 - plan.eps0), None, design,
                          fit1, x1, y1)]
    snr = plan.snr
    if plan.P > 1 and snr is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            snr = float(fit1.snr())
        if math.isnan(snr):
            raise ValidationError("stage-one fit found no jump to zoom in on")
        snr = min(snr, PLUGIN_SNR_CAP)
    C = None
    if plan.P > 1 and plan.uses_calculus:
        if quantiles is None:
            raise MissingQuantiles("the plan derives K but no quantile tables were given")
        table = quantiles(snr) if callable(quantiles) and not hasattr(quantiles, "C") else quantiles
        C = table.C

    beta_l, beta_u = fit1.beta_l, fit1.beta_u
    center = fit1.estimate(plan.center)
    h = None
    if plan.second_stage_density not in ("uniform", "equispaced"):
        h = TabulatedDensity(plan.second_stage_density)
    for q in range(2, plan.P + 1):
        if plan.uses_calculus:
            K = window_constant(q, plan, C, n, realized)
        else:
            K = plan.K[q - 2]
        win = stage_window(center, q, K, counts[q - 2], plan.gamma[q - 2])
        g = streams[q - 1]
        if h is not None:
            xq = draw_density_covariates(win, counts[q - 1], h, g)
            mode = plan.second_stage_density
        else:
            mode = "equispaced" if plan.second_stage_density == "equispaced" else "random"
            xq = draw_uniform_covariates(win, counts[q - 1], g, mode=mode)
        xq, yq = oracle.query_batch(xq, g)
        if plan.reestimate_stump and left_basis == right_basis == "constant":
            xa = np.concatenate([s.x for s in stages] + [xq])
            ya = np.concatenate([s.y for s in stages] + [yq])
            left = xa <= center
            if left.any() and (~left).any():
                beta_l = np.array([ya[left].mean()])
                beta_u = np.array([ya[~left].mean()])
        fit = fit_fixed(xq, yq, win, beta_l, beta_u, left_basis, right_basis)
        missed = None if d0 is None else not win.contains(d0)
        stages.append(StageRecord(q, counts[q - 1], win, K, mode, fit, xq, yq, missed))
        center = fit.estimate(plan.center)
    return RunResult(plan, n, stages, snr, oracle.budget_used, d0)
