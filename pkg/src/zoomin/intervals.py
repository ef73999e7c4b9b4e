"""Confidence intervals for the jump location.

Three families are built from a final-stage fit and canonical argmin
quantiles:

* conservative: ``a`` from the lower tail of ``d_l`` and ``b`` from the upper
  tail of ``d_u``, shared by every centre;
* exact: both ends from the limit law of the statistic used as centre;
* finite-sample: the two-stage equal-allocation interval whose half-width
  follows from the window calculus alone.

Coverage should be judged on the raw interval; the [0, 1] clip is reported
separately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .cpp import CppQuantiles
from .errors import MissingQuantiles, PlanMismatch, ValidationError
from .estimator import SplitFit

FAMILIES = ("conservative", "exact", "finite-sample", "multistage")
CENTERS = ("lo", "hi", "av")


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    level: float
    family: str
    center: str
    estimate: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValidationError(f"interval ends out of order: ({self.lo}, {self.hi})")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def clipped(self) -> tuple[float, float]:
        return max(self.lo, 0.0), min(self.hi, 1.0)

    @property
    def was_clipped(self) -> bool:
        return self.lo < 0.0 or self.hi > 1.0

    def covers(self, d0: float) -> bool:
        return self.lo <= d0 <= self.hi

    def to_json(self) -> dict:
        c_lo, c_hi = self.clipped
        return {"family": self.family, "center": self.center, "level": self.level,
                "estimate": self.estimate, "lo": self.lo, "hi": self.hi,
                "clipped": [c_lo, c_hi], "was_clipped": self.was_clipped}


def limit_rate(K: float, lam: float, gamma: float, h0: float | None = None) -> float:
    """Poisson rate of the second-stage limit process.

    With a uniform second stage this is ``(lam / (1 - lam))**gamma / (2 K)``;
    a sampling density ``h`` on [-1, 1] replaces ``1/2`` by ``h(0)``.
    """
    if not (K > 0 and 0 < lam < 1 and 0 < gamma < 1):
        raise ValidationError("need K > 0, 0 < lam < 1 and 0 < gamma < 1")
    ratio = (lam / (1.0 - lam)) ** gamma
    return ratio / (2.0 * K) if h0 is None else ratio * h0 / K


def multistage_rate(K_prev: float, lam_prev: float, lam_last: float, gamma_prev: float,
                    P: int) -> float:
    """Limit rate after ``P`` stages, paired with normalization n_P**((P-1)+gamma)."""
    return (lam_prev / lam_last) ** ((P - 2) + gamma_prev) / (2.0 * K_prev)


def _check(tau: float, center: str):
    if not 0 < tau < 1:
        raise ValidationError("tau must lie in (0, 1)")
    if center not in CENTERS:
        raise ValidationError(f"center must be one of {CENTERS}")


def _lookup(q: CppQuantiles | None, stat: str, p: float) -> float:
    if q is None:
        raise MissingQuantiles("no quantile table supplied")
    return q.quantile(stat, p)


def _build(fit: SplitFit, center: str, a: float, b: float, scale: float, tau: float,
           family: str) -> ConfidenceInterval:
    est = fit.estimate(center)
    return ConfidenceInterval(est - b * scale, est - a * scale, 1.0 - tau, family, center, est)


def _scale(C: float, n_stage: int, gamma: float, exponent: float | None) -> float:
    if not C > 0:
        raise ValidationError("limit rate C must be positive")
    e = 1.0 + gamma if exponent is None else exponent
    return 1.0 / (C * n_stage ** e)


def conservative_ci(fit: SplitFit, quantiles: CppQuantiles, C: float, n2: int, gamma: float,
                    tau: float = 0.05, center: str = "av",
                    exponent: float | None = None) -> ConfidenceInterval:
    """``(d - b / (C n2^(1+gamma)), d - a / (C n2^(1+gamma)))`` with envelope quantiles.

    ``a`` is the ``tau/2`` quantile of the canonical ``d_l`` and ``b`` the
    ``1 - tau/2`` quantile of the canonical ``d_u``.  ``exponent`` replaces
    ``1 + gamma`` for P-stage normalizations.
    """
    _check(tau, center)
    a = _lookup(quantiles, "l", tau / 2)
    b = _lookup(quantiles, "u", 1 - tau / 2)
    return _build(fit, center, a, b, _scale(C, n2, gamma, exponent), tau, "conservative")


def exact_ci(fit: SplitFit, quantiles: CppQuantiles, C: float, n2: int, gamma: float,
             tau: float = 0.05, center: str = "av",
             exponent: float | None = None) -> ConfidenceInterval:
    """Same shape as :func:`conservative_ci` with quantiles of the centre's own law."""
    _check(tau, center)
    stat = {"lo": "l", "hi": "u", "av": "av"}[center]
    a = _lookup(quantiles, stat, tau / 2)
    b = _lookup(quantiles, stat, 1 - tau / 2)
    return _build(fit, center, a, b, _scale(C, n2, gamma, exponent), tau, "exact")


def finite_sample_half_width(n: int, C_zeta1: float, C_tauhalf: float) -> float:
    return 8.0 * C_zeta1 * C_tauhalf / n ** 2


def finite_sample_ci(d_av: float, n: int, C_zeta1: float, C_tauhalf: float, tau: float = 0.05,
                     plan=None) -> ConfidenceInterval:
    """``d_av -/+ 8 C_zeta1 C_(tau/2) / n^2`` for the equal-split two-stage design."""
    if not 0 < tau < 1:
        raise ValidationError("tau must lie in (0, 1)")
    if plan is not None:
        equal = plan.P == 2 and all(math.isclose(x, 0.5) for x in plan.lam)
        if not (equal and plan.uses_calculus):
            raise PlanMismatch("the finite-sample interval needs the equal-split two-stage "
                               "plan with derived window constants")
    half = finite_sample_half_width(n, C_zeta1, C_tauhalf)
    return ConfidenceInterval(d_av - half, d_av + half, 1.0 - tau, "finite-sample", "av", d_av)


def multistage_half_width(q: int, lam, C_values, n: int) -> float:
    """Half-width of the level ``1 - 2 zeta_{q-1}`` interval around stage q-1.

    ``C_values`` holds ``C_{zeta_1}, ..., C_{zeta_{q-1}}``.
    """
    if q < 2:
        raise ValidationError("q must be >= 2")
    C_values = list(C_values)
    if len(C_values) < q - 1:
        raise MissingQuantiles(f"need {q - 1} quantile factors, got {len(C_values)}")
    return (2.0 ** (q - 2) * math.prod(C_values[: q - 1])
            / (n ** (q - 1) * math.prod(list(lam)[: q - 1])))


def multistage_ci(center_value: float, q: int, lam, C_values, n: int,
                  zeta_last: float | None = None) -> ConfidenceInterval:
    half = multistage_half_width(q, lam, C_values, n)
    level = 1.0 - 2.0 * zeta_last if zeta_last is not None else float("nan")
    return ConfidenceInterval(center_value - half, center_value + half, level, "multistage",
                              "av", center_value)
