"""Least-squares split search for a single jump in a piecewise-parametric curve.

Both criteria handled here are right-continuous step functions of the split
location ``d`` that only jump at sample covariates, so scanning the distinct
covariates inside the search window (plus the window's left edge) is exact.

A point ``z`` counts as a minimizer when either ``f(z)`` or the left limit
``f(z-)`` attains the minimum.  For a minimizing stretch ``[c_j, c_{j+1})``
this makes the closed interval ``[c_j, c_{j+1}]`` minimizing, which is why the
largest minimizer is reported as the jump point following the last minimizing
candidate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis as _basis
from .errors import AllCandidatesSkipped, DegenerateWindow, EmptySampleSet, InsufficientData

# relative slack used when collecting tied minima of a floating point criterion
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Window:
    lo: float
    hi: float
    # unclipped (lo, hi) when the interval was cut back to [0, 1]
    nominal: tuple[float, float] | None = None

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise DegenerateWindow(f"need 0 <= lo < hi <= 1, got [{self.lo}, {self.hi}]")

    @classmethod
    def clipped(cls, lo: float, hi: float) -> "Window":
        """Intersect ``[lo, hi]`` with [0, 1], remembering the raw bounds."""
        c_lo, c_hi = max(lo, 0.0), min(hi, 1.0)
        if not c_lo < c_hi:
            raise DegenerateWindow(f"[{lo}, {hi}] does not overlap [0, 1]")
        return cls(c_lo, c_hi, nominal=(lo, hi))

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def nominal_width(self) -> float:
        if self.nominal is None:
            return self.width
        return self.nominal[1] - self.nominal[0]

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


UNIT = Window(0.0, 1.0)


@dataclass(frozen=True)
class SplitFit:
    d_lo: float
    d_hi: float
    beta_l: np.ndarray
    beta_u: np.ndarray
    rss: float
    sigma_hat: float
    n: int
    left_basis: str = "constant"
    right_basis: str = "constant"

    @property
    def d_av(self) -> float:
        return 0.5 * (self.d_lo + self.d_hi)

    def estimate(self, center: str = "av") -> float:
        return {"lo": self.d_lo, "hi": self.d_hi, "av": self.d_av}[center]

    def gap(self, at: float | None = None) -> float:
        """Fitted jump size |left - right| at ``at`` (defaults to d_av)."""
        x = self.d_av if at is None else at
        left = _basis.evaluate(self.left_basis, self.beta_l, [x])[0]
        right = _basis.evaluate(self.right_basis, self.beta_u, [x])[0]
        return abs(left - right)

    def snr(self) -> float:
        return self.gap() / self.sigma_hat


def _candidates(xs: np.ndarray, window: Window):
    """Split locations and the number of sorted samples left of each.

    ``xs`` must be sorted.  Returns (d, cut, next_d, n_distinct_left) where
    ``cut[j]`` counts samples with x <= d[j] and ``next_d[j]`` is the next jump
    location (or window.hi).
    """
    ux = np.unique(xs)
    inner = ux[(ux > window.lo) & (ux <= window.hi)]
    d = np.concatenate(([window.lo], inner))
    cut = np.searchsorted(xs, d, side="right")
    next_d = np.append(d[1:], window.hi)
    n_distinct_left = np.searchsorted(ux, d, side="right")
    return d, cut, next_d, n_distinct_left, ux.size


def _pick(crit: np.ndarray, valid: np.ndarray, d, next_d, scale: float):
    """Index of the first minimizing candidate and the largest minimizer."""
    if not valid.any():
        raise AllCandidatesSkipped("no split leaves enough distinct covariates on both sides")
    vals = np.where(valid, crit, np.inf)
    best = vals.min()
    tol = TIE_RTOL * max(scale, abs(best), np.finfo(float).tiny)
    hits = np.flatnonzero(vals <= best + tol)
    return hits[0], float(next_d[hits[-1]]), float(best)


def _side_rss(F: np.ndarray, y: np.ndarray):
    """Prefix least-squares RSS for every cut 0..n of the rows of (F, y).

    Returns an array of length n+1: entry c is the RSS of regressing y[:c] on
    F[:c].  Entries with a singular design are meaningless and must be masked
    by the caller.
    """
    n, p = F.shape
    zero = np.zeros((1, p, p))
    A = np.concatenate([zero, np.cumsum(F[:, :, None] * F[:, None, :], axis=0)])
    b = np.concatenate([np.zeros((1, p)), np.cumsum(F * y[:, None], axis=0)])
    yy = np.concatenate([[0.0], np.cumsum(y * y)])
    if p == 1:
        m = A[:, 0, 0]
        with np.errstate(invalid="ignore", divide="ignore"):
            fitted = np.where(m > 0, b[:, 0] ** 2 / np.where(m > 0, m, 1.0), 0.0)
        return np.maximum(yy - fitted, 0.0)
    # swap in the identity for exactly singular prefixes so the batched solve
    # never raises; near-singular prefixes are masked by the caller's
    # distinct-covariate rule
    ok = np.linalg.det(A) != 0
    A_safe = np.where(ok[:, None, None], A, np.eye(p))
    coef = np.linalg.solve(A_safe, b[:, :, None])[:, :, 0]
    fitted = np.einsum("ij,ij->i", coef, b)
    return np.maximum(np.where(ok, yy - fitted, np.inf), 0.0)


def _lstsq(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    F = _basis.design(name, x)
    coef, *_ = np.linalg.lstsq(F, y, rcond=None)
    return coef


def _prepare(x, y):
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.size != y.size:
        raise ValueError("x and y must have the same length")
    order = np.argsort(x, kind="stable")
    return x[order], y[order]


def fit_free(x, y, window: Window = UNIT, left_basis: str = "constant",
             right_basis: str = "constant") -> SplitFit:
    """Jointly fit both segments and the split location.

    The profiled criterion ``SS(d)`` (sum of the two one-sided least-squares
    RSS values) is evaluated at every candidate split in one sweep over
    cumulative sufficient statistics.  Splits leaving fewer distinct
    covariates on a side than that side's basis dimension are skipped.
    Coefficients are refitted at the smallest minimizer.
    """
    xs, ys = _prepare(x, y)
    n = xs.size
    if n < 2:
        raise InsufficientData(f"need at least 2 samples, got {n}")
    p_l, p_u = _basis.dim(left_basis), _basis.dim(right_basis)
    d, cut, next_d, left_distinct, n_distinct = _candidates(xs, window)

    # RSS is invariant to shifting x and y, so center to limit cancellation
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    rss_left = _side_rss(_basis.design(left_basis, xc), yc)
    rss_right = _side_rss(_basis.design(right_basis, xc[::-1]), yc[::-1])[::-1]
    crit = rss_left[cut] + rss_right[cut]
    valid = (left_distinct >= p_l) & (n_distinct - left_distinct >= p_u)

    j, d_hi, rss = _pick(crit, valid, d, next_d, scale=float(yc @ yc))
    c = cut[j]
    beta_l = _lstsq(left_basis, xs[:c], ys[:c])
    beta_u = _lstsq(right_basis, xs[c:], ys[c:])
    dof = n - p_l - p_u
    sigma_hat = float(np.sqrt(rss / dof)) if dof > 0 else float("nan")
    return SplitFit(float(d[j]), d_hi, beta_l, beta_u, rss, sigma_hat, n,
                    left_basis, right_basis)


def fit_fixed(x, y, window: Window, beta_l, beta_u, left_basis: str = "constant",
              right_basis: str = "constant") -> SplitFit:
    """Locate the split with both segment curves frozen.

    Minimizes ``sum (y - left(x))^2 1(x <= d) + (y - right(x))^2 1(x > d)``
    over ``d`` in the window.
    """
    xs, ys = _prepare(x, y)
    if xs.size == 0:
        raise EmptySampleSet("fit_fixed needs at least one sample")
    beta_l = np.asarray(beta_l, dtype=float).reshape(-1)
    beta_u = np.asarray(beta_u, dtype=float).reshape(-1)
    r_l = (ys - _basis.evaluate(left_basis, beta_l, xs)) ** 2
    r_u = (ys - _basis.evaluate(right_basis, beta_u, xs)) ** 2
    d, cut, next_d, _, _ = _candidates(xs, window)
    crit = r_u.sum() + np.concatenate([[0.0], np.cumsum(r_l - r_u)])[cut]
    j, d_hi, rss = _pick(crit, np.ones(d.size, bool), d, next_d,
                         scale=float(r_l.sum() + r_u.sum()))
    rss = max(rss, 0.0)  # cumulative sums can dip below zero on exact fits
    return SplitFit(float(d[j]), d_hi, beta_l, beta_u, rss,
                    float(np.sqrt(rss / xs.size)), int(xs.size), left_basis, right_basis)


def classical_estimate(x, y, left_basis: str = "constant", right_basis: str = "constant",
                       eps0: float = 0.05) -> SplitFit:
    """One-shot least-squares estimate with the split restricted to [eps0, 1 - eps0]."""
    return fit_free(x, y, Window(eps0, 1.0 - eps0), left_basis, right_basis)
