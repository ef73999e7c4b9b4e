"""Regression models with one jump, noise laws, and sampling oracles.

Every response in a run is obtained through an :class:`Oracle`, which charges
one unit of budget per covariate.  Three flavours exist: a simulated model, a
finite pool of pre-recorded pairs (nearest covariate wins), and an external
executable speaking a line protocol.
"""
from __future__ import annotations

import csv
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import basis as _basis
from .errors import BudgetExhausted, DegenerateWindow, ExternalOracleFailure, ValidationError
from .estimator import Window

# unit-variance, symmetric, finite-mgf error laws
ERROR_DISTS = ("normal", "laplace", "uniform")


def draw_errors(dist: str, size, rng: np.random.Generator) -> np.ndarray:
    """Standardized (mean 0, variance 1) symmetric errors."""
    if dist == "normal":
        return rng.standard_normal(size)
    if dist == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), size)
    if dist == "uniform":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size)
    raise ValidationError(f"unknown error_dist {dist!r}; expected one of {ERROR_DISTS}")


@dataclass(frozen=True)
class NoiseSpec:
    """Homoscedastic ``sigma`` or heteroscedastic ``sigma_fn(x)`` noise."""

    sigma: float = 1.0
    sigma_fn: Callable[[np.ndarray], np.ndarray] | None = None
    error_dist: str = "normal"

    def __post_init__(self):
        if self.error_dist not in ERROR_DISTS:
            raise ValidationError(f"unknown error_dist {self.error_dist!r}")
        if self.sigma_fn is None and self.sigma < 0:
            raise ValidationError("sigma must be non-negative")

    @property
    def kind(self) -> str:
        return "homoscedastic" if self.sigma_fn is None else "heteroscedastic"

    def scale(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.sigma_fn is None:
            return np.full(x.shape, float(self.sigma))
        return np.asarray(self.sigma_fn(x), dtype=float)

    def draw(self, x, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = self.scale(x)
        if not np.any(s):
            return np.zeros(x.shape)
        return s * draw_errors(self.error_dist, x.shape, rng)


@dataclass(frozen=True)
class ChangePointModel:
    d0: float
    beta_l: tuple[float, ...]
    beta_u: tuple[float, ...]
    left_basis: str = "constant"
    right_basis: str = "constant"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    eps0: float = 0.05

    def __post_init__(self):
        _basis.check_basis(self.left_basis)
        _basis.check_basis(self.right_basis)
        object.__setattr__(self, "beta_l", tuple(float(b) for b in np.ravel(self.beta_l)))
        object.__setattr__(self, "beta_u", tuple(float(b) for b in np.ravel(self.beta_u)))
        if not 0 < self.eps0 < 0.5:
            raise ValidationError("eps0 must lie in (0, 1/2)")
        if not self.eps0 <= self.d0 <= 1 - self.eps0:
            raise ValidationError(f"d0={self.d0} outside [{self.eps0}, {1 - self.eps0}]")
        if self.gap == 0:
            raise ValidationError("the two segments must differ at d0")

    @property
    def gap(self) -> float:
        """|left(d0) - right(d0)|, the jump size."""
        left = _basis.evaluate(self.left_basis, self.beta_l, [self.d0])[0]
        right = _basis.evaluate(self.right_basis, self.beta_u, [self.d0])[0]
        return float(abs(left - right))

    @property
    def snr(self) -> float:
        return self.gap / float(self.noise.scale([self.d0])[0])

    def mu(self, x) -> np.ndarray:
        return evaluate_mu(self, x)


def evaluate_mu(model: ChangePointModel, x):
    """Regression function; the left segment owns x == d0."""
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    left = _basis.evaluate(model.left_basis, model.beta_l, x)
    right = _basis.evaluate(model.right_basis, model.beta_u, x)
    out = np.where(x <= model.d0, left, right)
    return float(out[0]) if scalar else out


def stump(alpha: float, beta: float, d0: float, sigma: float = 0.0, **kw) -> ChangePointModel:
    return ChangePointModel(d0, (alpha,), (beta,), noise=NoiseSpec(sigma=sigma, **kw))


def test_model(snr: float | None = None) -> ChangePointModel:
    """Stump with levels 0.5 / 1.5 and jump at 0.5; noise set from ``snr``."""
    sigma = 0.0 if snr is None else 1.0 / snr
    return stump(0.5, 1.5, 0.5, sigma)


test_model.__test__ = False  # keep pytest from collecting it


@dataclass(frozen=True)
class Sample:
    x: float
    y: float

    def __post_init__(self):
        if not 0.0 <= self.x <= 1.0:
            raise ValidationError(f"covariate {self.x} outside [0, 1]")


class Oracle:
    """Budgeted response source.  Subclasses implement ``_respond``."""

    kind = "abstract"

    def __init__(self, budget_total: int):
        if budget_total < 1:
            raise ValidationError("budget_total must be a positive integer")
        self.budget_total = int(budget_total)
        self.budget_used = 0

    @property
    def remaining(self) -> int:
        return self.budget_total - self.budget_used

    def query(self, x: float, rng: np.random.Generator | None = None) -> Sample:
        xs, ys = self.query_batch([x], rng)
        return Sample(float(xs[0]), float(ys[0]))

    def query_batch(self, xs, rng: np.random.Generator | None = None):
        xs = np.asarray(xs, dtype=float).reshape(-1)
        if xs.size > self.remaining:
            raise BudgetExhausted(
                f"requested {xs.size} responses with {self.remaining} of "
                f"{self.budget_total} left")
        if np.any((xs < 0) | (xs > 1)):
            raise ValidationError("covariates must lie in [0, 1]")
        out_x, out_y = self._respond(xs, rng)
        self.budget_used += xs.size
        return out_x, out_y

    def _respond(self, xs, rng):
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ModelOracle(Oracle):
    kind = "model"

    def __init__(self, model: ChangePointModel, budget_total: int):
        super().__init__(budget_total)
        self.model = model

    def _respond(self, xs, rng):
        mu = evaluate_mu(self.model, xs)
        if rng is None:
            if np.any(self.model.noise.scale(xs)):
                raise ValidationError("a noisy model oracle needs an rng")
            return xs, mu
        return xs, mu + self.model.noise.draw(xs, rng)


class PoolOracle(Oracle):
    """Answers with the stored pair whose covariate is nearest the request.

    Ties go to the smaller covariate.  The same pair may be returned any
    number of times.
    """

    kind = "pool"

    def __init__(self, x, y, budget_total: int):
        super().__init__(budget_total)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.size == 0 or x.size != y.size:
            raise ValidationError("pool needs matching, non-empty x and y")
        if np.any((x < 0) | (x > 1)):
            raise ValidationError("pool covariates must lie in [0, 1]")
        order = np.argsort(x, kind="stable")
        self.x, self.y = x[order], y[order]

    @classmethod
    def from_csv(cls, path, budget_total: int) -> "PoolOracle":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["x", "y"]:
                raise ValidationError(f"{path}: expected header 'x,y'")
            rows = [(float(r["x"]), float(r["y"])) for r in reader]
        if not rows:
            raise ValidationError(f"{path}: no rows")
        x, y = zip(*rows)
        return cls(x, y, budget_total)

    def nearest(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        right = np.clip(np.searchsorted(self.x, xs, side="left"), 0, self.x.size - 1)
        left = np.clip(right - 1, 0, self.x.size - 1)
        take_left = np.abs(xs - self.x[left]) <= np.abs(self.x[right] - xs)
        return np.where(take_left, left, right)

    def _respond(self, xs, rng):
        idx = self.nearest(xs)
        return self.x[idx], self.y[idx]


class ExternalOracle(Oracle):
    """Child process answering covariate batches over stdin/stdout.

    Per batch the parent writes ``BATCH <k>`` followed by ``k`` covariate
    lines and flushes; the child must answer with ``k`` lines, each a single
    decimal response.
    """

    kind = "external"

    def __init__(self, command: str | list[str], budget_total: int, timeout: float | None = None):
        super().__init__(budget_total)
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.command = argv
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise ExternalOracleFailure(f"cannot start {argv!r}: {exc}") from exc

    def _respond(self, xs, rng):
        proc = self._proc
        try:
            proc.stdin.write(f"BATCH {xs.size}\n")
            proc.stdin.writelines(f"{x!r}\n" for x in xs.tolist())
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExternalOracleFailure(f"oracle process closed its input: {exc}") from exc
        ys = np.empty(xs.size)
        for i in range(xs.size):
            line = proc.stdout.readline()
            if not line:
                raise ExternalOracleFailure(
                    f"oracle process ended after {i} of {xs.size} responses")
            try:
                ys[i] = float(line.strip())
            except ValueError:
                raise ExternalOracleFailure(f"malformed oracle response: {line.rstrip()!r}") from None
            if not math.isfinite(ys[i]):
                raise ExternalOracleFailure(f"non-finite oracle response: {line.rstrip()!r}")
        return xs, ys

    def close(self):
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=self.timeout or 5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()


def draw_uniform_covariates(window: Window, count: int, rng: np.random.Generator | None = None,
                            mode: str = "random") -> np.ndarray:
    """``count`` covariates in the window, i.i.d. uniform or a midpoint grid."""
    if window.hi <= window.lo:
        raise DegenerateWindow("empty window")
    if count < 1:
        raise ValidationError("count must be >= 1")
    if mode == "equispaced":
        i = np.arange(1, count + 1)
        return window.lo + (2 * i - 1) * (window.hi - window.lo) / (2 * count)
    if mode != "random":
        raise ValidationError(f"unknown design mode {mode!r}")
    return rng.uniform(window.lo, window.hi, count)


def _triangular(t):
    return np.clip(1.0 - np.abs(t), 0.0, None)


def _epanechnikov(t):
    return np.clip(0.75 * (1.0 - t * t), 0.0, None)


def _uniform_h(t):
    return np.where(np.abs(t) <= 1, 0.5, 0.0)


KERNELS: dict[str, Callable] = {
    "uniform": _uniform_h,
    "triangular": _triangular,
    "epanechnikov": _epanechnikov,
}


def resolve_density(h) -> Callable:
    if callable(h):
        return h
    try:
        return KERNELS[h]
    except KeyError:
        raise ValidationError(f"unknown sampling density {h!r}; expected one of {list(KERNELS)}") from None


class TabulatedDensity:
    """Inverse-CDF sampler for a symmetric density ``h`` on [-1, 1]."""

    def __init__(self, h, grid_size: int = 4097):
        self.h = resolve_density(h)
        t = np.linspace(-1.0, 1.0, grid_size)
        pdf = np.asarray(self.h(t), dtype=float)
        if np.any(pdf < 0):
            raise ValidationError("density must be non-negative")
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(t))])
        total = cdf[-1]
        if not abs(total - 1.0) < 1e-3:
            raise ValidationError(f"density integrates to {total:.6f}, not 1")
        if not np.allclose(pdf, pdf[::-1], atol=1e-9):
            raise ValidationError("density must be symmetric about 0")
        self.t, self.cdf = t, cdf / total

    @property
    def at_zero(self) -> float:
        return float(self.h(np.array([0.0]))[0])

    def sample(self, u: np.ndarray) -> np.ndarray:
        # strictly increasing cdf points only, so the inverse is well defined
        keep = np.concatenate([[True], np.diff(self.cdf) > 0])
        return np.interp(u, self.cdf[keep], self.t[keep])


def draw_density_covariates(window: Window, count: int, h, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws from ``h`` rescaled from [-1, 1] onto the window."""
    if window.hi <= window.lo:
        raise DegenerateWindow("empty window")
    if count < 1:
        raise ValidationError("count must be >= 1")
    dens = h if isinstance(h, TabulatedDensity) else TabulatedDensity(h)
    t = dens.sample(rng.uniform(0.0, 1.0, count))
    mid, half = 0.5 * (window.lo + window.hi), 0.5 * (window.hi - window.lo)
    return np.clip(mid + half * t, window.lo, window.hi)
