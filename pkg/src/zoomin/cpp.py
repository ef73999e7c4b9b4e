"""Two-sided compound Poisson limit process and its argmin quantiles.

The process starts at 0 at the origin.  Moving right, events arrive after
Exp(rate) gaps and each adds ``A/2 + eta``.  Moving left, events arrive the
same way and each adds ``-(-A/2 + eta)``.  The path is flat between events, so
its minimum is attained on whole stretches; ``d_l`` is the left end of the
leftmost minimizing stretch and ``d_u`` the right end of the rightmost one.

Paths are simulated in blocks of events per side and extended until every
side is certified: its current partial sum sits more than a cushion above the
global minimum and it has seen a minimum number of events.  Only running
summaries are kept, so memory stays proportional to the block size.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import HorizonOverflow, InsufficientReps, MissingQuantiles, ValidationError
from .model import ERROR_DISTS, draw_errors

CACHE_VERSION = 1
CUSHION_MULT = 40.0
MIN_EVENTS = 50
BLOCK = 64
MAX_EVENTS = 200_000
CHUNK = 100_000

DEFAULT_PROBS = (
    0.0005, 0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35,
    0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.975, 0.99,
    0.995, 0.9975, 0.999, 0.9995,
)


@dataclass(frozen=True)
class CppParams:
    """Jump size ``A``, event rate ``Lambda`` and increment noise ``rho * eta``.

    ``error_dist="zero"`` selects the degenerate noiseless increments.
    """

    A: float
    Lambda: float = 1.0
    rho: float = 1.0
    error_dist: str = "normal"

    def __post_init__(self):
        if self.A < 0:
            raise ValidationError("A must be >= 0")
        if not self.Lambda > 0:
            raise ValidationError("Lambda must be > 0")
        if self.error_dist != "zero":
            if self.error_dist not in ERROR_DISTS:
                raise ValidationError(f"unknown error_dist {self.error_dist!r}")
            if not self.rho > 0:
                raise ValidationError("rho must be > 0")

    @property
    def snr(self) -> float:
        return math.inf if self.error_dist == "zero" else self.A / self.rho

    @property
    def cushion(self) -> float:
        rho = 0.0 if self.error_dist == "zero" else self.rho
        return CUSHION_MULT * max(rho, self.A / 2)

    def canonical(self) -> "CppParams":
        """Same law up to the 1/Lambda time scaling, with unit noise and rate."""
        if self.error_dist == "zero":
            return CppParams(self.A, 1.0, 1.0, "zero")
        return CppParams(self.A / self.rho, 1.0, 1.0, self.error_dist)


@dataclass(frozen=True)
class ArgminPair:
    d_l: float
    d_u: float

    @property
    def d_av(self) -> float:
        return 0.5 * (self.d_l + self.d_u)


def scale_argmin(canonical: ArgminPair, Lambda: float) -> ArgminPair:
    """Argmins at rate ``Lambda`` from argmins of the rate-1 process."""
    if not Lambda > 0:
        raise ValidationError("Lambda must be > 0")
    return ArgminPair(canonical.d_l / Lambda, canonical.d_u / Lambda)


BlockSource = Callable[[int, int, int], "tuple[np.ndarray, np.ndarray]"]


def rng_block_source(params: CppParams, rng: np.random.Generator) -> BlockSource:
    """Gaps and increments for ``count`` paths, ``size`` events, on ``side``."""
    half = params.A / 2.0

    def source(side: int, count: int, size: int):
        gaps = rng.exponential(1.0 / params.Lambda, (count, size))
        if params.error_dist == "zero":
            eta = np.zeros((count, size))
        else:
            eta = params.rho * draw_errors(params.error_dist, (count, size), rng)
        incr = half + eta if side > 0 else -(-half + eta)
        return gaps, incr

    return source


class _Side:
    """Running summary of one half-line for a batch of paths.

    Stretch k (k >= 0) has value S_k (S_0 = 0) and lies between event k and
    event k + 1 (event 0 is the origin).  We keep the smallest and largest k
    attaining the side minimum, as the time of event k_first and the time of
    event k_last + 1; the latter may be pending until the next block arrives.
    """

    def __init__(self, count: int):
        self.s_end = np.zeros(count)
        self.t_end = np.zeros(count)
        self.m = np.zeros(count)
        self.first_time = np.zeros(count)
        self.last_next = np.full(count, np.nan)
        self.events = np.zeros(count, dtype=np.int64)

    def extend(self, idx: np.ndarray, gaps: np.ndarray, incr: np.ndarray):
        times = self.t_end[idx, None] + np.cumsum(gaps, axis=1)
        sums = self.s_end[idx, None] + np.cumsum(incr, axis=1)
        # resolve pending ends: stretch closes at the first event of this block
        pending = np.isnan(self.last_next[idx])
        self.last_next[idx[pending]] = times[pending, 0]

        bmin = sums.min(axis=1)
        rows = np.arange(idx.size)
        first = np.argmax(sums == bmin[:, None], axis=1)
        last = sums.shape[1] - 1 - np.argmax((sums == bmin[:, None])[:, ::-1], axis=1)
        size = sums.shape[1]
        last_next = np.where(last + 1 < size, times[rows, np.minimum(last + 1, size - 1)], np.nan)

        m = self.m[idx]
        lower = bmin < m
        tie = bmin == m
        new_first = np.where(lower, times[rows, first], self.first_time[idx])
        new_last = np.where(lower | tie, last_next, self.last_next[idx])
        self.first_time[idx] = new_first
        self.last_next[idx] = new_last
        self.m[idx] = np.minimum(m, bmin)
        self.s_end[idx] = sums[:, -1]
        self.t_end[idx] = times[:, -1]
        self.events[idx] += size


def simulate_argmins(params: CppParams, count: int, source: BlockSource | None = None,
                     rng: np.random.Generator | None = None, block: int = BLOCK,
                     max_events: int = MAX_EVENTS) -> tuple[np.ndarray, np.ndarray]:
    """Smallest and largest argmins for ``count`` independent paths.

    Returns arrays ``(d_l, d_u)``.  ``source`` overrides the random event
    generator (used by tests to replay fixed paths).
    """
    if source is None:
        if rng is None:
            raise ValidationError("need an rng or a block source")
        source = rng_block_source(params, rng)
    right, left = _Side(count), _Side(count)
    cushion = params.cushion
    todo_r = np.arange(count)
    todo_l = np.arange(count)
    while todo_r.size or todo_l.size:
        if todo_r.size:
            g, v = source(+1, todo_r.size, block)
            right.extend(todo_r, g, v)
        if todo_l.size:
            g, v = source(-1, todo_l.size, block)
            left.extend(todo_l, g, v)
        gmin = np.minimum(right.m, left.m)
        ok_r = (right.s_end > gmin + cushion) & (right.events >= MIN_EVENTS)
        ok_l = (left.s_end > gmin + cushion) & (left.events >= MIN_EVENTS)
        todo_r = np.flatnonzero(~ok_r)
        todo_l = np.flatnonzero(~ok_l)
        worst = max(right.events.max(initial=0), left.events.max(initial=0))
        if (todo_r.size or todo_l.size) and worst >= max_events:
            raise HorizonOverflow(
                f"{todo_r.size + todo_l.size} path sides not certified after {worst} events "
                f"(A={params.A}, rho={params.rho}, dist={params.error_dist})")
    gmin = np.minimum(right.m, left.m)
    # leftmost stretch: on the left side if it attains the global min
    d_l = np.where(left.m == gmin, -left.last_next, right.first_time)
    d_u = np.where(right.m == gmin, right.last_next, -left.first_time)
    return d_l, d_u


def simulate_path_argmin(params: CppParams, rng: np.random.Generator) -> ArgminPair:
    d_l, d_u = simulate_argmins(params, 1, rng=rng)
    return ArgminPair(float(d_l[0]), float(d_u[0]))


def path_argmin_bruteforce(right_gaps, right_incr, left_gaps, left_incr) -> ArgminPair:
    """Argmins of one fully materialized path by explicit enumeration.

    Stretch values and endpoints are listed for both sides and scanned
    directly; the final event on each side is assumed not to be minimizing.
    """
    t_r = np.concatenate([[0.0], np.cumsum(right_gaps)])
    s_r = np.concatenate([[0.0], np.cumsum(right_incr)])
    t_l = np.concatenate([[0.0], np.cumsum(left_gaps)])
    s_l = np.concatenate([[0.0], np.cumsum(left_incr)])
    stretches = []  # (value, start, end)
    for k in range(len(s_l) - 1):
        stretches.append((s_l[k], -t_l[k + 1], -t_l[k]))
    for k in range(len(s_r) - 1):
        stretches.append((s_r[k], t_r[k], t_r[k + 1]))
    low = min(v for v, _, _ in stretches)
    lows = [(a, b) for v, a, b in stretches if v == low]
    return ArgminPair(min(a for a, _ in lows), max(b for _, b in lows))


def path_value(right_gaps, right_incr, left_gaps, left_incr, s: float, left_limit=False) -> float:
    """M(s) (or M(s-)) for a materialized path."""
    t_r = np.cumsum(right_gaps)
    t_l = np.cumsum(left_gaps)
    if s > 0 or (s == 0 and not left_limit):
        k = np.searchsorted(t_r, s, side="left" if left_limit else "right")
        return float(np.sum(right_incr[:k]))
    # on the left the stretch [-t_l[k], -t_l[k-1]) has value sum(left_incr[:k])
    k = np.searchsorted(t_l, -s, side="right" if left_limit else "left")
    return float(np.sum(left_incr[:k]))


# ---------------------------------------------------------------- quantiles


def _type1(sorted_x: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Inverse empirical cdf: x_(ceil(n p))."""
    n = sorted_x.size
    k = np.clip(np.ceil(n * probs).astype(np.int64), 1, n)
    return sorted_x[k - 1]


@dataclass
class CppQuantiles:
    """Quantile tables of the canonical (rate 1, unit noise) argmins."""

    snr: float
    error_dist: str
    reps: int
    seed: int
    probs: np.ndarray
    q_dl: np.ndarray
    q_du: np.ndarray
    q_dav: np.ndarray
    meta: dict = field(default_factory=dict)

    def _lookup(self, table: np.ndarray, p: float) -> float:
        hit = np.flatnonzero(np.isclose(self.probs, p, rtol=0, atol=1e-12))
        if hit.size:
            return float(table[hit[0]])
        if not self.probs[0] <= p <= self.probs[-1]:
            raise MissingQuantiles(f"probability {p} outside tabulated range")
        return float(np.interp(p, self.probs, table))

    def dl(self, p: float) -> float:
        return self._lookup(self.q_dl, p)

    def du(self, p: float) -> float:
        return self._lookup(self.q_du, p)

    def dav(self, p: float) -> float:
        return self._lookup(self.q_dav, p)

    def quantile(self, stat: str, p: float) -> float:
        return {"l": self.dl, "lo": self.dl, "u": self.du, "hi": self.du,
                "av": self.dav}[stat](p)

    def C(self, zeta: float) -> float:
        """Upper-``zeta`` quantile of the canonical average argmin."""
        return self.dav(1.0 - zeta)

    def to_json(self) -> dict:
        return {
            "version": CACHE_VERSION, "snr": self.snr, "error_dist": self.error_dist,
            "reps": self.reps, "seed": self.seed, "prob_grid": self.probs.tolist(),
            "q_dl": self.q_dl.tolist(), "q_du": self.q_du.tolist(),
            "q_dav": self.q_dav.tolist(), "meta": self.meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CppQuantiles":
        return cls(float(data["snr"]), data["error_dist"], int(data["reps"]), int(data["seed"]),
                   np.asarray(data["prob_grid"], float), np.asarray(data["q_dl"], float),
                   np.asarray(data["q_du"], float), np.asarray(data["q_dav"], float),
                   data.get("meta", {}))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "CppQuantiles":
        data = json.loads(Path(path).read_text())
        if data.get("version") != CACHE_VERSION:
            raise MissingQuantiles(f"{path}: cache version {data.get('version')} is stale")
        return cls.from_json(data)


def default_cache_dir() -> Path:
    env = os.environ.get("ZOOMIN_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "zoomin"


def _cache_path(cache_dir, snr, error_dist, reps, seed, probs) -> Path:
    key = json.dumps([CACHE_VERSION, repr(float(snr)), error_dist, reps, seed,
                      [repr(float(p)) for p in probs]])
    digest = hashlib.sha1(key.encode()).hexdigest()[:16]
    return Path(cache_dir) / f"cpp_snr{snr:g}_{error_dist}_{reps}_{seed}_{digest}.json"


def sample_canonical(snr: float, reps: int, seed: int, error_dist: str = "normal",
                     chunk: int = CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """``reps`` canonical argmin pairs, reproducible from ``seed``.

    Work is split into chunks with independent child streams, so the result
    does not depend on how chunks are scheduled.
    """
    params = CppParams(snr, 1.0, 1.0, error_dist)
    n_chunks = -(-reps // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    d_l = np.empty(reps)
    d_u = np.empty(reps)
    for i, ss in enumerate(children):
        lo, hi = i * chunk, min(reps, (i + 1) * chunk)
        rng = np.random.Generator(np.random.Philox(ss))
        d_l[lo:hi], d_u[lo:hi] = simulate_argmins(params, hi - lo, rng=rng)
    return d_l, d_u


def estimate_quantiles(snr: float, reps: int, seed: int = 0, error_dist: str = "normal",
                       probs=None, cache_dir=None, use_cache: bool = True) -> CppQuantiles:
    """Monte Carlo quantile tables of the canonical argmins, cached as JSON."""
    probs = np.unique(np.asarray(DEFAULT_PROBS if probs is None else probs, dtype=float))
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValidationError("probabilities must lie in (0, 1)")
    tail = float(np.minimum(probs, 1 - probs).min())
    if reps < 10.0 / tail:
        raise InsufficientReps(
            f"reps={reps} gives fewer than 10 expected exceedances at tail {tail:g}; "
            f"need >= {math.ceil(10.0 / tail - 1e-6)}")
    path = None
    if use_cache:
        path = _cache_path(cache_dir or default_cache_dir(), snr, error_dist, reps, seed, probs)
        if path.exists():
            try:
                return CppQuantiles.load(path)
            except (MissingQuantiles, ValueError, KeyError):
                pass
    d_l, d_u = sample_canonical(snr, reps, seed, error_dist)
    d_av = 0.5 * (d_l + d_u)
    q = CppQuantiles(float(snr), error_dist, int(reps), int(seed), probs,
                     _type1(np.sort(d_l), probs), _type1(np.sort(d_u), probs),
                     _type1(np.sort(d_av), probs),
                     meta={"mean_dav": float(d_av.mean()), "sd_dav": float(d_av.std())})
    if path is not None:
        q.save(path)
    return q
