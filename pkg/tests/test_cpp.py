import json
import math

import numpy as np
import pytest
from scipy import stats

from zoomin.cpp import (ArgminPair, CppParams, CppQuantiles, estimate_quantiles,
                        path_argmin_bruteforce, path_value, sample_canonical, scale_argmin,
                        simulate_argmins)
from zoomin.errors import HorizonOverflow, InsufficientReps, ValidationError


def _materialize(params, events, rng):
    out = {}
    for side in (+1, -1):
        gaps = rng.exponential(1 / params.Lambda, events)
        eta = params.rho * rng.standard_normal(events) if params.error_dist != "zero" \
            else np.zeros(events)
        out[side] = (gaps, params.A / 2 + eta if side > 0 else -(-params.A / 2 + eta))
    return out


def _replay(path):
    pos = {+1: 0, -1: 0}

    def source(side, count, size):
        assert count == 1
        g, v = path[side]
        i = pos[side]
        pos[side] = i + size
        return g[None, i:i + size], v[None, i:i + size]

    return source, pos


@pytest.mark.parametrize("A,rho", [(5.0, 1.0), (1.0, 1.0), (2.0, 0.5), (0.5, 1.0)])
def test_streaming_matches_bruteforce(A, rho):
    params = CppParams(A, 1.0, rho)
    g = np.random.default_rng(int(A * 100 + rho * 10))
    for _ in range(25):
        path = _materialize(params, 40_000, g)
        source, pos = _replay(path)
        d_l, d_u = simulate_argmins(params, 1, source=source, block=64)
        used_r, used_l = pos[+1], pos[-1]
        short = path_argmin_bruteforce(path[1][0][:used_r], path[1][1][:used_r],
                                       path[-1][0][:used_l], path[-1][1][:used_l])
        # a 10x longer horizon does not move the argmin
        long = path_argmin_bruteforce(path[1][0][:10 * used_r], path[1][1][:10 * used_r],
                                      path[-1][0][:10 * used_l], path[-1][1][:10 * used_l])
        # blockwise cumulative sums may differ from one long cumsum in the last ulp
        assert (short.d_l, short.d_u) == (long.d_l, long.d_u)
        assert d_l[0] == pytest.approx(short.d_l, rel=1e-12)
        assert d_u[0] == pytest.approx(short.d_u, rel=1e-12)


def test_argmin_is_minimizing_set():
    params = CppParams(3.0)
    path = _materialize(params, 3000, np.random.default_rng(9))
    a = path_argmin_bruteforce(path[1][0], path[1][1], path[-1][0], path[-1][1])
    args = (path[1][0], path[1][1], path[-1][0], path[-1][1])
    low = path_value(*args, s=a.d_l)
    grid = np.linspace(-30, 30, 4001)
    assert min(path_value(*args, s=s) for s in grid) >= low
    assert path_value(*args, s=0.5 * (a.d_l + a.d_u)) == low
    assert path_value(*args, s=a.d_u, left_limit=True) == low


def test_noiseless_closed_form():
    d_l, d_u = simulate_argmins(CppParams(1.0, 1.0, error_dist="zero"), 100_000,
                                rng=np.random.default_rng(1))
    assert stats.kstest(d_u, "expon").pvalue > 0.01
    assert stats.kstest(-d_l, "expon").pvalue > 0.01
    assert np.mean(d_u - d_l) == pytest.approx(2.0, rel=0.02)


def test_large_snr_concentration():
    d_l, d_u = simulate_argmins(CppParams(5.0), 100_000, rng=np.random.default_rng(2))
    assert np.mean((d_l <= 0) & (0 <= d_u)) >= 0.9


def test_scale_argmin():
    assert scale_argmin(ArgminPair(-0.8, 0.4), 1.0) == ArgminPair(-0.8, 0.4)
    assert scale_argmin(ArgminPair(-0.8, 0.4), 2.0) == ArgminPair(-0.4, 0.2)
    with pytest.raises(ValidationError):
        scale_argmin(ArgminPair(-1, 1), 0.0)


def test_scaling_law_rate_two():
    g = np.random.default_rng(3)
    params = CppParams(5.0, 2.0, 1.0)
    d_l, d_u = simulate_argmins(params, 100_000, rng=g)
    c_l, c_u = simulate_argmins(params.canonical(), 100_000, rng=g)
    assert stats.ks_2samp(0.5 * (d_l + d_u), 0.5 * (c_l + c_u) / 2.0).pvalue > 0.01


def test_horizon_overflow():
    with pytest.raises(HorizonOverflow):
        simulate_argmins(CppParams(0.01), 10, rng=np.random.default_rng(0), max_events=128)


def test_params_validation():
    with pytest.raises(ValidationError):
        CppParams(-1.0)
    with pytest.raises(ValidationError):
        CppParams(1.0, 0.0)
    assert CppParams(2.0, 3.0, 0.5).canonical() == CppParams(4.0, 1.0, 1.0)


def test_quantiles_high_snr_limit(tmp_path):
    q = estimate_quantiles(50.0, 100_000, seed=4, cache_dir=tmp_path)
    # with noiseless increments d_av is Laplace with scale 1/2
    assert q.C(0.25) == pytest.approx(math.log(2) / 2, rel=0.10)


def test_quantiles_symmetry_and_ordering(tmp_path):
    q = estimate_quantiles(5.0, 100_000, seed=5, cache_dir=tmp_path)
    sd = q.meta["sd_dav"]
    assert abs(q.dav(0.5)) < 3 * sd / math.sqrt(q.reps) * 10
    for p in (0.025, 0.5, 0.975):
        assert q.dl(p) <= q.dav(p) <= q.du(p)
    assert q.C(0.0005) > q.C(0.025) > 0


def test_quantile_cache_roundtrip(tmp_path):
    a = estimate_quantiles(4.0, 30_000, seed=6, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    b = estimate_quantiles(4.0, 30_000, seed=6, cache_dir=tmp_path)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    c = estimate_quantiles(4.0, 30_000, seed=6, use_cache=False)
    assert np.array_equal(a.q_dav, c.q_dav)
    assert CppQuantiles.from_json(a.to_json()).C(0.01) == a.C(0.01)


def test_sample_canonical_chunk_independent():
    a = sample_canonical(5.0, 3000, 7, chunk=1000)
    b = sample_canonical(5.0, 3000, 7, chunk=1000)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_insufficient_reps():
    with pytest.raises(InsufficientReps):
        estimate_quantiles(5.0, 10_000, use_cache=False)
