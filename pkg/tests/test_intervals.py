import numpy as np
import pytest

from zoomin.cpp import CppQuantiles, estimate_quantiles
from zoomin.design import StagePlan, equal_plan, fixed_k_plan
from zoomin.errors import MissingQuantiles, PlanMismatch, ValidationError
from zoomin.estimator import SplitFit
from zoomin.intervals import (ConfidenceInterval, conservative_ci, exact_ci,
                              finite_sample_ci, finite_sample_half_width, limit_rate,
                              multistage_ci, multistage_half_width)

PROBS = np.array([0.025, 0.5, 0.975])


def _table(lo=(-2.0, -1.0, 1.0), hi=(-1.0, 1.0, 2.0), av=(-1.5, 0.0, 1.5)):
    return CppQuantiles(5.0, "normal", 1000, 0, PROBS, np.array(lo), np.array(hi),
                        np.array(av))


def _fit(d_lo=0.49, d_hi=0.51):
    return SplitFit(d_lo, d_hi, np.array([0.5]), np.array([1.5]), 1.0, 0.2, 100)


def test_limit_rate():
    assert limit_rate(1.0, 0.5, 0.5) == pytest.approx(0.5)
    assert limit_rate(2.0, 0.4, 2 / 3) == pytest.approx((0.4 / 0.6) ** (2 / 3) / 4)
    assert limit_rate(1.0, 0.5, 0.5, h0=0.5) == limit_rate(1.0, 0.5, 0.5)
    with pytest.raises(ValidationError):
        limit_rate(1.0, 1.0, 0.5)


def test_symmetric_exact_interval():
    ci = exact_ci(_fit(), _table(), C=0.5, n2=100, gamma=0.5)
    assert ci.family == "exact" and ci.center == "av"
    assert 0.5 - ci.lo == pytest.approx(ci.hi - 0.5)
    # d - b / (C n^(1+gamma)) with b = 1.5, C n^1.5 = 500
    assert ci.lo == pytest.approx(0.5 - 1.5 / 500)


def test_conservative_shares_envelope_across_centres():
    t = _table()
    lengths = {c: conservative_ci(_fit(), t, 0.5, 100, 0.5, center=c).length
               for c in ("lo", "hi", "av")}
    assert len(set(np.round(list(lengths.values()), 15))) == 1
    assert lengths["av"] > exact_ci(_fit(), t, 0.5, 100, 0.5).length


def test_exponent_override_and_validation():
    a = exact_ci(_fit(), _table(), 0.5, 100, 0.5, exponent=2.5)
    assert a.length == pytest.approx(3.0 / (0.5 * 100 ** 2.5))
    with pytest.raises(ValidationError):
        exact_ci(_fit(), _table(), 0.5, 100, 0.5, tau=1.5)
    with pytest.raises(ValidationError):
        exact_ci(_fit(), _table(), 0.5, 100, 0.5, center="mid")
    with pytest.raises(ValidationError):
        exact_ci(_fit(), _table(), 0.0, 100, 0.5)
    with pytest.raises(MissingQuantiles):
        exact_ci(_fit(), None, 0.5, 100, 0.5)
    with pytest.raises(MissingQuantiles):
        exact_ci(_fit(), _table(), 0.5, 100, 0.5, tau=0.001)


def test_clipping_is_reported_not_applied():
    ci = ConfidenceInterval(-0.01, 0.02, 0.95, "exact", "av", 0.005)
    assert ci.was_clipped and ci.clipped == (0.0, 0.02)
    assert ci.covers(-0.005)
    assert ci.to_json()["clipped"] == [0.0, 0.02]
    with pytest.raises(ValidationError):
        ConfidenceInterval(0.2, 0.1, 0.95, "exact", "av", 0.15)


def test_finite_sample_constants():
    q = estimate_quantiles(5.0, 2_000_000, seed=1)
    plan = StagePlan(snr=5.0, zeta=(0.0005,))
    half = finite_sample_half_width(200, q.C(0.0005), q.C(0.025))
    assert 2 * half == pytest.approx(0.0024, rel=0.05)
    a = finite_sample_ci(0.5, 200, q.C(0.0005), q.C(0.025), 0.05, plan)
    b = finite_sample_ci(0.47, 200, q.C(0.0005), q.C(0.025), 0.05, plan)
    assert a.length == b.length
    with pytest.raises(PlanMismatch):
        finite_sample_ci(0.5, 200, 1, 1, 0.05, fixed_k_plan(1.0, 0.5))
    with pytest.raises(PlanMismatch):
        finite_sample_ci(0.5, 200, 1, 1, 0.05, StagePlan(lam=(0.4, 0.6)))


def test_multistage_half_width():
    c1, c2, n = 3.0, 2.0, 900
    direct = 2 * c1 * c2 / (n ** 2 * (1 / 3) * (1 / 3))
    assert multistage_half_width(3, (1 / 3,) * 3, [c1, c2], n) == pytest.approx(direct)
    assert multistage_half_width(2, (0.5, 0.5), [c1], n) == pytest.approx(c1 / (0.5 * n))
    widths = [multistage_half_width(q, (0.25,) * 4, [3.0] * 3, 2000) for q in (2, 3, 4)]
    assert widths[0] > widths[1] > widths[2]
    ci = multistage_ci(0.5, 3, (1 / 3,) * 3, [c1, c2], n, zeta_last=0.0025)
    assert ci.level == pytest.approx(0.995)
    with pytest.raises(MissingQuantiles):
        multistage_half_width(3, (1 / 3,) * 3, [c1], n)
