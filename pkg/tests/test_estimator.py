import numpy as np
import pytest

from oracles import brute_fixed, brute_free
from zoomin.errors import AllCandidatesSkipped, DegenerateWindow, EmptySampleSet, ValidationError
from zoomin.estimator import UNIT, Window, classical_estimate, fit_fixed, fit_free
from zoomin.model import ModelOracle, draw_uniform_covariates, stump, test_model


def test_window_validation_and_clip():
    w = Window.clipped(-0.1, 0.15)
    assert (w.lo, w.hi) == (0.0, 0.15)
    assert w.nominal_width == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        Window(0.6, 0.4)
    with pytest.raises(DegenerateWindow):
        Window.clipped(1.2, 1.5)


def test_fit_free_separable_stump():
    x = [0.2, 0.4, 0.6, 0.8]
    y = [0.5, 0.5, 1.5, 1.5]
    f = fit_free(x, y, UNIT)
    assert (f.d_lo, f.d_hi) == (0.4, 0.6)
    assert f.beta_l[0] == pytest.approx(0.5)
    assert f.beta_u[0] == pytest.approx(1.5)
    assert f.rss == pytest.approx(0.0, abs=1e-12)


def test_fit_free_window_excluding_jump_hits_boundary():
    x = np.linspace(0.05, 0.95, 19)
    y = np.where(x <= 0.5, 0.5, 1.5)
    f = fit_free(x, y, Window(0.7, 0.9))
    # all splits keep the jump on the left side; the minimum sits at the window's left edge
    assert f.d_lo == 0.7
    assert f.rss > 0


def test_fit_free_matches_bruteforce_noisy():
    g = np.random.Generator(np.random.Philox(3))
    model = stump(0.5, 1.5, 0.5, 0.2)
    x, y = ModelOracle(model, 50).query_batch(draw_uniform_covariates(UNIT, 50, g), g)
    f = fit_free(x, y, UNIT)
    d_lo, d_hi, rss = brute_free(x, y, UNIT)
    assert (f.d_lo, f.d_hi) == (d_lo, d_hi)
    assert f.rss == pytest.approx(rss, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("left,right", [("affine", "affine"), ("constant", "affine"),
                                        ("affine", "constant")])
def test_fit_free_affine_matches_bruteforce(left, right):
    g = np.random.Generator(np.random.Philox(11))
    x = g.uniform(size=40)
    y = np.where(x <= 0.6, 1 + x, 3 - 2 * x) + 0.1 * g.standard_normal(40)
    f = fit_free(x, y, Window(0.1, 0.9), left, right)
    d_lo, d_hi, rss = brute_free(x, y, Window(0.1, 0.9), left, right)
    assert (f.d_lo, f.d_hi) == (d_lo, d_hi)
    assert f.rss == pytest.approx(rss, rel=1e-9, abs=1e-12)


def test_fit_free_skips_underdetermined_sides():
    # two distinct covariates per affine side leaves a single admissible split
    f = fit_free([0.1, 0.2, 0.3, 0.4], [0.0, 0.1, 1.0, 1.3], UNIT, "affine", "affine")
    assert (f.d_lo, f.d_hi) == (0.2, 0.3)
    with pytest.raises(AllCandidatesSkipped):
        fit_free([0.1, 0.2, 0.3], [0, 0, 1], UNIT, "affine", "affine")


def test_fit_fixed_single_straddle():
    f = fit_fixed([0.45, 0.55], [0.5, 1.5], Window(0.4, 0.6), [0.5], [1.5])
    assert (f.d_lo, f.d_hi) == (0.45, 0.55)
    assert f.d_av == pytest.approx(0.5)


def test_fit_fixed_swapped_levels_lands_on_edge():
    f = fit_fixed([0.45, 0.55], [0.5, 1.5], Window(0.4, 0.6), [1.5], [0.5])
    # minimizers: [0.4, 0.45) and [0.55, 0.6]
    assert f.d_lo == 0.4
    assert f.d_hi == 0.6


def test_fit_fixed_matches_bruteforce():
    g = np.random.Generator(np.random.Philox(5))
    model = stump(0.5, 1.5, 0.5, 0.2)
    w = Window(0.4, 0.6)
    x, y = ModelOracle(model, 100).query_batch(draw_uniform_covariates(w, 100, g), g)
    f = fit_fixed(x, y, w, [0.52], [1.49])
    d_lo, d_hi, rss = brute_fixed(x, y, w, [0.52], [1.49])
    assert (f.d_lo, f.d_hi) == (d_lo, d_hi)
    assert f.rss == pytest.approx(rss, rel=1e-9, abs=1e-12)


def test_fit_fixed_empty():
    with pytest.raises(EmptySampleSet):
        fit_fixed([], [], Window(0.4, 0.6), [0.5], [1.5])


def test_classical_noiseless_grid():
    x = np.linspace(0.1, 1.0, 10)
    y = test_model().mu(x)
    f = classical_estimate(x, y)
    assert f.d_lo == pytest.approx(0.5)
    assert f.gap() == pytest.approx(1.0)
    assert f.d_lo <= f.d_hi


def test_classical_rate_is_order_one_over_n():
    model = test_model(5.0)
    sds = {}
    for n in (250, 1000):
        est = []
        for r in range(300):
            g = np.random.Generator(np.random.Philox(np.random.SeedSequence([n, r])))
            x, y = ModelOracle(model, n).query_batch(draw_uniform_covariates(UNIT, n, g), g)
            f = classical_estimate(x, y)
            assert f.d_lo <= f.d_hi
            est.append(n * (f.d_av - 0.5))
        sds[n] = np.std(est)
    assert 0.7 < sds[1000] / sds[250] < 1.4
