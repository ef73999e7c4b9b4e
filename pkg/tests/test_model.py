import sys
import textwrap

import numpy as np
import pytest
from scipy import stats

from zoomin.errors import BudgetExhausted, ExternalOracleFailure, ValidationError
from zoomin.estimator import UNIT, Window
from zoomin.model import (ChangePointModel, ExternalOracle, ModelOracle, NoiseSpec, PoolOracle,
                          draw_density_covariates, draw_errors, draw_uniform_covariates,
                          evaluate_mu, stump, test_model)


def test_evaluate_mu_stump_and_boundary():
    m = test_model()
    assert evaluate_mu(m, 0.3) == 0.5
    assert evaluate_mu(m, 0.5) == 0.5
    assert evaluate_mu(m, 0.51) == 1.5


def test_evaluate_mu_linear_segments():
    m = ChangePointModel(0.5, (0.0, 1.0), (2.0, -1.0), "affine", "affine")
    assert evaluate_mu(m, 0.75) == pytest.approx(1.25)
    assert m.gap == pytest.approx(1.0)


def test_model_validation():
    with pytest.raises(ValidationError):
        stump(0.5, 0.5, 0.5)
    with pytest.raises(ValidationError):
        stump(0.5, 1.5, 0.01)
    with pytest.raises(ValidationError):
        NoiseSpec(error_dist="cauchy")


@pytest.mark.parametrize("dist", ["normal", "laplace", "uniform"])
def test_errors_are_standardized(dist):
    e = draw_errors(dist, 200_000, np.random.default_rng(1))
    assert abs(e.mean()) < 0.01
    assert e.std() == pytest.approx(1.0, abs=0.01)


def test_heteroscedastic_noise_scale():
    noise = NoiseSpec(sigma_fn=lambda x: 0.1 + x)
    x = np.full(100_000, 0.4)
    e = noise.draw(x, np.random.default_rng(2))
    assert e.std() == pytest.approx(0.5, rel=0.02)
    assert noise.kind == "heteroscedastic"


def test_model_oracle_noiseless_and_budget():
    o = ModelOracle(test_model(), 2)
    s = o.query(0.7)
    assert (s.x, s.y) == (0.7, 1.5)
    o.query(0.1)
    with pytest.raises(BudgetExhausted):
        o.query(0.2)


def test_model_oracle_tail_bound():
    o = ModelOracle(stump(0.5, 1.5, 0.5, 0.2), 10**6)
    g = np.random.default_rng(3)
    x = g.uniform(size=10**6)
    _, y = o.query_batch(x, g)
    inside = np.abs(y - evaluate_mu(o.model, x)) <= 5 * 0.2
    assert inside.mean() >= 0.9999997 - 1e-6


def test_pool_nearest_and_ties():
    o = PoolOracle([0.1, 0.2, 0.3], [1.0, 2.0, 3.0], 10)
    assert o.query(0.24).x == 0.2
    assert o.query(0.25).x == 0.2
    assert o.query(0.0).x == 0.1
    assert o.query(1.0).x == 0.3


def test_pool_csv(tmp_path):
    p = tmp_path / "pool.csv"
    p.write_text("x,y\n0.5,1\n0.1,2\n")
    o = PoolOracle.from_csv(p, 3)
    assert o.query(0.45).y == 1.0
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n0.5,1\n")
    with pytest.raises(ValidationError):
        PoolOracle.from_csv(bad, 3)


def _script(tmp_path, body):
    p = tmp_path / "oracle.py"
    p.write_text(textwrap.dedent(body))
    return f"{sys.executable} {p}"


def test_external_oracle_roundtrip(tmp_path):
    cmd = _script(tmp_path, """
        import sys
        for line in sys.stdin:
            k = int(line.split()[1])
            xs = [float(sys.stdin.readline()) for _ in range(k)]
            for x in xs:
                print(0.5 if x <= 0.5 else 1.5, flush=True)
    """)
    with ExternalOracle(cmd, 5) as o:
        x, y = o.query_batch([0.2, 0.7, 0.5])
        assert y.tolist() == [0.5, 1.5, 0.5]
        assert o.query(0.9).y == 1.5


def test_external_oracle_garbage(tmp_path):
    cmd = _script(tmp_path, """
        import sys
        sys.stdin.readline()
        print("not-a-number", flush=True)
    """)
    with ExternalOracle(cmd, 5) as o:
        with pytest.raises(ExternalOracleFailure, match="not-a-number"):
            o.query_batch([0.3])


def test_external_oracle_missing_binary():
    with pytest.raises(ExternalOracleFailure):
        ExternalOracle("/nonexistent/oracle-binary", 3)


def test_equispaced_grids():
    assert draw_uniform_covariates(UNIT, 2, mode="equispaced").tolist() == [0.25, 0.75]
    assert draw_uniform_covariates(Window(0.4, 0.6), 1, mode="equispaced") == pytest.approx([0.5])


def test_random_uniform_ks():
    x = draw_uniform_covariates(UNIT, 10_000, np.random.default_rng(4))
    assert stats.kstest(x, "uniform").statistic < 1.36 / 100 * 1.5


def test_uniform_density_matches_uniform_sampler():
    w = Window(0.3, 0.5)
    a = draw_density_covariates(w, 20_000, "uniform", np.random.default_rng(5))
    b = draw_uniform_covariates(w, 20_000, np.random.default_rng(6))
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_triangular_density_shape():
    w = Window(0.4, 0.6)
    x = draw_density_covariates(w, 100_000, "triangular", np.random.default_rng(7))
    # uniform density on the window is 5; triangular peaks at 10
    near = np.abs(x - 0.5) < 0.005
    assert near.mean() / 0.01 == pytest.approx(10.0 * (1 - 0.025), rel=0.05)
    assert abs(x.mean() - 0.5) < 3 * x.std() / np.sqrt(x.size)
