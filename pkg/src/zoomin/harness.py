"""Replicated Monte Carlo studies: coverage tables, ARE curves, allocation sweeps.

Every replicate draws from its own Philox stream keyed by
``(seed, cell, arm, replicate)``, so results do not depend on scheduling and
a rerun with the same configuration is bit-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable

import numpy as np

from .cpp import CppQuantiles, estimate_quantiles
from .design import StagePlan, fixed_k_plan, run_experiment
from .errors import StageUnderflow, ValidationError
from .estimator import Window, classical_estimate
from .intervals import (conservative_ci, exact_ci, finite_sample_ci, limit_rate)
from .model import ModelOracle, draw_uniform_covariates, stump

STUDIES = ("coverage", "are", "allocation")
MEASURES = ("sd", "MAD", "IQR")


@dataclass(frozen=True)
class McConfig:
    study: str = "coverage"
    snrs: tuple[float, ...] = (5.0,)
    budgets: tuple[int, ...] = (200,)
    replicates: int = 2000
    seed: int = 20090801
    # coverage with user window constants (K given) or with the window calculus
    Ks: tuple[float, ...] | None = None
    gammas: tuple[float, ...] = (0.5,)
    families: tuple[str, ...] = ("exact",)
    centers: tuple[str, ...] = ("lo", "hi", "av")
    tau: float = 0.05
    P: int = 2
    zeta: tuple[float, ...] = (0.0005,)
    lam1_grid: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    first_stage_design: str = "random"
    second_stage_density: str = "uniform"
    trim: int = 0
    measures: tuple[str, ...] = MEASURES
    f_x: float = 1.0
    d0: float = 0.5
    cpp_reps: int = 2_000_000
    cpp_seed: int = 1
    # "stage" scales fixed-K intervals by n2^(1+gamma); "total" by n^(1+gamma)
    normalization: str = "stage"
    threads: int = 1

    def __post_init__(self):
        for name in ("snrs", "budgets", "Ks", "gammas", "families", "centers", "zeta",
                     "lam1_grid", "measures"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))
        if self.study not in STUDIES:
            raise ValidationError(f"study must be one of {STUDIES}")
        if not self.snrs or not self.budgets:
            raise ValidationError("empty grid: need at least one snr and one budget")
        if self.replicates < 100:
            raise ValidationError("replicates must be >= 100")
        if not 0 <= self.trim < self.replicates / 10:
            raise ValidationError("trim must be below replicates / 10")
        if any(m not in MEASURES for m in self.measures):
            raise ValidationError(f"measures must come from {MEASURES}")
        if self.normalization not in ("stage", "total"):
            raise ValidationError("normalization must be 'stage' or 'total'")
        if len(self.zeta) != self.P - 1:
            raise ValidationError(f"need {self.P - 1} zeta values for P={self.P}")
        if self.study == "coverage" and self.Ks is not None and self.P != 2:
            raise ValidationError("fixed-K coverage studies are two-stage only")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "McConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown config fields: {sorted(extra)}")
        return cls(**data)


@dataclass
class McReport:
    study: str
    columns: list[str]
    rows: list[dict]
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"study": self.study, "columns": self.columns, "rows": self.rows,
                "config": self.config}

    def plot_csv(self) -> str:
        """Long-format ARE curve data: n, snr, measure, empirical, theoretical."""
        if self.study != "are":
            raise ValidationError("plot data exists for ARE studies only")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "snr", "measure", "empirical", "theoretical"])
        for r in self.rows:
            w.writerow([_fmt(r["n"]), _fmt(r["snr"]), r["measure"], _fmt(r["are_trimmed"]),
                        _fmt(r["are_theory"])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, study: str) -> "McReport":
        reader = csv.reader(io.StringIO(text))
        columns = next(reader)
        rows = [{c: _parse(v) for c, v in zip(columns, line)} for line in reader]
        return cls(study, columns, rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


# ---------------------------------------------------------------- replicates


def _rep_seed(seed: int, cell: int, arm: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, cell, arm, rep])


def _two_stage_job(args):
    """One multistage replicate; returns (estimates, n_stages, missed) plus CI data."""
    snr, n, d0, plan, seedseq, c_values = args
    model = stump(0.5, 1.5, d0, 1.0 / snr)
    table = _CTable(c_values)
    res = run_experiment(ModelOracle(model, n), plan, seedseq, n=n, quantiles=table, d0=d0)
    f = res.final
    return (f.d_lo, f.d_hi, f.d_av, res.stages[0].n, res.stages[-1].n, res.any_missed)


def _one_stage_job(args):
    snr, n, d0, eps0, seedseq = args
    model = stump(0.5, 1.5, d0, 1.0 / snr)
    rng = np.random.Generator(np.random.Philox(seedseq))
    oracle = ModelOracle(model, n)
    x, y = oracle.query_batch(draw_uniform_covariates(Window(0.0, 1.0), n, rng), rng)
    return classical_estimate(x, y, eps0=eps0).d_av


class _CTable:
    """Picklable stand-in exposing only ``C(zeta)`` for the window calculus."""

    def __init__(self, values: dict):
        self.values = values

    def C(self, zeta: float) -> float:
        return self.values[zeta]


def _map(fn, jobs: list, threads: int) -> list:
    if threads <= 1 or len(jobs) < 64:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (8 * threads))))


class QuantileBank:
    """Canonical quantile tables per SNR, built on demand and cached on disk."""

    def __init__(self, reps: int, seed: int, cache_dir=None):
        self.reps, self.seed, self.cache_dir = reps, seed, cache_dir
        self._tables: dict[float, CppQuantiles] = {}

    def __call__(self, snr: float) -> CppQuantiles:
        if snr not in self._tables:
            self._tables[snr] = estimate_quantiles(snr, self.reps, self.seed,
                                                   cache_dir=self.cache_dir)
        return self._tables[snr]


def dispersion(values: np.ndarray, d0: float, measure: str) -> float:
    v = np.asarray(values, dtype=float)
    if measure == "sd":
        return float(np.std(v, ddof=1))
    if measure == "MAD":
        return float(np.mean(np.abs(v - d0)))
    if measure == "IQR":
        q1, q3 = np.percentile(v, [25, 75])
        return float(q3 - q1)
    raise ValidationError(f"unknown measure {measure!r}")


def trim_extremes(values, k: int) -> np.ndarray:
    """Drop the ``k`` smallest and ``k`` largest values."""
    v = np.sort(np.asarray(values, dtype=float))
    return v[k: v.size - k] if k > 0 else v


def theoretical_are(n: int, P: int, c_values, f_x: float = 1.0) -> float:
    """One-stage over P-stage dispersion ratio at equal allocation."""
    return n ** (P - 1) / (2 ** (P - 1) * P ** P * f_x * math.prod(c_values))


def _calculus_plan(cfg: McConfig, snr: float, lam=None) -> StagePlan:
    gamma = tuple(1.0 / (q + 1) for q in range(1, cfg.P))
    return StagePlan(P=cfg.P, lam=lam, gamma=gamma, zeta=cfg.zeta, snr=snr,
                     first_stage_design=cfg.first_stage_design,
                     second_stage_density=cfg.second_stage_density)


def _run_multistage(cfg: McConfig, snr: float, n: int, plan: StagePlan, cell: int,
                    table: CppQuantiles | None) -> np.ndarray:
    c_values = {} if table is None else {z: table.C(z) for z in plan.zeta}
    jobs = [(snr, n, cfg.d0, plan, _rep_seed(cfg.seed, cell, 1, r), c_values)
            for r in range(cfg.replicates)]
    return np.array(_map(_two_stage_job, jobs, cfg.threads), dtype=float)


# ---------------------------------------------------------------- studies


COVERAGE_COLUMNS = ["n", "snr", "gamma", "K", "zeta1", "family", "center", "replicates",
                    "coverage", "mean_length", "miss_rate"]


def run_coverage_study(cfg: McConfig, bank: QuantileBank | None = None) -> McReport:
    """Coverage and mean length of the configured interval families per cell."""
    if cfg.study != "coverage":
        cfg = replace(cfg, study="coverage")
    bank = bank or QuantileBank(cfg.cpp_reps, cfg.cpp_seed)
    rows = []
    cell = 0
    for snr in cfg.snrs:
        table = bank(snr)
        if cfg.Ks is None:
            c_tau = table.C(cfg.tau / 2)
            for n in cfg.budgets:
                plan = _calculus_plan(cfg, snr, lam=(0.5, 0.5))
                out = _run_multistage(cfg, snr, n, plan, cell, table)
                cell += 1
                covered, lengths = [], []
                for r in out:
                    ci = finite_sample_ci(r[2], n, table.C(cfg.zeta[0]), c_tau, cfg.tau, plan)
                    covered.append(ci.covers(cfg.d0))
                    lengths.append(ci.length)
                rows.append({"n": n, "snr": snr, "gamma": None, "K": None,
                             "zeta1": cfg.zeta[0], "family": "finite-sample", "center": "av",
                             "replicates": cfg.replicates, "coverage": float(np.mean(covered)),
                             "mean_length": float(np.mean(lengths)),
                             "miss_rate": float(out[:, 5].mean())})
            continue
        for gamma in cfg.gammas:
            for K in cfg.Ks:
                for n in cfg.budgets:
                    plan = fixed_k_plan(K, gamma, snr=snr,
                                        first_stage_design=cfg.first_stage_design,
                                        second_stage_density=cfg.second_stage_density)
                    out = _run_multistage(cfg, snr, n, plan, cell, None)
                    cell += 1
                    n1, n2 = int(out[0, 3]), int(out[0, 4])
                    C = limit_rate(K, n1 / n, gamma)
                    n_norm = n2 if cfg.normalization == "stage" else n
                    for family in cfg.families:
                        build = {"exact": exact_ci, "conservative": conservative_ci}[family]
                        for center in cfg.centers:
                            covered, lengths = [], []
                            for r in out:
                                fit = _FitView(r[0], r[1])
                                ci = build(fit, table, C, n_norm, gamma, cfg.tau, center)
                                covered.append(ci.covers(cfg.d0))
                                lengths.append(ci.length)
                            rows.append({"n": n, "snr": snr, "gamma": gamma, "K": K,
                                         "zeta1": None, "family": family, "center": center,
                                         "replicates": cfg.replicates,
                                         "coverage": float(np.mean(covered)),
                                         "mean_length": float(np.mean(lengths)),
                                         "miss_rate": float(out[:, 5].mean())})
    return McReport("coverage", COVERAGE_COLUMNS, rows, cfg.to_json())


class _FitView:
    """Just enough of a SplitFit for the interval builders."""

    def __init__(self, d_lo: float, d_hi: float):
        self.d_lo, self.d_hi = d_lo, d_hi
        self.d_av = 0.5 * (d_lo + d_hi)

    def estimate(self, center: str) -> float:
        return {"lo": self.d_lo, "hi": self.d_hi, "av": self.d_av}[center]


ARE_COLUMNS = ["n", "snr", "P", "measure", "replicates", "trim", "one_stage", "multi_stage",
               "multi_stage_untrimmed", "are_trimmed", "are_untrimmed", "are_theory",
               "miss_rate"]


def run_are_study(cfg: McConfig, bank: QuantileBank | None = None) -> McReport:
    """Empirical one-stage versus P-stage dispersion ratios next to the formula."""
    bank = bank or QuantileBank(cfg.cpp_reps, cfg.cpp_seed)
    rows = []
    cell = 0
    for snr in cfg.snrs:
        table = bank(snr)
        c_values = [table.C(z) for z in cfg.zeta]
        for n in cfg.budgets:
            plan = _calculus_plan(cfg, snr)
            try:
                multi = _run_multistage(cfg, snr, n, plan, cell, table)
            except StageUnderflow:
                cell += 1
                continue
            one_jobs = [(snr, n, cfg.d0, plan.eps0, _rep_seed(cfg.seed, cell, 0, r))
                        for r in range(cfg.replicates)]
            one = np.array(_map(_one_stage_job, one_jobs, cfg.threads))
            cell += 1
            est = multi[:, 2]
            kept = trim_extremes(est, cfg.trim)
            theory = theoretical_are(n, cfg.P, c_values, cfg.f_x)
            for m in cfg.measures:
                d_one = dispersion(one, cfg.d0, m)
                d_multi = dispersion(kept, cfg.d0, m)
                d_raw = dispersion(est, cfg.d0, m)
                rows.append({"n": n, "snr": snr, "P": cfg.P, "measure": m,
                             "replicates": cfg.replicates, "trim": cfg.trim,
                             "one_stage": d_one, "multi_stage": d_multi,
                             "multi_stage_untrimmed": d_raw,
                             "are_trimmed": _ratio(d_one, d_multi),
                             "are_untrimmed": _ratio(d_one, d_raw), "are_theory": theory,
                             "miss_rate": float(multi[:, 5].mean())})
    return McReport("are", ARE_COLUMNS, rows, cfg.to_json())


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else math.inf


ALLOCATION_COLUMNS = ["n", "snr", "lam1", "replicates", "trim", "status", "sd", "sd_se",
                      "MAD", "IQR", "miss_rate"]


def run_allocation_study(cfg: McConfig, bank: QuantileBank | None = None) -> McReport:
    """Dispersion of the two-stage estimate across first-stage fractions."""
    if cfg.P != 2:
        raise ValidationError("the allocation sweep is two-stage only")
    bank = bank or QuantileBank(cfg.cpp_reps, cfg.cpp_seed)
    rows = []
    cell = 0
    for snr in cfg.snrs:
        table = bank(snr)
        for n in cfg.budgets:
            for lam1 in cfg.lam1_grid:
                base = {"n": n, "snr": snr, "lam1": lam1, "replicates": cfg.replicates,
                        "trim": cfg.trim}
                try:
                    if lam1 * n < 4 or (1 - lam1) * n < 4:
                        raise StageUnderflow(f"lam1={lam1} leaves a stage with < 4 points")
                    plan = _calculus_plan(cfg, snr, lam=(lam1, 1.0 - lam1))
                    out = _run_multistage(cfg, snr, n, plan, cell, table)
                except StageUnderflow:
                    rows.append({**base, "status": "underflow"})
                    cell += 1
                    continue
                cell += 1
                kept = trim_extremes(out[:, 2], cfg.trim)
                sd = dispersion(kept, cfg.d0, "sd")
                rows.append({**base, "status": "ok", "sd": sd, "sd_se": sd_standard_error(kept),
                             "MAD": dispersion(kept, cfg.d0, "MAD"),
                             "IQR": dispersion(kept, cfg.d0, "IQR"),
                             "miss_rate": float(out[:, 5].mean())})
    return McReport("allocation", ALLOCATION_COLUMNS, rows, cfg.to_json())


def sd_standard_error(values) -> float:
    """Delta-method standard error of the sample standard deviation."""
    v = np.asarray(values, dtype=float)
    n = v.size
    s2 = v.var(ddof=1)
    m4 = np.mean((v - v.mean()) ** 4)
    var_s2 = (m4 - (n - 3) / (n - 1) * s2 ** 2) / n
    return float(math.sqrt(max(var_s2, 0.0)) / (2 * math.sqrt(s2)))


def run_study(cfg: McConfig, bank: QuantileBank | None = None) -> McReport:
    return {"coverage": run_coverage_study, "are": run_are_study,
            "allocation": run_allocation_study}[cfg.study](cfg, bank)


def rate_medians(budgets: Iterable[int], snr: float = 5.0, gamma: float = 0.5, K: float = 1.0,
                 replicates: int = 500, seed: int = 0, d0: float = 0.5) -> dict[int, float]:
    """Median |d_av - d0| of the fixed-K two-stage estimate for each budget."""
    cfg = McConfig(replicates=replicates, seed=seed, d0=d0)
    out = {}
    for cell, n in enumerate(budgets):
        plan = fixed_k_plan(K, gamma, snr=snr, first_stage_design="random")
        res = _run_multistage(cfg, snr, n, plan, cell, None)
        out[n] = float(np.median(np.abs(res[:, 2] - d0)))
    return out


# ---------------------------------------------------------------- presets


def _fig_budgets():
    return tuple(range(50, 1501, 50))


PRESETS: dict[str, dict] = {
    "table1": dict(study="coverage", snrs=(5.0,), budgets=(50, 100, 200, 500, 1000),
                   Ks=(1.0, 2.0), gammas=(0.5, 2 / 3), families=("conservative",),
                   replicates=2000),
    "table2": dict(study="coverage", snrs=(5.0,), budgets=(50, 100, 200, 500, 1000),
                   Ks=(1.0, 2.0), gammas=(0.5, 2 / 3), families=("exact",), replicates=2000),
    "table3": dict(study="coverage", snrs=(2.0, 5.0, 8.0), budgets=(50, 100, 200, 500),
                   zeta=(0.0005,), replicates=5000, first_stage_design="random"),
    "table4": dict(study="coverage", snrs=(2.0, 5.0, 8.0), budgets=(50, 100, 200, 500),
                   zeta=(0.0005,), replicates=5000, first_stage_design="equispaced"),
    "table5": dict(study="coverage", snrs=(2.0, 5.0, 8.0), budgets=(50, 100, 200, 500),
                   zeta=(0.0005,), replicates=5000, first_stage_design="equispaced",
                   second_stage_density="equispaced"),
    "fig2": dict(study="are", snrs=(1.0, 2.0, 5.0, 8.0), budgets=_fig_budgets(),
                 zeta=(0.0025,), replicates=5000, trim=5),
    "fig3": dict(study="are", P=3, snrs=(5.0, 8.0), budgets=_fig_budgets(),
                 zeta=(0.0025, 0.0025), replicates=5000, trim=3),
    "allocation": dict(study="allocation", snrs=(5.0,), budgets=(1000,), zeta=(0.0005,),
                       replicates=1000, trim=5),
}


def preset(name: str, **overrides) -> McConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return McConfig(**base)


def write_report(report: McReport, out_prefix: str) -> list[str]:
    """Write ``<prefix>.csv`` and ``<prefix>.json`` (plus ARE plot data)."""
    paths = [f"{out_prefix}.csv", f"{out_prefix}.json"]
    with open(paths[0], "w", newline="") as fh:
        fh.write(report.to_csv())
    with open(paths[1], "w") as fh:
        json.dump(report.to_json(), fh, indent=1)
    if report.study == "are":
        paths.append(f"{out_prefix}_plot.csv")
        with open(paths[-1], "w", newline="") as fh:
            fh.write(report.plot_csv())
    return paths
