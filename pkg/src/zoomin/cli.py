"""Command-line entry point: ``zoomin {quantiles,plan,run,mc}``.

Exit codes: 0 success, 2 invalid input, 3 runtime failure, 4 oracle failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .cpp import DEFAULT_PROBS, CppQuantiles, estimate_quantiles
from .design import StagePlan, allocate_counts, run_experiment, window_constant, window_half_width
from .errors import ExternalOracleFailure, ValidationError, ZoominError
from .intervals import conservative_ci, exact_ci, finite_sample_ci
from .model import (ChangePointModel, ExternalOracle, ModelOracle, NoiseSpec, PoolOracle,
                    TabulatedDensity)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ORACLE = 0, 2, 3, 4

RUN_KEYS = {"schema_version", "n", "tau", "plan", "model", "basis", "quantiles", "d0"}
MC_KEYS = {"schema_version", "preset", "mc", "cache_dir"}
MODEL_KEYS = {"d0", "beta_l", "beta_u", "left_basis", "right_basis", "sigma", "error_dist",
              "eps0"}
QUANT_KEYS = {"reps", "seed", "cache_dir"}
BASIS_KEYS = {"left", "right"}

DEFAULT_RUN_QUANTILE_REPS = 400_000


def _reject_unknown(data: dict, known: set, where: str):
    extra = set(data) - known
    if extra:
        raise ValidationError(f"unknown fields in {where}: {sorted(extra)}")


def load_config(path: str | None, known: set) -> dict:
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be an object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    _reject_unknown(data, known, path)
    return data


def _emit(payload, out: str | None):
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=1) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------- quantiles


def cmd_quantiles(args) -> int:
    probs = set(DEFAULT_PROBS)
    for z in args.zeta:
        probs |= {z, 1 - z}
    for t in args.tau:
        probs |= {t / 2, 1 - t / 2}
    table = estimate_quantiles(args.snr, args.reps, args.seed, error_dist=args.error_dist,
                               probs=sorted(probs), cache_dir=args.cache_dir,
                               use_cache=args.cache_dir is not None)
    if args.out:
        table.save(args.out)
    summary = {"snr": table.snr, "reps": table.reps, "seed": table.seed,
               "C": {repr(z): table.C(z) for z in args.zeta},
               "ab": {repr(t): {"conservative": [table.dl(t / 2), table.du(1 - t / 2)],
                                "exact_av": [table.dav(t / 2), table.dav(1 - t / 2)]}
                      for t in args.tau}}
    _emit(summary, None)
    return EXIT_OK


# ---------------------------------------------------------------- plan / run


def _plan_from(cfg: dict) -> StagePlan:
    return StagePlan.from_json(cfg.get("plan", {}))


def _quantile_source(cfg: dict, plan: StagePlan):
    q = cfg.get("quantiles", {})
    _reject_unknown(q, QUANT_KEYS, "quantiles")
    reps = int(q.get("reps", DEFAULT_RUN_QUANTILE_REPS))
    seed = int(q.get("seed", 1))
    cache_dir = q.get("cache_dir")
    error_dist = cfg.get("model", {}).get("error_dist", "normal")

    def source(snr: float) -> CppQuantiles:
        # plug-in SNRs are rounded to 3 significant digits so caches get reused
        snr = float(f"{snr:.3g}")
        return estimate_quantiles(snr, reps, seed, error_dist=error_dist, cache_dir=cache_dir)

    return source


def cmd_plan(args) -> int:
    cfg = load_config(args.config, RUN_KEYS)
    plan = _plan_from(cfg)
    n = int(cfg.get("n", 0))
    if n <= 0:
        raise ValidationError("config needs a positive total budget 'n'")
    counts = allocate_counts(n, plan.lam)
    out = {"schema_version": SCHEMA_VERSION, "plan": plan.to_json(), "n": n, "counts": counts,
           "stages": []}
    table = None
    if plan.uses_calculus and plan.P > 1:
        if plan.snr is None:
            raise ValidationError("deriving window constants offline needs plan.snr")
        table = _quantile_source(cfg, plan)(plan.snr)
    realized = [c / n for c in counts]
    for q in range(2, plan.P + 1):
        K = window_constant(q, plan, table.C, n, realized) if table else plan.K[q - 2]
        out["stages"].append({"q": q, "K": K, "gamma": plan.gamma[q - 2],
                              "half_width": window_half_width(q, K, counts[q - 2],
                                                              plan.gamma[q - 2])})
    _emit(out, args.out)
    return EXIT_OK


def _make_oracle(spec: str, cfg: dict, n: int):
    if spec == "model":
        m = cfg.get("model")
        if m is None:
            raise ValidationError("--oracle model needs a 'model' block in the config")
        _reject_unknown(m, MODEL_KEYS, "model")
        noise = NoiseSpec(sigma=float(m.get("sigma", 0.0)),
                          error_dist=m.get("error_dist", "normal"))
        model = ChangePointModel(float(m["d0"]), tuple(m["beta_l"]), tuple(m["beta_u"]),
                                 m.get("left_basis", "constant"), m.get("right_basis", "constant"),
                                 noise, float(m.get("eps0", 0.05)))
        return ModelOracle(model, n), (model.left_basis, model.right_basis)
    basis = cfg.get("basis", {})
    _reject_unknown(basis, BASIS_KEYS, "basis")
    bases = (basis.get("left", "constant"), basis.get("right", "constant"))
    if spec.startswith("pool:"):
        return PoolOracle.from_csv(spec[5:], n), bases
    if spec.startswith("exec:"):
        return ExternalOracle(spec[5:], n), bases
    raise ValidationError(f"--oracle must be model, pool:PATH or exec:CMD, got {spec!r}")


def _intervals(result, plan: StagePlan, table: CppQuantiles, tau: float) -> list[dict]:
    """All interval families for the final stage; inapplicable ones carry a reason."""
    fit = result.final
    out = []
    if plan.P < 2:
        return [{"family": "none", "reason": "single-stage plan"}]
    last, prev = result.stages[-1], result.stages[-2]
    gamma = plan.gamma[-1]
    lam_prev, lam_last = prev.n / result.n, last.n / result.n
    exponent = (plan.P - 1) + gamma
    h0 = None
    if plan.second_stage_density not in ("uniform", "equispaced"):
        h0 = TabulatedDensity(plan.second_stage_density).at_zero
    ratio = (lam_prev / lam_last) ** ((plan.P - 2) + gamma)
    # equals limit_rate(K, lam_1, gamma, h0) when P = 2
    C = ratio / (2.0 * last.K) if h0 is None else ratio * h0 / last.K
    for build in (conservative_ci, exact_ci):
        for center in ("lo", "hi", "av"):
            ci = build(fit, table, C, last.n, gamma, tau, center, exponent=exponent)
            out.append(ci.to_json())
    try:
        zeta1 = plan.zeta[0]
        ci = finite_sample_ci(fit.d_av, result.n, table.C(zeta1), table.C(tau / 2), tau, plan)
        out.append(ci.to_json())
    except ValidationError as exc:
        out.append({"family": "finite-sample", "reason": str(exc)})
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config, RUN_KEYS)
    plan = _plan_from(cfg)
    n = int(cfg.get("n", 0))
    if n <= 0:
        raise ValidationError("config needs a positive total budget 'n'")
    tau = float(cfg.get("tau", 0.05))
    source = _quantile_source(cfg, plan)
    oracle, (lb, rb) = _make_oracle(args.oracle, cfg, n)
    with oracle:
        rng = np.random.SeedSequence(args.seed)
        result = run_experiment(oracle, plan, rng, lb, rb, n=n, quantiles=source,
                                d0=cfg.get("d0"))
    report = result.to_json()
    report["schema_version"] = SCHEMA_VERSION
    report["oracle"] = args.oracle
    report["seed"] = args.seed
    report["tau"] = tau
    if plan.P > 1:
        table = source(result.snr_used)
        report["quantile_table"] = {"snr": table.snr, "reps": table.reps, "seed": table.seed}
        report["intervals"] = _intervals(result, plan, table, tau)
    _emit(report, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- mc


def cmd_mc(args) -> int:
    cfg = load_config(args.config, MC_KEYS)
    name = args.preset or cfg.get("preset")
    overrides = dict(cfg.get("mc", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    if args.budgets is not None:
        overrides["budgets"] = tuple(args.budgets)
    for key in ("snrs", "budgets", "Ks", "gammas", "families", "centers", "zeta", "lam1_grid",
                "measures"):
        if overrides.get(key) is not None:
            overrides[key] = tuple(overrides[key])
    if name:
        config = harness.preset(name, **overrides)
    else:
        config = harness.McConfig.from_json(overrides)
    bank = harness.QuantileBank(config.cpp_reps, config.cpp_seed, cfg.get("cache_dir"))
    report = harness.run_study(config, bank)
    if args.out:
        for path in harness.write_report(report, args.out):
            print(path)
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zoomin", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output path (prefix for mc)")
    common.add_argument("--threads", type=int, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantiles", parents=[common], help="simulate canonical argmin quantiles")
    q.add_argument("--snr", type=float, required=True)
    q.add_argument("--reps", type=int, default=2_000_000)
    q.add_argument("--seed", type=int, default=1)
    q.add_argument("--zeta", type=float, action="append", default=None)
    q.add_argument("--tau", type=float, action="append", default=None)
    q.add_argument("--error-dist", default="normal")
    q.add_argument("--cache-dir", default=None)
    q.set_defaults(func=cmd_quantiles)

    pl = sub.add_parser("plan", parents=[common], help="print stage counts and window constants")
    pl.add_argument("--seed", type=int, default=0)
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("run", parents=[common], help="run one multistage experiment")
    r.add_argument("--oracle", default="model", help="model | pool:PATH | exec:CMD")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mc", parents=[common], help="Monte Carlo studies")
    m.add_argument("--preset", choices=sorted(harness.PRESETS))
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--replicates", type=int, default=None)
    m.add_argument("--budgets", type=int, nargs="+", default=None)
    m.set_defaults(func=cmd_mc)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    if args.command == "quantiles":
        args.zeta = args.zeta or [0.0005, 0.0025]
        args.tau = args.tau or [0.05]
    try:
        return args.func(args)
    except ExternalOracleFailure as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ZoominError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
