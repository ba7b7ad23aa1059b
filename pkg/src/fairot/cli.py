"""Command line front end.

Subcommands mirror the library layers: ``datagen`` draws a synthetic
dataset, ``solve`` runs one instance of any method, ``sweep`` traces a
trade-off curve, ``costlearn`` trains a cost model, ``eval`` runs the
train-once match-many study, and ``oracle-check`` verifies the
production solvers against the slow references.

Exit codes: 0 success, 1 invalid configuration, 2 solver failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .costlearn import (
    BilevelConfig,
    MahalanobisModel,
    MlpModel,
    pretrain_mlp,
    save_model,
    train_cost,
)
from .harness import (
    AGREEMENT_TOL,
    DEFAULT_TARGET,
    METHODS,
    ConfigError,
    ReusabilitySpec,
    SweepSpec,
    _fmt,
    _prepare_context,
    _repaired_target,
    _solve_value,
    agreement_suite,
    run_reusability,
    run_sweep,
)
from .sinkhorn import SinkhornConfig, save_plan
from .synthdata import GenSpec, generate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_VERIFY = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairot",
        description="Fair optimal transport: solvers, cost learning, and experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, help="JSON configuration file")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")
        p.add_argument("--jobs", type=int, default=1, help="concurrent workers (default 1)")
        return p

    add("datagen", "draw a synthetic dataset and write both sides as CSV")
    add("solve", "solve one instance with any method; writes plan.csv plus a JSON sidecar")
    add("sweep", "trace a trade-off curve over a parameter grid, resumably")
    add("costlearn", "train a cost model; writes model.json and history.csv")
    add("eval", "reusability study: train cost models once, match fresh samples per trial")
    add("oracle-check", "compare production solvers against the dual-ascent references")
    return parser


def _load_config(args, required: bool = True) -> dict:
    if args.config is None:
        if required:
            raise ConfigError("--config is required for this command")
        return {}
    try:
        payload = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{args.config} must hold a JSON object")
    return payload


def _ensure_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _override_seeds(payload: dict, seed: int | None, *dataset_keys: str) -> dict:
    if seed is None:
        return payload
    out = dict(payload)
    out["seed"] = seed
    for key in dataset_keys:
        if isinstance(out.get(key), dict):
            out[key] = {**out[key], "seed": seed}
    return out


def _cmd_datagen(args) -> int:
    payload = _load_config(args, required=False)
    spec_dict = {"dataset": "gaussians", "num_src": 250, "num_dst": 25, "seed": 0}
    spec_dict.update(payload)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    try:
        spec = GenSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dataset config: {exc}") from exc
    out = _ensure_out(args)
    src, dst = generate(spec)
    src.to_csv(out / "src.csv")
    dst.to_csv(out / "dst.csv")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {src.n} source and {dst.n} destination points to {out}")
    return EXIT_OK


# fallback grid values per method when the solve config omits "value";
# the experiment defaults for the penalty-bearing methods
_SOLVE_DEFAULTS = {
    "penalized": 90.0,
    "costlearn_mahalanobis": 1000.0,
    "costlearn_mlp": 500.0,
}


def _cmd_solve(args) -> int:
    payload = _load_config(args)
    out = _ensure_out(args)
    method = payload.get("method")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    data = dict(payload)
    value = data.pop("value", None)
    if value is None:
        value = _SOLVE_DEFAULTS.get(method, data.get("epsilon", 1.0))
    data["grid"] = [float(value)]
    data["out_dir"] = str(out)
    data = _override_seeds(data, args.seed, "dataset")
    spec = SweepSpec.from_dict(data)
    ctx = _prepare_context(spec)
    rec, plan, report, model = _solve_value(ctx, spec.grid[0])
    save_plan(out / "plan.csv", plan, report)
    if model is not None:
        save_model(model, out / "model.json")
    print(f"{spec.method} at {spec.grid[0]:g}: transport cost {report.transport_cost:.6g}, "
          f"fairness loss {report.fairness_loss:.3e}, {rec.iterations} iterations, "
          f"converged={report.converged}")
    return EXIT_OK if report.converged else EXIT_SOLVER


def _cmd_sweep(args) -> int:
    payload = _load_config(args)
    if args.out is not None:
        payload["out_dir"] = str(args.out)
    payload = _override_seeds(payload, args.seed, "dataset")
    spec = SweepSpec.from_dict(payload)
    records = run_sweep(spec, jobs=max(1, args.jobs))
    failed = sum(1 for r in records if r.failed)
    print(f"{spec.method}: {len(records)} grid points ({failed} failed) in {spec.out_dir}")
    return EXIT_SOLVER if failed else EXIT_OK


def _cmd_costlearn(args) -> int:
    payload = _load_config(args)
    out = _ensure_out(args)
    kind = payload.get("model", "mahalanobis")
    if kind not in ("mahalanobis", "mlp"):
        raise ConfigError(f"model must be 'mahalanobis' or 'mlp', got {kind!r}")
    if "dataset" not in payload:
        raise ConfigError("costlearn config needs a dataset block")
    dataset_dict = dict(payload["dataset"])
    if args.seed is not None:
        dataset_dict["seed"] = args.seed
    try:
        dataset = GenSpec.from_dict(dataset_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dataset config: {exc}") from exc

    maha = kind == "mahalanobis"
    cfg = BilevelConfig(
        tradeoff=float(payload.get("tradeoff", 1000.0 if maha else 500.0)),
        inner=SinkhornConfig(epsilon=float(payload.get("epsilon", 1.0)),
                             tol=float(payload.get("tol", 1e-6)),
                             max_iter=int(payload.get("max_iter", 1000))),
        outer_steps=int(payload.get("outer_steps", 400)),
        learning_rate=float(payload.get("learning_rate", 0.1 if maha else 0.05)),
    )
    src, dst = generate(dataset)
    target = _repaired_target(payload.get("target", DEFAULT_TARGET), src, dst)
    if maha:
        model0 = MahalanobisModel.identity(src.dim)
    else:
        model0 = pretrain_mlp(MlpModel.init(src.dim, hidden=int(payload.get("hidden", 32)),
                                            seed=dataset.seed), src, dst)
    model, hist = train_cost(model0, src, dst, target, cfg, seed=dataset.seed)
    save_model(model, out / "model.json")
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "fairness_loss", "discrepancy", "objective"])
        for step, fl, disc, obj in hist.rows:
            writer.writerow([step, _fmt(fl), _fmt(disc), _fmt(obj)])
    step, fl, disc, _ = hist.rows[-1]
    print(f"{kind}: fairness loss {fl:.3e}, discrepancy {disc:.3e} "
          f"after {step} steps -> {out}")
    if hist.diverged:
        print("training diverged; model.json holds the last finite iterate", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_eval(args) -> int:
    payload = _load_config(args)
    if args.out is not None:
        payload["out_dir"] = str(args.out)
    payload = _override_seeds(payload, args.seed, "train", "test")
    spec = ReusabilitySpec.from_dict(payload)
    records = run_reusability(spec, jobs=max(1, args.jobs))
    by_method: dict[str, list] = {}
    for rec in records:
        if not rec.failed:
            by_method.setdefault(rec.method, []).append(rec)
    for method, recs in by_method.items():
        mean_fl = sum(r.fairness_loss for r in recs) / len(recs)
        mean_wall = sum(r.wall_time_seconds for r in recs) / len(recs)
        print(f"{method}: mean fairness loss {mean_fl:.3e}, "
              f"mean solve time {mean_wall * 1e3:.1f} ms over {len(recs)} trials")
    failed = sum(1 for r in records if r.failed)
    if failed:
        print(f"{failed} records failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_oracle_check(args) -> int:
    out = Path(args.out) if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    rows = agreement_suite(seed=args.seed if args.seed is not None else 0)
    path = out / "oracle_gaps.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "epsilon", "instance", "solver", "frobenius_gap"])
        for row in rows:
            writer.writerow([row["size"], _fmt(row["epsilon"]), row["instance"],
                             row["solver"], _fmt(row["frobenius_gap"])])
    worst = max(row["frobenius_gap"] for row in rows)
    bad = [row for row in rows if row["frobenius_gap"] > AGREEMENT_TOL]
    print(f"{len(rows)} agreement checks, worst Frobenius gap {worst:.3e} "
          f"(tolerance {AGREEMENT_TOL:g}) -> {path}")
    if bad:
        for row in bad[:10]:
            print(f"  mismatch: {row['solver']} {row['size']} eps={row['epsilon']:g} "
                  f"gap {row['frobenius_gap']:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


_HANDLERS = {
    "datagen": _cmd_datagen,
    "solve": _cmd_solve,
    "sweep": _cmd_sweep,
    "costlearn": _cmd_costlearn,
    "eval": _cmd_eval,
    "oracle-check": _cmd_oracle_check,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
