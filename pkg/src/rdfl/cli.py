"""Command-line entry point: ``rdfl <subcommand> --config cfg.json --out dir``."""

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import harness
from .harness import RunConfig

SUBCOMMANDS = ("train", "gradcheck", "equivalence", "sensitivity", "bench", "gen-data")


def _load_config(path):
    raw = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    return raw


def _run_config(raw, args, suite_keys=()):
    run = {k: v for k, v in raw.items() if k not in suite_keys}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.scheme is not None:
        run["scheme"] = args.scheme
    run.setdefault("seed", 0)
    return RunConfig.from_dict(run)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def cmd_train(raw, args, out):
    cfg = _run_config(raw, args)
    art = harness.train(cfg, out_dir=out)
    return {"test_rmse": art.test_rmse, "seconds_per_epoch": art.seconds_per_epoch}


def cmd_gen_data(raw, args, out):
    cfg = _run_config(raw, args)
    ds = harness.generate_data(cfg, out)
    return {"samples": len(ds), "path": str(out / "dataset.csv")}


def cmd_gradcheck(raw, args, out):
    opts = {"instances": 30, "K": 5, "threshold": 1e-3, "wrong_vjp": False}
    opts.update(raw)
    seed = args.seed if args.seed is not None else opts.get("seed", 0)
    report = harness.gradcheck_suite(opts["instances"], K=opts["K"], seed=seed,
                                     threshold=opts["threshold"], wrong_vjp=opts["wrong_vjp"])
    _write_json(out / "gradcheck.json", report)
    if not report["passed"]:
        raise GradcheckFailed(
            f"gradient mismatch: unroll {report['max_rel_err_unroll']:.2e}, implicit "
            f"{report['max_rel_err_implicit']:.2e} (threshold {report['threshold']:g})")
    return {k: report[k] for k in ("instances", "max_rel_err_unroll", "max_rel_err_implicit")}


def cmd_equivalence(raw, args, out):
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    report = harness.equivalence_suite(seed=seed,
                                       K_list=raw.get("K_list", (1, 5, 10, 15, 20, 25, 30)),
                                       rho=raw.get("rho", 0.5), n=raw.get("n", 4))
    (out / "equivalence.json").write_text(report.to_json() + "\n")
    return {"rho_hat": report.rho_hat, "fitted_ratio": report.fitted_ratio}


def cmd_sensitivity(raw, args, out):
    cfg = _run_config(raw, args, suite_keys=("K_list",))
    rows = harness.sensitivity_suite(cfg, raw.get("K_list", (5, 10, 15, 20, 25)), out_dir=out)
    return {"rows": len(rows)}


def cmd_bench(raw, args, out):
    cfg = _run_config(raw, args, suite_keys=("schemes", "sizes", "seeds"))
    schemes = [args.scheme] if args.scheme else raw.get("schemes", harness.SCHEMES)
    _, summary = harness.bench_suite(cfg, schemes=schemes, sizes=raw.get("sizes"),
                                     seeds=raw.get("seeds"), out_dir=out)
    return summary["median_test_rmse"]


class GradcheckFailed(RuntimeError):
    pass


COMMANDS = {
    "train": cmd_train,
    "gen-data": cmd_gen_data,
    "gradcheck": cmd_gradcheck,
    "equivalence": cmd_equivalence,
    "sensitivity": cmd_sensitivity,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rdfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--scheme", choices=harness.SCHEMES, help="overrides the config scheme")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        raw = _load_config(args.config)
        result = COMMANDS[args.command](raw, args, out)
    except Exception as exc:  # reported as machine-readable JSON
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
               "traceback": traceback.format_exc().splitlines()[-3:]}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "result": result},
                     default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
