"""Command-line entry point: ``casperlab train | analyze | gradcheck``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure
(divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import CasperLabError, ConfigError, InvalidInputError, InvalidParameterError, LoadError

OUTPUT_ENV = "CASPERLAB_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("casperlab")


def _output_root(arg: str | None, default: str) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or default)


def cmd_train(args) -> int:
    from .config import load_config, parse_seeds, validate
    from .experiment import run_grid

    conf = load_config(args.config, args.set or [])
    if args.seeds:
        conf["seeds"] = parse_seeds(args.seeds)
    if args.methods:
        conf["train"]["methods"] = [m.strip() for m in args.methods.split(",")]
    validate(conf)
    out = _output_root(args.out, "runs")
    run_grid(conf, out, args.workers)
    print(f"wrote {len(conf['seeds']) * len(conf['train']['methods'])} runs and summary to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import analyze

    out = Path(args.out) if args.out else _output_root(None, "runs") / "analysis"
    analyze(args.reports, out, args.rank, args.threshold)
    print(f"wrote analysis tables to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    res = run_gradcheck(args.seed, args.instances, args.models)
    print(f"feature instances: {len(res.feature_errors)}  max rel err {max(res.feature_errors):.3e}")
    print(f"full-model instances: {len(res.model_errors)}  max rel err {max(res.model_errors):.3e}")
    print(f"skipped degenerate draws: {res.skipped}")
    print(f"max relative error: {res.max_error:.3e}")
    ok = res.max_error <= args.tol
    print("PASS" if ok else f"FAIL (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casperlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run every configured method for every seed")
    t.add_argument("--config", help="TOML config or a manifest.json from an earlier run")
    t.add_argument("--seeds", help="'1..5' or '0,3,7'; overrides the config's seed list")
    t.add_argument("--methods", help="comma-separated subset, e.g. 'ER,ER+CaSpeR'")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-path override, e.g. casper.rho=0 (repeatable)")
    t.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    t.add_argument("--workers", type=int, help="parallel worker processes")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="sigma curves, k-NN table and functional maps from reports")
    a.add_argument("reports", nargs="+", help="report directories or a train output root")
    a.add_argument("--out", help="where to write tables (default <output root>/analysis)")
    a.add_argument("--rank", type=int, help="eigenvectors per functional map")
    a.add_argument("--threshold", type=float, help="display threshold on |C|")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--models", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, InvalidParameterError, LoadError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CasperLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
