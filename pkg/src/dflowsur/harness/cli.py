"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 every sample
of the run failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError, ConfigurationError, DomainError, NumericError, ShapeError, TrainingError
from ..flowmatch import FlowMatcher
from ..geometry import load_dataset, save_dataset, synthesize_dataset
from ..physics import OperatingPoint, oracle_cl, train_surrogate
from .checkpoint import save_checkpoint
from .config import dump_config, load_config
from .experiment import run_experiment
from .report import emit_report, format_text, load_report, report_table

logger = logging.getLogger("dflowsur")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
# the surrogate gets its own, larger labeled corpus (labels are cheap oracle calls)
SURROGATE_CORPUS = 4000


# shortcut flag -> config key; "--steps" is applied to every selected strategy
SHORTCUTS = {
    "strategy": "strategy",
    "lam": "energy.lam",
    "tc": "energy.t_c",
    "iters": "dflow.K",
    "tau": "dflow.tau",
    "tol": "dflow.tol",
    "n": "n",
    "seed": "seed",
    "model": "model",
}


def _add_config_args(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--strategy", help="comma-separated strategies")
    p.add_argument("--lambda", dest="lam", help="energy coefficient(s)")
    p.add_argument("--tc", help="energy cutoff time(s)")
    p.add_argument("--steps", help="Euler steps T for the selected strategies")
    p.add_argument("--iters", help="Dflow iteration budget K")
    p.add_argument("--tau", help="Dflow step size")
    p.add_argument("--tol", help="Dflow stopping tolerance")
    p.add_argument("--n", help="batch size")
    p.add_argument("--seed", help="base seed")
    p.add_argument("--model", help="velocity-field checkpoint")


def build_parser():
    parser = argparse.ArgumentParser(prog="dflowsur", description="Physics-guided flow-matching airfoil design.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the CST design corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-flow", help="fit a (conditional) velocity field")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conditional", action="store_true", help="condition on oracle lift labels")
    p.add_argument("--alpha-deg", type=float, default=2.0)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch", "--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--hidden", default="128,128")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-surrogate", help="fit the dropout surrogate on oracle labels")
    p.add_argument("--data", help="design CSV; without it a labeled corpus of --n designs is synthesized")
    p.add_argument("--n", type=int, default=SURROGATE_CORPUS)
    p.add_argument("--corpus-seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-deg", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="run the configured strategies and write the report")
    _add_config_args(p)

    p = sub.add_parser("diagnose", help="like generate, with alignment, UQ and gap tables")
    _add_config_args(p)

    p = sub.add_parser("report", help="print or re-emit a saved JSON report")
    p.add_argument("input")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    return parser


def _out(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def _op(alpha_deg):
    return OperatingPoint(np.deg2rad(alpha_deg))


def cmd_gen_data(args):
    ds = synthesize_dataset(args.n, args.seed, sigma=args.sigma)
    save_dataset(ds, _out(args.out))
    print(f"wrote {len(ds)} designs to {args.out} (acceptance rate {ds.acceptance_rate:.3f})")
    return EXIT_OK


def cmd_train_flow(args):
    ds = load_dataset(args.data)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h.strip())
    model = FlowMatcher(hidden=hidden, epochs=args.epochs, batch_size=args.batch_size, random_state=args.seed)
    labels = oracle_cl(ds.designs, _op(args.alpha_deg)) if args.conditional else None
    model.fit(ds.designs, labels, x_mean=ds.mean, x_std=ds.std)
    save_checkpoint(model, _out(args.out))
    print(f"wrote {'conditional ' if args.conditional else ''}velocity field to {args.out}")
    return EXIT_OK


def cmd_train_surrogate(args):
    ds = load_dataset(args.data) if args.data else synthesize_dataset(args.n, args.corpus_seed)
    model = train_surrogate(ds, _op(args.alpha_deg), seed=args.seed)
    save_checkpoint(model, _out(args.out))
    print(f"wrote surrogate to {args.out} (validation MSE {model.val_mse_:.3g})")
    return EXIT_OK


def _overrides(args):
    """Shortcut flags first, then ``--set`` entries, so ``--set`` wins."""
    out = [f"{key}={getattr(args, name)}" for name, key in SHORTCUTS.items() if getattr(args, name) is not None]
    if args.steps is not None:
        strategies = load_config(args.config, out + list(args.set)).strategy
        out += [f"{s}.T={args.steps}" for s in strategies]
    return out + list(args.set)


def cmd_generate(args, diagnostics=False):
    overrides = _overrides(args)
    if diagnostics and not any(o.split("=", 1)[0].strip() == "diagnostics" for o in overrides):
        cfg = load_config(args.config, overrides)
        wanted = ["alignment", "gap"] + (["uq"] if cfg.surrogate and cfg.dataset else [])
        overrides.append("diagnostics=" + ",".join(wanted))
    config = load_config(args.config, overrides)
    report = run_experiment(config, write=False)
    out = config.output_dir()
    emit_report(report, out)
    (out / "config.used").write_text(dump_config(config), encoding="utf-8")
    header, rows = report_table(report)
    print(format_text(header, rows))
    print(f"results in {out}")
    if report.n_samples and report.n_failed == report.n_samples:
        logger.error("every sample failed")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args):
    header, rows = load_report(args.input)
    if args.format == "text":
        print(format_text(header, rows))
    else:
        print(",".join(header))
        for r in rows:
            print(",".join("" if r[h] is None else str(r[h]) for h in header))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": cmd_gen_data,
        "train-flow": cmd_train_flow,
        "train-surrogate": cmd_train_surrogate,
        "generate": cmd_generate,
        "diagnose": lambda a: cmd_generate(a, diagnostics=True),
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DomainError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
