"""Command-line entry point: ``dpfb {synth,train,eval,gradcheck,flow-demo}``.

Exit codes: 0 success, 1 invalid input or failed check, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import gradcheck, oracle
from .config import ConfigError, RunConfig, load_config
from .data import DataError, load_csv, normalize_for_training, read_schema, synth_generate, with_domain, write_csv, write_schema
from .metrics import MetricError, evaluate, write_predictions
from .training import Checkpoint, build_models, train, write_loss_log

log = logging.getLogger("dpfb")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _schema_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".schema")


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    ds = synth_generate(synth)
    out = Path(args.out)
    schema = write_csv(ds, out)
    write_schema(schema, _schema_path(out))
    print(f"wrote {len(ds)} steps to {out} (schema {_schema_path(out)}), "
          f"source fraction {ds.source_fraction():.3f}")
    return EXIT_OK


def _load(data: str, schema: str, cfg: RunConfig):
    ds = load_csv(data, read_schema(schema))
    rule = cfg.domain
    return with_domain(ds, rule.column, rule.low, rule.high)


def cmd_train(args) -> int:
    cfg = _config(args.config)
    ds = normalize_for_training(_load(args.data, args.schema, cfg))
    log.info("training on %d steps, source fraction %.3f", len(ds), ds.source_fraction())
    model, potential = build_models(cfg.model, ds.n_x, ds.n_y, cfg.train.seed, ablation=args.prior_only)
    result = train(cfg.train, ds, model, potential, cfg.flow, checkpoint_path=args.out, log_path=args.log,
                   train_potential=not args.prior_only)
    write_loss_log(result.history, args.log)
    last = result.history[-1]
    print(f"trained {last.epoch} epochs: loss_theta {last.loss_theta:.4f}, loss_phi {last.loss_phi:.4f}; "
          f"checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    ds = _load(args.data, args.schema, cfg)
    ckpt = Checkpoint.load(args.ckpt)
    ev = evaluate(ckpt, ds)
    ev.report.save(args.report)
    if args.predictions:
        write_predictions(args.predictions, ds.y, ev.y_pred, ds.domain)
    print(ev.report.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} tensors within tolerance")
    return EXIT_OK if not failed else EXIT_INVALID


def cmd_flow_demo(args) -> int:
    if args.case == "gaussian1d":
        report = oracle.gaussian_1d_experiment(seed=args.seed)
    else:
        report = oracle.kalman_2d_experiment(seed=args.seed)
    print("\n".join(report.lines()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfb", description="Particle-flow sequence model for cross-domain soft sensing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cross-domain dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a CSV dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--schema", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", required=True, help="per-epoch loss CSV")
    t.add_argument("--prior-only", action="store_true", help="ablation: keep the potential at zero")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="only the [domain] rule is used")
    e.add_argument("--predictions", help="optional per-step predictions CSV")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flow-demo", help="trained flow vs. exact references")
    f.add_argument("--case", choices=("gaussian1d", "kalman2d"), required=True)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_flow_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, MetricError, oracle.OracleError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
