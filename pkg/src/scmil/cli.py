"""Command-line entry point: ``scmil <subcommand> ...``.

Exit codes: 0 success, 2 invalid input (files, manifests, configs), 3 a
metric is undefined for the given data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bag_data import SyntheticConfig, generate_synthetic_cohort, load_bag, load_cohort, write_cohort
from .errors import ConfigError, SCMILError, UndefinedMetricError
from .pipeline import (
    RunConfig, compare_variants, cross_validate, evaluate_model, load_model, predict_curve,
    save_train_state, sweep_w1, time_grid, write_curve_csv, write_interpretation_table, write_scatter_svg,
)

log = logging.getLogger("scmil")

EXIT_INVALID = 2
EXIT_UNDEFINED_METRIC = 3


def _run_config(path, bags):
    d = next(iter(bags.values())).d
    if path is None:
        return RunConfig(d=d)
    cfg = RunConfig.from_json(path)
    if cfg.d != d:
        raise ConfigError(f"config has d={cfg.d} but the cohort's bags have d={d}")
    return cfg


def _parse_values(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse value list {text!r}") from None


def cmd_simulate(args):
    cfg = SyntheticConfig.from_json(args.config) if args.config else SyntheticConfig()
    bags, records = generate_synthetic_cohort(cfg)
    manifest = write_cohort(args.out, bags, records)
    (Path(args.out) / "simulate_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(manifest)


def cmd_train(args):
    bags, records = load_cohort(args.manifest)
    cfg = _run_config(args.config, bags)
    if args.fold == "all":
        folds = None
    else:
        try:
            folds = {int(args.fold)}
        except ValueError:
            raise ConfigError(f"--fold must be an integer or 'all', got {args.fold!r}") from None
        if not 0 <= int(args.fold) < cfg.n_folds:
            raise ConfigError(f"--fold must lie in 0..{cfg.n_folds - 1}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {r.patient_id: r for r in records}

    def save_final(split, state, result):
        extra = {"max_duration": max(by_id[p].duration for p in split.train_ids)}
        save_train_state(out / f"fold{split.fold}_final.ckpt", state, split, extra)
        if result is not None:
            (out / f"fold{split.fold}_metrics.json").write_text(result.to_json() + "\n")

    res = cross_validate(bags, records, cfg, checkpoint_dir=out, folds=folds, on_fold=save_final)
    (out / "cv_metrics.json").write_text(res.to_json() + "\n")
    print(res.to_json())


def cmd_evaluate(args):
    model, meta = load_model(args.checkpoint)
    bags, records = load_cohort(args.manifest)
    if args.held_out:
        if "test_ids" not in meta:
            raise ConfigError("checkpoint carries no held-out patient list")
        keep = set(meta["test_ids"])
        records = [r for r in records if r.patient_id in keep]
    result = evaluate_model(model, bags, records, tau=args.tau, grid_size=args.grid_size)
    text = result.to_json()
    Path(args.out).write_text(text + "\n")
    print(text)


def cmd_predict(args):
    model, meta = load_model(args.checkpoint)
    bag = load_bag(args.bag, expected_d=model.cfg.d)
    t_max = args.t_max if args.t_max is not None else meta.get("max_duration", 10.0)
    table, interp = predict_curve(model, bag, time_grid(args.grid, t_max))
    write_curve_csv(args.out, table)
    if args.svg:
        write_scatter_svg(args.svg, interp)
    if args.patches:
        write_interpretation_table(args.patches, interp)


def cmd_sweep(args):
    bags, records = load_cohort(args.manifest)
    cfg = _run_config(args.config, bags)
    rows = sweep_w1(bags, records, cfg, _parse_values(args.values), args.out)
    for row in rows:
        print(",".join(str(v) for v in row))


def cmd_variants(args):
    bags, records = load_cohort(args.manifest)
    cfg = _run_config(args.config, bags)
    rows = compare_variants(bags, records, cfg, out_csv=args.out)
    for row in rows:
        print(",".join(str(v) for v in row))


def build_parser():
    parser = argparse.ArgumentParser(prog="scmil", description="Survival prediction from patch bags.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic cohort (bags + manifest.csv)")
    p.add_argument("--config", help="JSON with generator settings")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one fold or all folds, writing checkpoints and metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON with run settings")
    p.add_argument("--fold", default="all", help="fold index or 'all'")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="TDC and IBS of a checkpoint on a cohort")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--held-out", action="store_true", help="only the checkpoint's test patients")
    p.add_argument("--tau", type=float)
    p.add_argument("--grid-size", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="survival curve for one bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--grid", type=int, default=100, help="number of time points")
    p.add_argument("--t-max", type=float, help="last grid time (default: longest training duration)")
    p.add_argument("--out", required=True, help="CSV with time, scdf, dpdf")
    p.add_argument("--svg", help="scatter of patch importance and clusters")
    p.add_argument("--patches", help="TSV of per-patch importance, cluster and pooling weight")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep-w1", help="cross-validate over clustering weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--values", default="0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("variants", help="cross-validate the three mixture-head variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_variants)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED_METRIC
    except (SCMILError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
