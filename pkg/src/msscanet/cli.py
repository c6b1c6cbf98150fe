"""Command-line entry point (``msscanet``).

Exit codes: 0 success, 2 usage/configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import coerce, read_kv, split_known
from .data import SynthSpec, generate_synthetic, load_manifest, read_ppm
from .exceptions import CheckpointError, ConfigError, DataError, NumericError
from .flops import flops_analytic, flops_measured
from .model import ARCH_ROWS, LOSS_ROWS, ModelConfig, build_model, table2_configs
from .training import TrainSchedule, cross_dataset, evaluate, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def load_run_config(path) -> tuple[ModelConfig, TrainSchedule]:
    """Model and schedule settings from one file; ``seed`` applies to both."""
    values = read_kv(path) if path else {}
    seed = values.pop("seed", None)
    model_vals, sched_vals = split_known(values, ModelConfig, TrainSchedule)
    if seed is not None:
        model_vals["seed"] = sched_vals["seed"] = seed
    return (ModelConfig(**coerce(ModelConfig, model_vals)),
            TrainSchedule(**coerce(TrainSchedule, sched_vals)))


def _cmd_train(args):
    config, schedule = load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    ckpt, log = train(build_model(config), manifest, schedule, args.out)
    print(f"trained {schedule.epochs} epochs, final loss {log[-1]['loss']:.6f}")
    print(f"checkpoint: {ckpt}")


def _cmd_score(args):
    model = load_checkpoint(args.checkpoint)
    print(f"{model.predict(read_ppm(args.image)):.6f}")


def _cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, load_manifest(args.manifest), args.split)
    if args.scatter:
        report.write_scatter(args.scatter)
    print(report.summary())
    return EXIT_OK


def _cmd_flops(args):
    config, _ = load_run_config(args.config)
    fb = flops_measured(build_model(config)) if args.measured else flops_analytic(config)
    print(fb.to_csv() if args.csv else fb.to_text(), end="" if args.csv else "\n")


def _cmd_synth(args):
    values = read_kv(args.spec)
    lo, hi = values.pop("mos_min", None), values.pop("mos_max", None)
    kwargs = coerce(SynthSpec, values)
    if lo is not None or hi is not None:
        kwargs["mos_scale"] = (float(lo or 1.0), float(hi or 5.0))
    manifest = generate_synthetic(SynthSpec(**kwargs), args.out)
    print(f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.csv'}")


def _read_pairs(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pairs file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"train_manifest", "test_manifest"} <= set(rows[0]):
        raise DataError(f"{path}: header must contain train_manifest,test_manifest")

    def resolve(p):
        p = Path(p.strip())
        return p if p.is_absolute() else path.parent / p

    return [(load_manifest(resolve(r["train_manifest"])), load_manifest(resolve(r["test_manifest"])))
            for r in rows]


def _cmd_crossval(args):
    config, schedule = load_run_config(args.config)
    report = cross_dataset(_read_pairs(args.pairs), config, schedule, args.folds, args.out)
    for key, values in report.results.items():
        s = report.stats(key)
        print(f"{key}: " + " ".join(f"{v:.4f}" for v in values)
              + f"  (median {s['median']:.4f})")


def _cmd_ablate(args):
    config, schedule = load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    if args.table == 2:
        # architecture rows are compared under the L1-only objective
        sched = TrainSchedule(**{**schedule.__dict__, "enable_cb": False, "enable_ap": False})
        runs = [(ARCH_ROWS[k], cfg, sched) for k, cfg in table2_configs(config).items()]
    else:
        full = table2_configs(config)["multi-dual"]
        flags = {"l1-only": (False, False), "l1+cb": (True, False),
                 "l1+ap": (False, True), "full": (True, True)}
        runs = [(LOSS_ROWS[k], full,
                 TrainSchedule(**{**schedule.__dict__, "enable_cb": cb, "enable_ap": ap}))
                for k, (cb, ap) in flags.items()]
    width = max(len(r[0]) for r in runs)
    print(f"{'configuration':<{width}}  {'PLCC':>7}  {'SROCC':>7}")
    for i, (label, cfg, sched) in enumerate(runs):
        out = Path(args.out) / f"row{i}" if args.out else None
        model = build_model(cfg)
        _, log = train(model, manifest, sched, out)
        if out is not None:
            write_log(log, out / "train_log.csv")
        rep = evaluate(model, manifest, "test")
        if rep.undefined:
            print(f"{label:<{width}}  {'undef':>7}  {'undef':>7}")
        else:
            print(f"{label:<{width}}  {rep.plcc:7.4f}  {rep.srocc:7.4f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msscanet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a manifest's train split")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="print the predicted MOS of one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="PLCC/SROCC on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--scatter")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("flops", help="multiply-accumulate breakdown")
    p.add_argument("--config")
    p.add_argument("--measured", action="store_true")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("synth", help="generate a synthetic distortion corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("crossval", help="k-fold cross-dataset protocol")
    p.add_argument("--pairs", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=_cmd_crossval)

    p = sub.add_parser("ablate", help="run every row of an ablation table")
    p.add_argument("--table", type=int, choices=(2, 3), required=True)
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
