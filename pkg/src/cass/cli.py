"""``cass`` command line: gen-data, train, eval, ablate.

Exit codes: 0 success, 2 usage error, 3 numeric abort, 4 I/O error.
Outputs default to ``$CASS_OUT_DIR`` (or ``./cass_out``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalkit, shapegen
from .nets import CassModel
from .tensorcore import CheckpointError
from .train import ABLATIONS, TrainConfig, Trainer, TrainingAborted, TrainingData, write_curves

log = logging.getLogger("cass")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "CASS_OUT_DIR"


class UsageError(Exception):
    pass


def default_out_dir():
    return Path(os.environ.get(OUT_ENV) or "cass_out")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, args, inputs=(), outputs=(), config=None, seed=None):
    """JSON record tying every output to the exact inputs (by checksum)."""
    manifest = {
        "tool": "cass", "version": __version__, "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k != "func"},
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _config(args, dataset=None):
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    changes = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        changes[k.strip()] = v.strip()
    if changes:
        try:
            cfg = TrainConfig.from_text(cfg.to_text() + "".join(f"{k}={v}\n" for k, v in changes.items()))
        except ValueError as err:
            raise UsageError(str(err)) from err
    if getattr(args, "ablation", None):
        cfg = cfg.replace(ablation=args.ablation)
    if dataset is not None:
        if args.config and (cfg.n_points, cfg.obs_points) != (dataset.n_points, dataset.obs_points):
            raise UsageError(f"config expects M={cfg.n_points}, P={cfg.obs_points}; dataset has "
                             f"M={dataset.n_points}, P={dataset.obs_points}")
        cfg = cfg.replace(n_points=dataset.n_points, obs_points=dataset.obs_points)
    return cfg


# --- gen-data -----------------------------------------------------------------

def cmd_gen_data(args):
    cats = [c for c in args.categories.split(",") if c]
    for c in cats:
        if c not in shapegen.CATEGORIES:
            raise UsageError(f"unknown category {c!r}; known: {','.join(sorted(shapegen.CATEGORIES))}")
    if args.obs_points > args.points:
        raise UsageError("--obs-points cannot exceed --points")
    if not 0.3 <= args.visibility <= 1.0:
        raise UsageError("--visibility must lie in [0.3, 1]")
    if round(args.visibility * args.points) < 8:
        raise UsageError("visibility x points leaves fewer than 8 observed points")
    if args.noise < 0 or args.instances_per_category < 1 or args.views_per_instance < 1:
        raise UsageError("counts must be positive and --noise non-negative")
    out = Path(args.out) if args.out else default_out_dir() / "dataset.cass"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = shapegen.generate_dataset(cats, args.instances_per_category, args.views_per_instance,
                                   args.points, args.obs_points, args.visibility, args.noise,
                                   args.seed)
    shapegen.write_dataset(ds, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", args, outputs=[out],
                   seed=args.seed)
    print(f"wrote {out}: {len(cats)} categories, {len(ds.instances)} instances, "
          f"{len(ds.records)} records (M={args.points}, P={args.obs_points})")
    print(f"sha256 {sha256(out)}")
    return EXIT_OK


# --- train --------------------------------------------------------------------

def _stage_ckpt(out_dir, stage):
    return out_dir / f"stage{stage}.ckpt"


def _train(cfg, dataset, data_path, stages, out_dir, resume=None, args=None):
    """Run ``stages`` and write checkpoints, curves and a manifest into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    data = TrainingData.from_dataset(dataset, cfg, "train")
    inputs = [data_path]
    model = None
    if resume is not None:
        model, meta = CassModel.load(resume)
        if meta.get("ablation", cfg.ablation) != cfg.ablation:
            raise UsageError(f"{resume} was trained with ablation {meta['ablation']!r}")
        inputs.append(resume)
    trainer = Trainer(cfg, data, model)
    (out_dir / "config.txt").write_text(cfg.to_text())
    outputs = [out_dir / "config.txt"]

    def progress(stage, it, value):
        log.info("stage %d iter %d loss %.6f", stage, it, value)

    for stage in stages:
        rows = trainer.run_stage(stage, snapshot_dir=out_dir, progress=progress)
        ckpt, curves = _stage_ckpt(out_dir, stage), out_dir / f"curves_stage{stage}.csv"
        trainer.model.save(ckpt, {"stage": stage, "ablation": cfg.ablation,
                                  "config": cfg.to_text(), "data_sha256": sha256(data_path)})
        write_curves(rows, curves)
        outputs += [ckpt, curves]
        print(f"stage {stage}: {len(rows)} curve rows, checkpoint {ckpt}")
    if args is not None:
        write_manifest(out_dir / "train_manifest.json", "train", args, inputs, outputs,
                       cfg.to_text(), cfg.seed)
    return trainer.model


def cmd_train(args):
    data_path = Path(args.data)
    dataset = shapegen.read_dataset(data_path)
    cfg = _config(args, dataset)
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir() / f"train_{cfg.ablation}"
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    resume = Path(args.resume) if args.resume else None
    if stages[0] > 1 and resume is None:
        prior = _stage_ckpt(out_dir, stages[0] - 1)
        if not prior.exists():
            raise UsageError(f"stage {stages[0]} needs the stage-{stages[0] - 1} checkpoint "
                             f"({prior}); pass --resume")
        resume = prior
    _train(cfg, dataset, data_path, stages, out_dir, resume, args)
    return EXIT_OK


# --- eval ---------------------------------------------------------------------

def _records(dataset, split, test_fraction=0.2):
    train, test = dataset.split(test_fraction)
    return {"train": train, "test": test, "all": dataset.records}[split]


def evaluate(model, dataset, split="test", iou_samples=100_000, oracle=False):
    records = _records(dataset, split)
    if oracle:
        preds = evalkit.oracle_predictions(dataset, records)
    else:
        preds = evalkit.predict_records(model, dataset, records)
    return preds, evalkit.metric_report(preds, iou_samples)


def cmd_eval(args):
    if args.iou_samples < 100_000:
        raise UsageError("--iou-samples must be at least 1e5")
    if args.checkpoint is None and not args.oracle:
        raise UsageError("--checkpoint is required unless --oracle is given")
    data_path = Path(args.data)
    dataset = shapegen.read_dataset(data_path)
    model, inputs = None, [data_path]
    if not args.oracle:
        model, _ = CassModel.load(args.checkpoint)
        if model.arch.n_points != dataset.n_points:
            raise CheckpointError(f"checkpoint decodes {model.arch.n_points} points but the "
                                  f"dataset has M={dataset.n_points}")
        inputs.append(Path(args.checkpoint))
    preds, report = evaluate(model, dataset, args.split, int(args.iou_samples), args.oracle)
    out_csv = Path(args.out_csv) if args.out_csv else default_out_dir() / "report.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_csv, run=args.run_name)
    outputs = [out_csv]
    if args.svg:
        rows = evalkit.ap_curves(preds, iou_samples=int(args.iou_samples))
        svg = Path(args.svg)
        evalkit.curves_svg(rows, svg)
        curves = svg.with_name(svg.stem + "_curves.csv")
        evalkit.write_curves_csv(rows, curves)
        outputs += [svg, curves]
    write_manifest(out_csv.with_name(out_csv.name + ".manifest.json"), "eval", args, inputs, outputs)
    o = report.overall
    print(" ".join(f"{k}={o[k]:.4g}" for k in evalkit.REPORT_METRICS if k in o))
    return EXIT_OK


# --- ablate -------------------------------------------------------------------

def cmd_ablate(args):
    names = [a for a in args.ablations.split(",") if a]
    bad = [a for a in names if a not in ABLATIONS]
    if bad or not names:
        raise UsageError(f"unknown ablations {bad}; choose from {','.join(ABLATIONS)}")
    data_path = Path(args.data)
    dataset = shapegen.read_dataset(data_path)
    out = Path(args.out) if args.out else default_out_dir() / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    run_root = out.with_name(out.stem + "_runs")
    table, full = [], []
    outputs = []
    for name in names:
        args.ablation = name
        cfg = _config(args, dataset)
        run_dir = run_root / name
        try:
            model = _train(cfg, dataset, data_path, [1, 2, 3], run_dir)
        finally:
            # partial results stay on disk even when a run aborts
            if table:
                evalkit.write_rows(out, table)
                evalkit.write_rows(out.with_name(out.stem + "_by_category.csv"), full)
        _, report = evaluate(model, dataset, "test", int(args.iou_samples))
        report.to_csv(run_dir / "report.csv", run=name)
        table.append(dict(report.overall, run=name, category="overall"))
        full.extend(report.table(name))
        print(f"{name}: " + " ".join(f"{k}={report.overall[k]:.4g}"
                                     for k in ("5d5cm", "10d5cm", evalkit.STRICT_TOY_CRITERION,
                                               "CD", "EMD")))
    evalkit.write_rows(out, table)
    by_cat = out.with_name(out.stem + "_by_category.csv")
    evalkit.write_rows(by_cat, full)
    outputs += [out, by_cat] + [run_root / n / "stage3.ckpt" for n in names]
    args.ablation = None
    write_manifest(out.with_name(out.name + ".manifest.json"), "ablate", args, [data_path], outputs,
                   _config(args, dataset).to_text())
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cass", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cass {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--categories", default=",".join(shapegen.DEFAULT_CATEGORIES),
                   help=f"comma list from {','.join(sorted(shapegen.CATEGORIES))}")
    g.add_argument("--instances-per-category", type=int, default=200)
    g.add_argument("--views-per-instance", type=int, default=4)
    g.add_argument("--points", type=int, default=128, help="canonical points M")
    g.add_argument("--obs-points", type=int, default=96, help="observed points P")
    g.add_argument("--visibility", type=float, default=0.75)
    g.add_argument("--noise", type=float, default=0.002, help="Gaussian noise sigma in meters")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="dataset path (default $CASS_OUT_DIR/dataset.cass)")
    g.set_defaults(func=cmd_gen_data)

    def training_flags(q):
        q.add_argument("--config", help="key=value config file")
        q.add_argument("--data", required=True, help="dataset file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    t = sub.add_parser("train", help="run training stages")
    training_flags(t)
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out-dir", help="output directory (default $CASS_OUT_DIR/train_<ablation>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint",
                       description="Report columns: " + ", ".join(evalkit.REPORT_COLUMNS)
                       + ". CD is in units of 1e-3 m; pose columns are pass fractions.")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--out-csv", help="report path (default $CASS_OUT_DIR/report.csv)")
    e.add_argument("--svg", help="AP curve chart; the curve table goes next to it as <stem>_curves.csv")
    e.add_argument("--iou-samples", type=float, default=100_000)
    e.add_argument("--oracle", action="store_true", help="score ground truth as predictions")
    e.add_argument("--run-name", default="eval", help="value of the run column")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every ablation")
    training_flags(a)
    a.add_argument("--ablations", default=",".join(ABLATIONS))
    a.add_argument("--out", help="table path (default $CASS_OUT_DIR/ablation.csv)")
    a.add_argument("--iou-samples", type=float, default=100_000)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        # single-threaded BLAS keeps reductions bit-reproducible
        with threadpool_limits(1):
            return args.func(args)
    except UsageError as err:
        print(f"cass {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as err:
        print(f"cass {args.command}: numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, shapegen.DatasetFormatError) as err:
        print(f"cass {args.command}: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
