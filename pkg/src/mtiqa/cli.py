"""Command-line entry points: synth, train, eval, ablate, plot.

Every command validates its configuration before touching the filesystem
and writes all artifacts under a fresh run directory named by timestamp and
seed.  The output root defaults to ./runs and can be overridden with --out
or the MTIQA_OUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import time
from pathlib import Path

from . import plots
from .checkpoint import load_model
from .config import ExperimentConfig, load_config
from .dataset import build_dataset, make_corpus, read_manifest, load_image
from .evaluation import cross_dataset_eval, evaluate, PER_IMAGE_COLUMNS
from .experiments import default_matrix, run_ablation, write_results_csv
from .model import build_model
from .patches import SplitSpec, split_by_reference
from .training import load_train_state, train
from .dataset import write_manifest

OUT_ROOT_ENV = "MTIQA_OUT_ROOT"


class CliError(Exception):
    """User-facing command-line error; printed to stderr, exit status 2."""


def _make_run_dir(out: str | None, seed: int) -> Path:
    root = Path(out or os.environ.get(OUT_ROOT_ENV) or "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-seed{seed}"
    run_dir = base
    suffix = 1
    while run_dir.exists():
        suffix += 1
        run_dir = Path(f"{base}-{suffix}")
    run_dir.mkdir(parents=True)
    return run_dir


def _load_validated_config(args) -> ExperimentConfig:
    if not args.config:
        raise CliError("a --config file is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.override_seed(args.seed)
    return cfg


def _snapshot_config(args, run_dir: Path) -> None:
    if args.config:
        shutil.copy(args.config, run_dir / Path(args.config).name)


def _ensure_manifest(cfg: ExperimentConfig, run_dir: Path):
    ds = cfg.dataset
    if ds.manifest:
        return read_manifest(ds.manifest)
    corpus = Path(ds.corpus)
    if ds.make_corpus > 0 and not corpus.is_dir():
        make_corpus(corpus, count=ds.make_corpus, side=ds.corpus_side, seed=ds.seed)
        print(f"generated corpus of {ds.make_corpus} references at {corpus}")
    return build_dataset(corpus, ds.types, ds.levels, ds.seed, out_dir=run_dir / "dataset")


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_validated_config(args)
    run_dir = _make_run_dir(args.out, cfg.dataset.seed)
    _snapshot_config(args, run_dir)
    print(f"run directory: {run_dir}")
    manifest = _ensure_manifest(cfg, run_dir)
    manifest_path = (
        Path(cfg.dataset.manifest) if cfg.dataset.manifest else run_dir / "dataset" / "manifest.csv"
    )
    print(f"manifest: {manifest_path} ({len(manifest.records)} records, {len(manifest.classes)} classes)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_validated_config(args)
    resume_state = None
    model = None
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
        resume_state = load_train_state(args.checkpoint)
        if not args.manifest:
            raise CliError("resuming needs --manifest pointing at the original training split")
    run_dir = _make_run_dir(args.out, cfg.train.seed)
    _snapshot_config(args, run_dir)
    print(f"run directory: {run_dir}")

    if args.manifest:
        train_manifest = read_manifest(args.manifest)
    else:
        manifest = _ensure_manifest(cfg, run_dir)
        train_manifest, test_manifest = split_by_reference(
            manifest, SplitSpec(cfg.eval.train_fraction, seed=cfg.train.seed)
        )
        write_manifest(train_manifest, run_dir / "manifest_train.csv")
        write_manifest(test_manifest, run_dir / "manifest_test.csv")
        print(
            f"split: {len(train_manifest.reference_ids())} train / "
            f"{len(test_manifest.reference_ids())} test references"
        )

    if model is None:
        model = build_model(cfg.model)
    ckpt_path = run_dir / "checkpoint.ckpt"
    log_path = run_dir / "train_log.jsonl"
    state, history = train(
        model,
        train_manifest,
        cfg.train,
        log_path=log_path,
        checkpoint_path=ckpt_path,
        resume=resume_state,
    )
    last = history[-1]
    print(
        f"trained to epoch {state.epoch}: mean_ltotal={last['mean_ltotal']:.4f} "
        f"(mean_ld={last['mean_ld']:.4f}, mean_ls={last['mean_ls']:.4f})"
    )
    print(f"checkpoint: {ckpt_path}")
    print(f"training log: {log_path}")
    return 0


def _emit_report(report, run_dir: Path, stem: str) -> None:
    report.write_json(run_dir / f"{stem}.json")
    (run_dir / f"{stem}.txt").write_text(report.to_text() + "\n")
    csv_path = run_dir / f"{stem}_per_image.csv"
    report.write_per_image_csv(csv_path)
    plots.score_severity_scatter(report.per_image, run_dir / f"{stem}_score_vs_severity.png")
    plots.prediction_scatter(report.per_image, run_dir / f"{stem}_pred_vs_true.png")
    print(report.to_text())
    print(f"report: {run_dir / (stem + '.json')}")
    print(f"per-image table: {csv_path}")


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("--checkpoint is required for eval")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    model, training_meta = load_model(ckpt)
    seed = args.seed if args.seed is not None else int((training_meta or {}).get("seed", 0))
    run_dir = _make_run_dir(args.out, seed)
    _snapshot_config(args, run_dir)
    print(f"run directory: {run_dir}")

    if args.cross_set:
        foreign = read_manifest(args.cross_set)
        classes = {int(k): v for k, v in ((training_meta or {}).get("classes") or {}).items()}
        if not classes:
            raise CliError("checkpoint carries no class dictionary; cannot run cross-set eval")
        report = cross_dataset_eval(model, classes, foreign)
        _emit_report(report, run_dir, "cross_set_report")
        return 0

    if args.manifest:
        manifest_path = Path(args.manifest)
    else:
        manifest_path = ckpt.parent / "manifest_test.csv"
    if not manifest_path.exists():
        raise CliError(f"test manifest not found: {manifest_path} (pass --manifest)")
    manifest = read_manifest(manifest_path)
    report = evaluate(model, manifest)
    _emit_report(report, run_dir, "report")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_validated_config(args)
    run_dir = _make_run_dir(args.out, cfg.train.seed)
    _snapshot_config(args, run_dir)
    print(f"run directory: {run_dir}")
    manifest = _ensure_manifest(cfg, run_dir)
    rows = default_matrix(
        variants=cfg.ablation.variants,
        optimizers=cfg.ablation.optimizers,
        patch_sizes=cfg.ablation.patch_sizes,
        deeper=cfg.ablation.deeper,
    )
    results = run_ablation(
        manifest,
        cfg.model,
        cfg.train,
        rows=rows,
        seeds=cfg.ablation.seeds,
        base_seed=cfg.train.seed,
        train_fraction=cfg.eval.train_fraction,
        jobs=args.jobs,
    )
    csv_path = run_dir / "results.csv"
    write_results_csv(results, csv_path)
    (run_dir / "results.json").write_text(
        json.dumps(
            [
                {
                    "label": r.row.label,
                    "variant": r.row.variant,
                    "optimizer": r.row.optimizer,
                    "patch_size": r.row.patch_side,
                    "param_count": r.param_count,
                    "srocc": r.srocc,
                    "lcc": r.lcc,
                    "accuracy": r.accuracy,
                    "wall_time_s": r.wall_time_s,
                    "status": r.status,
                    "error": r.error,
                    "per_seed": r.per_seed,
                }
                for r in results
            ],
            indent=2,
        )
        + "\n"
    )
    ok = [r for r in results if r.status == "ok" and r.srocc is not None]
    if ok:
        plots.ablation_chart(
            [r.row.label for r in ok], [r.srocc for r in ok], run_dir / "results_srocc.png"
        )
    for r in results:
        metric = "error: " + r.error if r.status != "ok" else (
            f"srocc={r.srocc:.4f} lcc={r.lcc:.4f} acc="
            + ("n/a" if r.accuracy is None else f"{r.accuracy:.4f}")
        )
        print(f"{r.row.label:<18} params={r.param_count:<10} {metric}")
    print(f"results table: {csv_path}")
    return 0


def _read_per_image_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PER_IMAGE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise CliError(f"{path}: missing per-image columns {sorted(missing)}")
        return list(reader)


def cmd_plot(args) -> int:
    did_anything = False
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.per_image:
        rows = _read_per_image_csv(Path(args.per_image))
        p1 = plots.score_severity_scatter(rows, out_dir / "score_vs_severity.png")
        p2 = plots.prediction_scatter(rows, out_dir / "pred_vs_true.png")
        print(f"wrote {p1}\nwrote {p2}")
        did_anything = True
    if args.results:
        with open(args.results, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r.get("status") == "ok" and r.get("srocc")]
        if rows:
            p = plots.ablation_chart(
                [r["label"] for r in rows],
                [float(r["srocc"]) for r in rows],
                out_dir / "results_srocc.png",
            )
            print(f"wrote {p}")
        did_anything = True
    if args.checkpoint and args.image:
        model, _ = load_model(args.checkpoint)
        image = load_image(args.image)
        for tap in ("conv1", "t4"):
            p = plots.feature_montage(
                model, image, out_dir / f"features_{tap}.png", top_k=args.top_k, tap=tap
            )
            print(f"wrote {p}")
        did_anything = True
    if not did_anything:
        raise CliError("nothing to plot: pass --per-image, --results, or --checkpoint with --image")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtiqa",
        description="Multi-task no-reference image quality assessment toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="override every configured seed")
        p.add_argument("--out", type=str, default=None, help="output root (default ./runs)")

    p = sub.add_parser("synth", help="build a labeled synthetic dataset from a reference corpus")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="split, train, and checkpoint a model")
    common(p)
    p.add_argument("--checkpoint", type=str, default=None, help="resume from this checkpoint")
    p.add_argument("--manifest", type=str, default=None, help="train on this manifest as-is (no split)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    common(p)
    p.add_argument("--checkpoint", type=str, required=False, help="trained checkpoint")
    p.add_argument("--manifest", type=str, default=None, help="test manifest (default: next to checkpoint)")
    p.add_argument("--cross-set", dest="cross_set", type=str, default=None,
                   help="foreign manifest for cross-dataset evaluation")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the architecture/optimizer/patch-size matrix")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from reports or checkpoints")
    common(p)
    p.add_argument("--per-image", dest="per_image", type=str, default=None,
                   help="per-image CSV from eval")
    p.add_argument("--results", type=str, default=None, help="ablation results CSV")
    p.add_argument("--checkpoint", type=str, default=None, help="checkpoint for feature montages")
    p.add_argument("--image", type=str, default=None, help="image for feature montages")
    p.add_argument("--top-k", dest="top_k", type=int, default=8, help="channels per montage")
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
