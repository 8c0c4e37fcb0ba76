"""Image-level aggregation, evaluation reports, repeated-split medians, and
cross-dataset evaluation.

Per-image scores are the mean of the patch scores; the per-image distortion
label is the majority vote over patch argmaxes, with ties broken by the
largest summed softmax probability and then by the lowest class index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .dataset import DatasetManifest, ImageRecord
from .metrics import LogisticParams, MetricError, fit_logistic, logistic_fn, pcc, srocc
from .model import ForwardOutput, ModelConfig, MultiTaskIQANet, build_model
from .patches import SplitSpec, default_stride, extract_patches, split_by_reference
from .dataset import load_image
from .training import TrainConfig, train

PER_IMAGE_COLUMNS = [
    "reference_id",
    "distortion_true",
    "distortion_pred",
    "severity",
    "score_true",
    "score_pred",
]


@dataclass
class ImagePrediction:
    record: Optional[ImageRecord]
    score_pred: float
    class_pred: Optional[int]  # 1-based, None for single-task variants
    patch_scores: list[float] = field(default_factory=list)
    patch_classes: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    n_images: int
    srocc: Optional[float]
    lcc_raw: Optional[float]
    lcc_logistic: Optional[float]
    accuracy: Optional[float]
    logistic: Optional[LogisticParams]
    degenerate: bool = False
    note: Optional[str] = None
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "srocc": self.srocc,
            "lcc_raw": self.lcc_raw,
            "lcc_logistic": self.lcc_logistic,
            "accuracy": self.accuracy,
            "logistic": None if self.logistic is None else list(self.logistic.as_array()),
            "degenerate": self.degenerate,
            "note": self.note,
        }

    def to_text(self) -> str:
        lines = [f"images evaluated: {self.n_images}"]
        if self.degenerate:
            lines.append(f"correlations: {self.note}")
        else:
            lines.append(f"SROCC: {self.srocc:.4f}")
            lines.append(f"LCC (raw): {self.lcc_raw:.4f}")
            if self.lcc_logistic is not None:
                lines.append(f"LCC (logistic remap): {self.lcc_logistic:.4f}")
        if self.accuracy is not None:
            lines.append(f"distortion accuracy: {self.accuracy:.4f}")
        return "\n".join(lines)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_per_image_csv(self, path) -> None:
        lines = [",".join(PER_IMAGE_COLUMNS)]
        for row in self.per_image:
            lines.append(",".join(str(row[c]) for c in PER_IMAGE_COLUMNS))
        Path(path).write_text("\n".join(lines) + "\n")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def aggregate_image(
    patch_outputs: list[ForwardOutput], record: Optional[ImageRecord] = None
) -> ImagePrediction:
    """Mean score plus majority-vote class over one image's patches."""
    if not patch_outputs:
        raise ValueError("cannot aggregate an empty list of patch outputs")
    scores = [float(o.s) for o in patch_outputs]
    score = float(np.mean(scores))

    class_pred = None
    patch_classes: list[int] = []
    if patch_outputs[0].d_logits is not None:
        logits = [np.asarray(o.d_logits, dtype=np.float64) for o in patch_outputs]
        patch_classes = [int(np.argmax(v)) + 1 for v in logits]
        counts: dict[int, int] = {}
        for c in patch_classes:
            counts[c] = counts.get(c, 0) + 1
        top = max(counts.values())
        tied = [c for c, n in counts.items() if n == top]
        if len(tied) == 1:
            class_pred = tied[0]
        else:
            prob_sums = np.sum([softmax(v) for v in logits], axis=0)
            class_pred = min(tied, key=lambda c: (-prob_sums[c - 1], c))
    return ImagePrediction(
        record=record,
        score_pred=score,
        class_pred=class_pred,
        patch_scores=scores,
        patch_classes=patch_classes,
    )


def predict_image(model: MultiTaskIQANet, image: np.ndarray, record=None) -> ImagePrediction:
    """All-overlapping-patch inference for one image; no augmentation."""
    side = model.config.patch_side
    cells = extract_patches(
        image, side, default_stride(side), name=getattr(record, "path", "image")
    )
    batch = torch.from_numpy(
        np.stack([np.ascontiguousarray(p.transpose(2, 0, 1), dtype=np.float32) for _, _, p in cells])
    )
    with torch.no_grad():
        d, s = model(batch)
    outputs = [
        ForwardOutput(d_logits=None if d is None else d[i], s=float(s[i]))
        for i in range(batch.shape[0])
    ]
    return aggregate_image(outputs, record=record)


def predict_manifest(model: MultiTaskIQANet, manifest: DatasetManifest) -> list[ImagePrediction]:
    if not manifest.records:
        raise ValueError("manifest has no records to evaluate")
    preds = []
    for record in manifest.records:
        image = load_image(manifest.resolve(record))
        preds.append(predict_image(model, image, record=record))
    return preds


def report_from_predictions(
    predictions: list[ImagePrediction],
    classes: Optional[dict[int, str]] = None,
    correct_fn: Optional[Callable[[ImagePrediction], bool]] = None,
) -> EvalReport:
    """Metrics over per-image predictions.

    `correct_fn` decides distortion-correctness per image (defaults to index
    equality); constant predicted scores are flagged as degenerate rather
    than reported as a correlation.
    """
    if not predictions:
        raise ValueError("no predictions to report on")
    score_pred = np.array([p.score_pred for p in predictions], dtype=np.float64)
    score_true = np.array([p.record.score for p in predictions], dtype=np.float64)

    accuracy = None
    if predictions[0].class_pred is not None:
        if correct_fn is None:
            correct_fn = lambda p: p.class_pred == p.record.distortion_index
        accuracy = float(np.mean([1.0 if correct_fn(p) else 0.0 for p in predictions]))

    per_image = []
    for p in predictions:
        name = lambda idx: classes[idx] if classes and idx in classes else idx
        per_image.append(
            {
                "reference_id": p.record.reference_id,
                "distortion_true": name(p.record.distortion_index),
                "distortion_pred": "" if p.class_pred is None else name(p.class_pred),
                "severity": p.record.severity_level,
                "score_true": p.record.score,
                "score_pred": p.score_pred,
            }
        )

    try:
        rho = srocc(score_pred, score_true)
        lcc_raw = pcc(score_pred, score_true)
    except MetricError as exc:
        return EvalReport(
            n_images=len(predictions),
            srocc=None,
            lcc_raw=None,
            lcc_logistic=None,
            accuracy=accuracy,
            logistic=None,
            degenerate=True,
            note=f"degenerate predictions: {exc}",
            per_image=per_image,
        )

    logistic = None
    lcc_logistic = None
    note = None
    if len(predictions) >= 6:
        logistic = fit_logistic(score_pred, score_true)
        lcc_logistic = pcc(logistic_fn(logistic, score_pred), score_true)
    else:
        note = "too few images for the logistic remap (need 6)"

    return EvalReport(
        n_images=len(predictions),
        srocc=rho,
        lcc_raw=lcc_raw,
        lcc_logistic=lcc_logistic,
        accuracy=accuracy,
        logistic=logistic,
        note=note,
        per_image=per_image,
    )


def evaluate(model: MultiTaskIQANet, manifest: DatasetManifest) -> EvalReport:
    """Patch-aggregated evaluation of a trained model on a test manifest."""
    predictions = predict_manifest(model, manifest)
    return report_from_predictions(predictions, classes=manifest.classes)


# -- repeated splits --------------------------------------------------------------


def run_repeated_splits(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n: int = 10,
    seed: Optional[int] = None,
    train_fraction: float = 0.8,
) -> dict:
    """n independent split -> train -> evaluate runs with seeds base+0..n-1;
    reports per-run metrics and their medians over the successful runs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base = model_config.seed if seed is None else seed
    runs: list[dict] = []
    for i in range(n):
        s = base + i
        entry: dict = {"run": i, "seed": s}
        try:
            train_m, test_m = split_by_reference(manifest, SplitSpec(train_fraction, seed=s))
            model = build_model(replace(model_config, seed=s))
            state, _ = train(model, train_m, replace(train_config, seed=s))
            report = evaluate(model, test_m)
            if report.degenerate:
                raise RuntimeError(report.note)
            entry.update(
                srocc=report.srocc,
                lcc_raw=report.lcc_raw,
                lcc_logistic=report.lcc_logistic,
                accuracy=report.accuracy,
            )
        except Exception as exc:  # noqa: BLE001 - per-run failures are data
            entry["error"] = f"run {i} (seed {s}): {exc}"
        runs.append(entry)

    ok = [r for r in runs if "error" not in r]
    if 2 * len(ok) < n:
        failures = "; ".join(r["error"] for r in runs if "error" in r)
        raise RuntimeError(
            f"only {len(ok)}/{n} repeated-split runs succeeded (need at least half): {failures}"
        )

    def median_of(key: str) -> Optional[float]:
        vals = [r[key] for r in ok if r.get(key) is not None]
        return float(np.median(vals)) if vals else None

    return {
        "n": n,
        "runs": runs,
        "median_srocc": median_of("srocc"),
        "median_lcc_raw": median_of("lcc_raw"),
        "median_lcc_logistic": median_of("lcc_logistic"),
        "median_accuracy": median_of("accuracy"),
    }


# -- cross-dataset protocol ----------------------------------------------------------


def _check_unambiguous(classes: dict[int, str], label: str) -> None:
    names = list(classes.values())
    if len(set(names)) != len(names):
        raise ValueError(f"{label} class dictionary has duplicate names: {sorted(names)}")


def cross_dataset_eval(
    model: MultiTaskIQANet,
    source_classes: dict[int, str],
    foreign_manifest: DatasetManifest,
    shared_types: Optional[list[str]] = None,
) -> EvalReport:
    """Evaluate on a foreign dataset without parameter adaptation.

    The foreign manifest is filtered to the shared distortion types; class
    correctness is judged by name after mapping the model's own indices
    through `source_classes`.  The logistic remap aligns the two score
    scales (its slope may be negative, so opposite-direction scales are
    handled).
    """
    _check_unambiguous(source_classes, "source")
    _check_unambiguous(foreign_manifest.classes, "foreign")
    source_names = set(source_classes.values())
    foreign_names = set(foreign_manifest.classes.values())
    if shared_types is None:
        shared = sorted(source_names & foreign_names)
    else:
        shared = list(shared_types)
        for name in shared:
            if name not in source_names or name not in foreign_names:
                raise ValueError(f"shared type {name!r} missing from one of the class dictionaries")
    if not shared:
        raise ValueError("no shared distortion types between the two datasets")

    shared_set = set(shared)
    keep_indices = {i for i, name in foreign_manifest.classes.items() if name in shared_set}
    records = [r for r in foreign_manifest.records if r.distortion_index in keep_indices]
    if not records:
        raise ValueError("foreign manifest has no records of the shared types")
    filtered = DatasetManifest(
        classes=dict(foreign_manifest.classes),
        records=records,
        provenance=dict(foreign_manifest.provenance),
        root=foreign_manifest.root,
    )

    predictions = predict_manifest(model, filtered)

    def name_match(p: ImagePrediction) -> bool:
        predicted_name = source_classes.get(p.class_pred)
        return predicted_name == filtered.classes[p.record.distortion_index]

    report = report_from_predictions(predictions, classes=filtered.classes, correct_fn=name_match)
    suffix = f"cross-set over shared types: {', '.join(shared)}"
    report.note = suffix if report.note is None else f"{report.note}; {suffix}"
    return report
