"""Architecture/optimizer/patch-size ablation matrix.

Every configuration is trained and evaluated on the same splits with the
same paired seeds; per-row failures are recorded in the results table, never
dropped.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import DatasetManifest
from .evaluation import evaluate
from .model import ModelConfig, build_model, total_parameter_count
from .patches import SplitSpec, split_by_reference
from .training import TrainConfig, train

RESULTS_COLUMNS = [
    "label",
    "variant",
    "optimizer",
    "patch_size",
    "param_count",
    "srocc",
    "lcc",
    "accuracy",
    "wall_time_s",
    "seeds",
    "status",
    "error",
]


@dataclass
class AblationRow:
    label: str
    variant: str
    optimizer: str = "adam"
    patch_side: int = 128
    convs_per_stage: Optional[list[int]] = None


@dataclass
class RowResult:
    row: AblationRow
    param_count: int = 0
    per_seed: list[dict] = field(default_factory=list)
    srocc: Optional[float] = None
    lcc: Optional[float] = None
    accuracy: Optional[float] = None
    wall_time_s: float = 0.0
    status: str = "ok"
    error: str = ""

    def csv_cells(self) -> list[str]:
        def fmt(v):
            return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

        return [
            self.row.label,
            self.row.variant,
            self.row.optimizer,
            str(self.row.patch_side),
            str(self.param_count),
            fmt(self.srocc),
            fmt(self.lcc),
            fmt(self.accuracy),
            f"{self.wall_time_s:.2f}",
            str(len([s for s in self.per_seed if "error" not in s])),
            self.status,
            self.error,
        ]


def default_matrix(
    variants=("a", "b", "c", "d", "e", "f"),
    optimizers=("adam", "sgd"),
    patch_sizes=(128, 64, 32),
    deeper: bool = True,
) -> list[AblationRow]:
    """The standard row structure: one row per variant at 128/adam, then the
    SGD, smaller-patch, and deeper-backbone variations of the fused model."""
    rows = [AblationRow(f"model-{v}", v) for v in variants]
    if "sgd" in optimizers:
        rows.append(AblationRow("model-f-v2", "f", optimizer="sgd"))
    extra_sizes = [p for p in patch_sizes if p != 128]
    for i, p in enumerate(extra_sizes):
        rows.append(AblationRow(f"model-f-v{3 + i}", "f", patch_side=p))
    if deeper:
        rows.append(AblationRow("model-f-deeper", "f", convs_per_stage=[2, 2, 4, 4, 4]))
    return rows


def _row_model_config(base: ModelConfig, row: AblationRow, seed: int) -> ModelConfig:
    backbone = replace(base.backbone)
    if row.convs_per_stage is not None:
        backbone = replace(backbone, convs_per_stage=list(row.convs_per_stage))
    return replace(base, backbone=backbone, variant=row.variant, patch_side=row.patch_side, seed=seed)


def _run_cell(args) -> dict:
    manifest, base_model, base_train, train_fraction, row, seed = args
    entry = {"seed": seed}
    t0 = time.perf_counter()
    try:
        train_m, test_m = split_by_reference(manifest, SplitSpec(train_fraction, seed=seed))
        model = build_model(_row_model_config(base_model, row, seed))
        train(model, train_m, replace(base_train, optimizer=row.optimizer, seed=seed))
        report = evaluate(model, test_m)
        if report.degenerate:
            raise RuntimeError(report.note)
        entry.update(
            srocc=report.srocc,
            lcc=report.lcc_logistic if report.lcc_logistic is not None else report.lcc_raw,
            accuracy=report.accuracy,
        )
    except Exception as exc:  # noqa: BLE001 - recorded, never dropped
        entry["error"] = str(exc)
    entry["wall_time_s"] = time.perf_counter() - t0
    return entry


def run_ablation(
    manifest: DatasetManifest,
    base_model: ModelConfig,
    base_train: TrainConfig,
    rows: Optional[list[AblationRow]] = None,
    seeds: int = 3,
    base_seed: int = 0,
    train_fraction: float = 0.8,
    jobs: int = 1,
) -> list[RowResult]:
    """Run the matrix; rows are paired (identical splits and seeds across
    configurations) and returned sorted by label."""
    if rows is None:
        rows = default_matrix()
    if not rows:
        raise ValueError("ablation matrix is empty")
    seed_list = [base_seed + i for i in range(seeds)]

    results: list[RowResult] = []
    cells = [
        (manifest, base_model, base_train, train_fraction, row, seed)
        for row in rows
        for seed in seed_list
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, cells))
    else:
        outcomes = [_run_cell(c) for c in cells]

    for i, row in enumerate(rows):
        per_seed = outcomes[i * len(seed_list) : (i + 1) * len(seed_list)]
        result = RowResult(row=row, per_seed=per_seed)
        result.wall_time_s = sum(s.get("wall_time_s", 0.0) for s in per_seed)
        try:
            result.param_count = total_parameter_count(
                build_model(_row_model_config(base_model, row, base_seed))
            )
        except Exception as exc:  # noqa: BLE001
            result.status, result.error = "error", str(exc)
        ok = [s for s in per_seed if "error" not in s]
        if ok:
            result.srocc = float(np.median([s["srocc"] for s in ok]))
            result.lcc = float(np.median([s["lcc"] for s in ok]))
            accs = [s["accuracy"] for s in ok if s.get("accuracy") is not None]
            result.accuracy = float(np.median(accs)) if accs else None
        else:
            result.status = "error"
            result.error = "; ".join(s["error"] for s in per_seed if "error" in s)
        results.append(result)

    results.sort(key=lambda r: r.row.label)
    return results


def write_results_csv(results: list[RowResult], path) -> None:
    lines = [",".join(RESULTS_COLUMNS)]
    for r in results:
        lines.append(",".join(cell.replace(",", ";") for cell in r.csv_cells()))
    Path(path).write_text("\n".join(lines) + "\n")
