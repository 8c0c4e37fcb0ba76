"""Patch extraction, label inheritance, flip augmentation, and the
reference-disjoint train/test split.

Patches are cut on a stride grid starting at 0; when (side - P) is not a
multiple of the stride, one extra patch per axis is anchored flush to the
far edge so the image is fully covered.  Every patch inherits the class
index and quality score of its source image unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import DatasetManifest, ImageRecord, load_image


class PatchError(ValueError):
    """Image too small for the requested patch size."""


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class PatchRecord:
    pixels: np.ndarray  # (3, P, P) float32 in [0, 1]
    reference_id: str
    source_path: str
    y: int
    x: int
    distortion_index: int
    severity_level: int
    score: float
    flipped: bool = False


def default_stride(patch_side: int) -> int:
    # neighboring patches overlap by half the patch side (64 px at P=128)
    return max(1, patch_side // 2)


def patch_grid(side: int, patch_side: int, stride: int) -> list[int]:
    """Anchor offsets along one axis, including the flush far-edge anchor."""
    if side < patch_side:
        raise PatchError(f"side {side} smaller than patch size {patch_side}")
    anchors = list(range(0, side - patch_side + 1, stride))
    last = side - patch_side
    if anchors[-1] != last:
        anchors.append(last)
    return anchors


def patch_count(side: int, patch_side: int, stride: int) -> int:
    return len(patch_grid(side, patch_side, stride))


def extract_patches(
    image: np.ndarray,
    patch_side: int = 128,
    stride: int = 64,
    name: str = "image",
) -> list[tuple[int, int, np.ndarray]]:
    """All (y, x, patch) grid cells of an (H, W, 3) image."""
    h, w = image.shape[0], image.shape[1]
    if h < patch_side or w < patch_side:
        raise PatchError(
            f"{name}: image {w}x{h} smaller than patch size {patch_side}"
        )
    out = []
    for y in patch_grid(h, patch_side, stride):
        for x in patch_grid(w, patch_side, stride):
            out.append((y, x, image[y : y + patch_side, x : x + patch_side, :]))
    return out


def record_patches(
    record: ImageRecord,
    manifest: DatasetManifest,
    patch_side: int = 128,
    stride: int | None = None,
) -> list[PatchRecord]:
    """Load the record's image and cut labeled patches from it."""
    if stride is None:
        stride = default_stride(patch_side)
    image = load_image(manifest.resolve(record))
    patches = []
    for y, x, pix in extract_patches(image, patch_side, stride, name=record.path):
        patches.append(
            PatchRecord(
                pixels=np.ascontiguousarray(pix.transpose(2, 0, 1), dtype=np.float32),
                reference_id=record.reference_id,
                source_path=record.path,
                y=y,
                x=x,
                distortion_index=record.distortion_index,
                severity_level=record.severity_level,
                score=record.score,
            )
        )
    return patches


def manifest_patches(
    manifest: DatasetManifest,
    patch_side: int = 128,
    stride: int | None = None,
) -> list[PatchRecord]:
    out = []
    for record in manifest.records:
        out.extend(record_patches(record, manifest, patch_side, stride))
    return out


def hflip(patch: PatchRecord) -> PatchRecord:
    return replace(
        patch,
        pixels=np.ascontiguousarray(patch.pixels[:, :, ::-1]),
        flipped=not patch.flipped,
    )


def hflip_augment(patches: list[PatchRecord], enabled: bool = True) -> list[PatchRecord]:
    """Training-time augmentation: when enabled, every patch also appears
    mirrored left-right with identical labels.  Evaluation never calls this."""
    if not enabled:
        return list(patches)
    return list(patches) + [hflip(p) for p in patches]


def split_by_reference(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest]:
    """Shuffle reference ids by the split seed; the first ceil(f * R) go to
    train, the rest to test, and every record follows its reference."""
    refs = sorted(manifest.reference_ids())
    if len(refs) < 2:
        raise ValueError(
            f"cannot form a reference-disjoint split from {len(refs)} reference(s)"
        )
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(refs))
    n_train = math.ceil(spec.train_fraction * len(refs))
    train_refs = {refs[i] for i in order[:n_train]}
    train_records = [r for r in manifest.records if r.reference_id in train_refs]
    test_records = [r for r in manifest.records if r.reference_id not in train_refs]
    make = lambda recs: DatasetManifest(
        classes=dict(manifest.classes),
        records=recs,
        provenance=dict(manifest.provenance),
        root=manifest.root,
    )
    return make(train_records), make(test_records)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of n patch indices, re-seeded per (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, epoch]))
    return rng.permutation(n)


def iterate_training(
    patches: list[PatchRecord],
    epoch: int = 1,
    seed: int = 0,
    batch_size: int = 1,
):
    """Yield batches (lists of PatchRecords) for one epoch.

    The order is a seeded permutation over all patches; each epoch of the
    same run uses a fresh permutation derived from (seed, epoch).
    """
    if not patches:
        raise ValueError("no patches to iterate")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(patches), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [patches[i] for i in order[start : start + batch_size]]
