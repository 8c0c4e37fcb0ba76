"""Dataset construction and the manifest file format.

A dataset is a directory of lossless RGB images plus a manifest: a comment
header holding the class dictionary and generator provenance as JSON,
followed by one CSV record per distorted image.  Record paths are relative
to the manifest location, so a rebuild with the same seed is byte-identical
wherever it lands.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import distortions

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.csv"
CSV_HEADER = "path,reference_id,distortion_index,severity_level,score"


class DatasetError(ValueError):
    """Unusable corpus or manifest."""


@dataclass
class ImageRecord:
    """One distorted image with its inherited labels."""

    path: str
    reference_id: str
    distortion_index: int  # 1-based index into the class dictionary
    severity_level: int
    score: float


@dataclass
class DatasetManifest:
    classes: dict[int, str]
    records: list[ImageRecord]
    provenance: dict = field(default_factory=dict)
    root: Path | None = None

    def class_name(self, index: int) -> str:
        return self.classes[index]

    def reference_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.reference_id, None)
        return list(seen)

    def resolve(self, record: ImageRecord) -> Path:
        if self.root is None:
            return Path(record.path)
        return Path(self.root) / record.path


# -- image IO -----------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode to float32 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


# -- manifest IO ----------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [
        f"# mtiqa-manifest v{MANIFEST_VERSION}",
        "# classes: " + json.dumps({str(k): v for k, v in sorted(manifest.classes.items())}, sort_keys=True),
        "# provenance: " + json.dumps(manifest.provenance, sort_keys=True),
        CSV_HEADER,
    ]
    for r in manifest.records:
        lines.append(
            f"{r.path},{r.reference_id},{r.distortion_index},{r.severity_level},{r.score!r}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    classes: dict[int, str] = {}
    provenance: dict = {}
    records: list[ImageRecord] = []
    header_seen = False
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("# classes: "):
            classes = {int(k): v for k, v in json.loads(line[len("# classes: "):]).items()}
            continue
        if line.startswith("# provenance: "):
            provenance = json.loads(line[len("# provenance: "):])
            continue
        if line.startswith("#"):
            continue
        if line == CSV_HEADER:
            header_seen = True
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DatasetError(f"{path}: malformed record line: {line!r}")
        records.append(
            ImageRecord(
                path=parts[0],
                reference_id=parts[1],
                distortion_index=int(parts[2]),
                severity_level=int(parts[3]),
                score=float(parts[4]),
            )
        )
    if not header_seen or not classes:
        raise DatasetError(f"{path}: missing manifest header")
    return DatasetManifest(classes=classes, records=records, provenance=provenance, root=path.parent)


# -- synthetic reference corpus -------------------------------------------------


def make_corpus(out_dir, count: int = 24, side: int = 128, seed: int = 0) -> list[Path]:
    """Generate textured reference images (smooth fields, edges, gratings)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, i]))
        img = _reference_texture(rng, side)
        p = out_dir / f"ref{i:03d}.png"
        save_image(p, img)
        paths.append(p)
    return paths


def _reference_texture(rng: np.random.Generator, side: int) -> np.ndarray:
    from scipy import ndimage

    img = np.zeros((side, side, 3))
    for sigma, weight in ((2.0, 0.5), (6.0, 0.3), (12.0, 0.2)):
        noise = rng.standard_normal((side, side, 3))
        img += weight * ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0))
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)

    # hard-edged rectangles give blur/jpeg something to bite on
    for _ in range(rng.integers(5, 9)):
        h = int(rng.integers(side // 10, side // 2))
        w = int(rng.integers(side // 10, side // 2))
        y = int(rng.integers(0, side - h))
        x = int(rng.integers(0, side - w))
        color = rng.random(3)
        alpha = 0.55 + 0.45 * rng.random()
        img[y : y + h, x : x + w, :] *= 1 - alpha
        img[y : y + h, x : x + w, :] += alpha * color

    # one oriented grating patch for mid-frequency content
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(4.0, 12.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / side + phase)
    gh = int(rng.integers(side // 4, side // 2))
    gw = int(rng.integers(side // 4, side // 2))
    gy = int(rng.integers(0, side - gh))
    gx = int(rng.integers(0, side - gw))
    img[gy : gy + gh, gx : gx + gw, :] = (
        0.5 * img[gy : gy + gh, gx : gx + gw, :] + 0.5 * wave[gy : gy + gh, gx : gx + gw, None]
    )

    return 0.05 + 0.9 * np.clip(img, 0.0, 1.0)


# -- dataset build --------------------------------------------------------------


def list_corpus(corpus_dir) -> list[Path]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise DatasetError(f"corpus directory not found: {corpus_dir}")
    exts = {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"}
    paths = sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in exts)
    if len(paths) < 2:
        raise DatasetError(f"corpus {corpus_dir} needs at least 2 reference images, found {len(paths)}")
    return paths


def build_dataset(
    corpus_dir,
    types: list[str],
    levels: int = 4,
    seed: int = 0,
    out_dir=None,
) -> DatasetManifest:
    """Distort every corpus image at every (type, level); write images and
    manifest under `out_dir` and return the manifest.

    Fully reproducible: the per-record RNG stream depends only on
    (seed, reference_id, type, level).
    """
    if not types:
        raise DatasetError("no distortion types requested")
    for t in types:
        distortions.split_composite(t)
    if levels < 1:
        raise DatasetError(f"levels must be >= 1, got {levels}")
    if out_dir is None:
        raise DatasetError("out_dir is required")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    corpus = list_corpus(corpus_dir)
    classes = {i + 1: name for i, name in enumerate(types)}

    records = []
    for ref_path in corpus:
        ref_id = ref_path.stem
        image = load_image(ref_path).astype(np.float64)
        for c, name in sorted(classes.items()):
            for level in range(1, levels + 1):
                rng_seed = distortions.record_seed(seed, ref_id, c, level)
                distorted = distortions.apply_distortion(image, name, level, seed=rng_seed)
                fname = f"{ref_id}__{name.replace('+', '-')}__l{level}.png"
                save_image(image_dir / fname, distorted)
                records.append(
                    ImageRecord(
                        path=f"images/{fname}",
                        reference_id=ref_id,
                        distortion_index=c,
                        severity_level=level,
                        score=distortions.severity_to_score(name, level, levels),
                    )
                )
    records.sort(key=lambda r: (r.reference_id, r.distortion_index, r.severity_level))

    manifest = DatasetManifest(
        classes=classes,
        records=records,
        provenance={
            "seed": int(seed),
            "levels": int(levels),
            "types": list(types),
            "references": len(corpus),
            "parameter_tables": {
                p: distortions.PARAMETER_TABLES[p]
                for t in types
                for p in distortions.split_composite(t)
            },
        },
        root=out_dir,
    )
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest
