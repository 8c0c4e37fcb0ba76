"""Synthetic image distortions with graded severity levels.

Each distortion has a severity table indexed 1..L with strictly monotone
parameter progression, plus a zero-strength "level 0" probe (identity for
blur/noise/contrast/block).  Composite distortions are named "a+b" and apply
the parts left to right at the same level.

Images are RGB float arrays of shape (H, W, 3) with values in [0, 1]; every
distortion clips its output back to that range.
"""

from __future__ import annotations

import zlib

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage


class DistortionError(ValueError):
    """Unknown distortion type or severity level."""


# severity level -> strength parameter, levels 1..4; index 0 is the
# zero-strength probe
PARAMETER_TABLES: dict[str, list[float]] = {
    "gaussian_blur": [0.0, 0.5, 1.0, 2.0, 4.0],         # kernel sigma
    "white_noise": [0.0, 0.02, 0.05, 0.1, 0.2],          # additive std on [0,1]
    "jpeg": [1.0, 0.9, 0.7, 0.4, 0.15],                  # quality fraction
    "contrast_change": [1.0, 0.8, 0.6, 0.4, 0.25],       # gain around 0.5
    "block_corruption": [0.0, 0.02, 0.05, 0.1, 0.2],     # fraction of 16x16 blocks
}

DISTORTION_NAMES = tuple(PARAMETER_TABLES)

# ITU-T T.81 luminance quantization table
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def split_composite(name: str) -> list[str]:
    """Component list of a distortion name; composites use '+' separators."""
    parts = name.split("+")
    for part in parts:
        if part not in PARAMETER_TABLES:
            raise DistortionError(f"unknown distortion type {part!r}")
    return parts


def num_levels(name: str) -> int:
    parts = split_composite(name)
    return len(PARAMETER_TABLES[parts[0]]) - 1


def strength_parameter(name: str, level: int) -> float:
    """Severity-table lookup for a non-composite distortion; level 0 is the probe."""
    if name not in PARAMETER_TABLES:
        raise DistortionError(f"unknown distortion type {name!r}")
    table = PARAMETER_TABLES[name]
    if not isinstance(level, (int, np.integer)) or not 0 <= level < len(table):
        raise DistortionError(
            f"level {level!r} out of range 0..{len(table) - 1} for {name!r}"
        )
    return table[level]


def severity_to_score(name: str, level: int, levels: int = 4) -> float:
    """DMOS-like proxy ground truth: 100 * level / L, higher = worse."""
    split_composite(name)
    if not 0 <= level <= levels:
        raise DistortionError(f"level {level!r} out of range 0..{levels} for {name!r}")
    return 100.0 * level / levels


def record_seed(base_seed: int, reference_id: str, type_index: int, level: int) -> np.random.SeedSequence:
    """Stable per-record seed so dataset builds are order-independent."""
    ref_hash = zlib.crc32(reference_id.encode("utf-8"))
    return np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, ref_hash, type_index, level])


def apply_distortion(image: np.ndarray, name: str, level: int, seed=0) -> np.ndarray:
    """Apply `name` at severity `level`; deterministic in (image, name, level, seed)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    rng = np.random.default_rng(seed)
    out = image
    for part in split_composite(name):
        param = strength_parameter(part, level)
        out = _APPLY[part](out, param, rng)
    return np.clip(out, 0.0, 1.0)


# -- individual distortions -------------------------------------------------


def gaussian_blur_kernel(sigma: float) -> np.ndarray:
    """Unit-sum sampled Gaussian; radius ceil(3*sigma), so sigma 0 is a 1x1
    identity kernel."""
    radius = int(np.ceil(3.0 * sigma))
    if radius == 0:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(image: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma == 0.0:
        return image.copy()
    k = gaussian_blur_kernel(sigma)
    out = ndimage.convolve1d(image, k, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, k, axis=1, mode="reflect")
    return out


def _white_noise(image: np.ndarray, std: float, rng) -> np.ndarray:
    if std == 0.0:
        return image.copy()
    return image + rng.normal(0.0, std, size=image.shape)


def jpeg_quant_table(quality: float) -> np.ndarray:
    """Luminance table scaled libjpeg-style by a quality fraction in (0, 1].

    AC steps are clamped to [1, 255]; the DC coefficient is kept exact
    (step 0 marks passthrough) so uniform regions survive the round trip.
    """
    q = int(round(np.clip(quality, 0.01, 1.0) * 100))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    steps = np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    steps = np.clip(steps, 1.0, 255.0)
    steps[0, 0] = 0.0
    return steps


def _jpeg(image: np.ndarray, quality: float, rng) -> np.ndarray:
    steps = jpeg_quant_table(quality)
    h, w, _ = image.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0 - 128.0
    hh, ww = x.shape[0], x.shape[1]
    out = np.empty_like(x)
    safe = np.where(steps > 0, steps, 1.0)
    for c in range(3):
        blocks = x[:, :, c].reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        coef = sp_fft.dctn(blocks, type=2, norm="ortho", axes=(2, 3))
        quant = np.round(coef / safe) * safe
        quant[:, :, 0, 0] = coef[:, :, 0, 0]
        rec = sp_fft.idctn(quant, type=2, norm="ortho", axes=(2, 3))
        out[:, :, c] = rec.transpose(0, 2, 1, 3).reshape(hh, ww)
    return (out[:h, :w, :] + 128.0) / 255.0


def _contrast(image: np.ndarray, gain: float, rng) -> np.ndarray:
    if gain == 1.0:
        return image.copy()
    return 0.5 + gain * (image - 0.5)


def _block_corruption(image: np.ndarray, fraction: float, rng) -> np.ndarray:
    if fraction == 0.0:
        return image.copy()
    h, w, _ = image.shape
    nby, nbx = (h + 15) // 16, (w + 15) // 16
    total = nby * nbx
    count = max(1, int(round(fraction * total)))
    chosen = rng.choice(total, size=min(count, total), replace=False)
    colors = rng.random((len(chosen), 3))
    out = image.copy()
    for idx, color in zip(chosen, colors):
        by, bx = divmod(int(idx), nbx)
        out[by * 16 : (by + 1) * 16, bx * 16 : (bx + 1) * 16, :] = color
    return out


_APPLY = {
    "gaussian_blur": _blur,
    "white_noise": _white_noise,
    "jpeg": _jpeg,
    "contrast_change": _contrast,
    "block_corruption": _block_corruption,
}
