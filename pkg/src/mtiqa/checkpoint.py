"""Versioned checkpoint container.

Layout: an 8-byte magic, a 4-byte little-endian header length, a JSON header
(format version, model config, parameter manifest, optional training
section), then raw little-endian float32 parameter data in manifest order.
When a training section is present its optimizer moment tensors follow the
parameters, also as little-endian float32 in their own manifest order.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np
import torch

from .model import ModelConfig, MultiTaskIQANet, build_model

MAGIC = b"IQCKPT1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).numpy()
    return np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()


def save_checkpoint(
    path,
    model: MultiTaskIQANet,
    training: Optional[dict] = None,
    moments: Optional[dict[str, dict[str, torch.Tensor]]] = None,
) -> None:
    """Write model parameters (and optionally training state) to `path`.

    `training` is a JSON-serializable dict (epoch counter, seeds, class
    dictionary, loss history, ...).  `moments` maps parameter name to a dict
    of named slot tensors (e.g. {"m": ..., "v": ...}) whose shapes match the
    parameter.
    """
    manifest = []
    payload = bytearray()
    for name, p in model.named_parameters():
        manifest.append({"name": name, "shape": list(p.shape)})
        payload += _tensor_bytes(p)

    header: dict = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "parameters": manifest,
        "training": None,
    }
    if training is not None or moments is not None:
        moment_manifest = []
        if moments:
            for pname in sorted(moments):
                for slot in sorted(moments[pname]):
                    t = moments[pname][slot]
                    moment_manifest.append(
                        {"name": pname, "slot": slot, "shape": list(t.shape)}
                    )
                    payload += _tensor_bytes(t)
        header["training"] = dict(training or {})
        header["training"]["moments"] = moment_manifest

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[tuple[str, str], np.ndarray]]:
    """Return (header, params-by-name, moments-by-(name, slot))."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')!r}"
            )
        params = {}
        for entry in header["parameters"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"{path}: truncated parameter data for {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        moments = {}
        training = header.get("training")
        if training:
            for entry in training.get("moments", []):
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                raw = fh.read(4 * n)
                if len(raw) != 4 * n:
                    raise CheckpointError(
                        f"{path}: truncated moment data for {entry['name']}/{entry['slot']}"
                    )
                moments[(entry["name"], entry["slot"])] = (
                    np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                )
    return header, params, moments


def load_model(path) -> tuple[MultiTaskIQANet, Optional[dict]]:
    """Rebuild the model from a checkpoint; returns (model, training section)."""
    header, params, _ = read_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    model = build_model(config)
    _assign(model, params, list(params.keys()), path)
    return model, header.get("training")


def load_moments(path) -> dict[str, dict[str, torch.Tensor]]:
    _, _, raw = read_checkpoint(path)
    moments: dict[str, dict[str, torch.Tensor]] = {}
    for (name, slot), arr in raw.items():
        moments.setdefault(name, {})[slot] = torch.from_numpy(arr)
    return moments


def import_backbone_weights(model: MultiTaskIQANet, path) -> list[str]:
    """Load only backbone tensors from `path` into `model`.

    The container may hold a full model or a backbone-only subset.  Every
    shape mismatch is collected and reported in one error.
    """
    _, params, _ = read_checkpoint(path)
    names = [n for n in model.backbone_parameter_names() if n in params]
    if not names:
        raise CheckpointError(f"{path}: no backbone parameters found in checkpoint")
    _assign(model, params, names, path)
    return names


def _assign(model: MultiTaskIQANet, params: dict[str, np.ndarray], names, path) -> None:
    own = dict(model.named_parameters())
    mismatches = []
    for name in names:
        if name not in own:
            mismatches.append(f"{name}: not present in model")
            continue
        want = tuple(own[name].shape)
        got = tuple(params[name].shape)
        if want != got:
            mismatches.append(f"{name}: checkpoint {got} vs model {want}")
    if mismatches:
        raise CheckpointError(
            f"{path}: shape mismatch for {len(mismatches)} tensor(s):\n  "
            + "\n  ".join(mismatches)
        )
    with torch.no_grad():
        for name in names:
            own[name].copy_(torch.from_numpy(params[name]))
