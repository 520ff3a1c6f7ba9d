"""Checkpoint serialization.

A checkpoint is two files sharing a stem: `<stem>.json` holds the manifest
(tensor names, shapes, byte offsets, stage tag, config snapshot, seed,
step) and `<stem>.bin` holds every tensor as little-endian float32 in
manifest order.  Saving the same parameters twice produces byte-identical
files; loading restores bit-identical float32 weights.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig


def _stem(path) -> str:
    path = os.fspath(path)
    for suffix in (".json", ".bin"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_checkpoint(path, params: dict, stage: str, config: TrainConfig,
                    step: int) -> tuple:
    stem = _stem(path)
    names = sorted(params)
    tensors = []
    blob = bytearray()
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = data.tobytes()
        tensors.append({"name": name, "shape": list(data.shape),
                        "offset": len(blob), "bytes": len(raw)})
        blob.extend(raw)
    manifest = {
        "stage": stage,
        "seed": config.seed,
        "step": int(step),
        "config": asdict(config),
        "blob_bytes": len(blob),
        "tensors": tensors,
    }
    json_path, bin_path = stem + ".json", stem + ".bin"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(bin_path, "wb") as fh:
        fh.write(bytes(blob))
    return json_path, bin_path


def load_checkpoint(path) -> tuple:
    """Returns (params, manifest); weights are float32 Tensors."""
    stem = _stem(path)
    try:
        with open(stem + ".json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(stem + ".bin", "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"checkpoint incomplete at {stem!r}: {exc}") \
            from None
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"blob length {len(blob)} does not match manifest "
                         f"{manifest['blob_bytes']}")
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=entry["offset"])
        params[entry["name"]] = Tensor(
            arr.reshape(shape).astype(np.float32, copy=True),
            requires_grad=True)
    return params, manifest


def checkpoint_stage(path) -> str | None:
    """Stage tag of a checkpoint, or None when it does not exist."""
    stem = _stem(path)
    if not (os.path.exists(stem + ".json") and os.path.exists(stem + ".bin")):
        return None
    with open(stem + ".json", encoding="utf-8") as fh:
        return json.load(fh)["stage"]
