"""Checkpoint format: manifest.json + one little-endian f32 blob.

The manifest maps each parameter name to its shape and byte offset into
weights.bin. Loading restores float32 arrays; callers cast as needed.
"""

import json
import os

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"


def save_checkpoint(params, ckpt_dir, extra=None):
    """Write `params` (name -> Tensor or ndarray) into `ckpt_dir`."""
    os.makedirs(ckpt_dir, exist_ok=True)
    manifest = {"params": {}, "extra": extra or {}}
    offset = 0
    blob_path = os.path.join(ckpt_dir, BLOB_NAME)
    with open(blob_path, "wb") as f:
        for name in sorted(params):
            arr = params[name]
            arr = np.asarray(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr)
            flat = arr.astype("<f4").ravel()
            manifest["params"][name] = {"shape": list(arr.shape), "offset": offset}
            f.write(flat.tobytes())
            offset += flat.nbytes
    manifest["total_bytes"] = offset
    with open(os.path.join(ckpt_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(ckpt_dir):
    """Read a checkpoint directory; returns (name -> float32 ndarray, extra)."""
    with open(os.path.join(ckpt_dir, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    blob_path = os.path.join(ckpt_dir, BLOB_NAME)
    blob = open(blob_path, "rb").read()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"checkpoint blob {blob_path} has {len(blob)} bytes, manifest expects {manifest['total_bytes']}")
    out = {}
    for name, meta in manifest["params"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=meta["offset"])
        out[name] = arr.reshape(shape).copy()
    return out, manifest.get("extra", {})
