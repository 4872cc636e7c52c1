"""Tensor containers: safetensors files with a JSON header in the metadata block."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

HEADER_KEY = "dcppd_header"


class ArtifactError(ValueError):
    pass


def save_tensors(path: os.PathLike, tensors: dict, header: dict) -> None:
    arrays = {k: np.ascontiguousarray(np.asarray(v)) for k, v in tensors.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(arrays, str(path), metadata={HEADER_KEY: json.dumps(header, sort_keys=True)})


def load_tensors(path: os.PathLike) -> tuple[dict, dict]:
    path = str(path)
    if not os.path.exists(path):
        raise ArtifactError(f"no such artifact: {path}")
    with safe_open(path, framework="numpy") as f:
        meta = f.metadata() or {}
    if HEADER_KEY not in meta:
        raise ArtifactError(f"{path} has no header block")
    return load_file(path), json.loads(meta[HEADER_KEY])


def state_dict_to_numpy(state: dict) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def numpy_to_state_dict(arrays: dict) -> dict:
    import torch

    return {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}


def tensor_checksum(arrays: dict) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = arrays[name]
        if hasattr(a, "detach"):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a)
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
