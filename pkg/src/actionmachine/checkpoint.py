"""Tensor archive: ``manifest.json`` plus one raw little-endian float32 file per tensor."""
from __future__ import annotations

import json
import os
import shutil
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Archive contents do not fit the model they are loaded into."""


def _filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def write_archive(tensors: Mapping[str, np.ndarray | torch.Tensor], directory,
                  extra_files: Mapping[str, str] | None = None) -> Path:
    """Write ``tensors`` into ``directory`` atomically (temp dir, then rename)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = directory.with_name(f".{directory.name}.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    manifest = {}
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.array(value, dtype=_DTYPE, order="C")
        fname = _filename(name)
        (tmp / fname).write_bytes(arr.tobytes())
        manifest[name] = {"shape": list(arr.shape), "dtype": "float32", "file": fname}
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for fname, text in (extra_files or {}).items():
        (tmp / fname).write_text(text, encoding="utf-8")
    if directory.exists():
        old = directory.with_name(f".{directory.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(directory, old)
        os.replace(tmp, directory)
        shutil.rmtree(old)
    else:
        os.replace(tmp, directory)
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"no tensor manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def read_archive(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out = {}
    for name, meta in read_manifest(directory).items():
        if meta.get("dtype", "float32") != "float32":
            raise CheckpointError(f"{name}: unsupported dtype {meta['dtype']}")
        path = directory / meta.get("file", _filename(name))
        raw = np.fromfile(path, dtype=_DTYPE)
        shape = tuple(meta["shape"])
        if raw.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: {path} holds {raw.size} values, manifest says {shape}")
        out[name] = raw.reshape(shape)
    return out


def state_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in module.state_dict().items() if not k.endswith("num_batches_tracked")}


def load_state(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy archive tensors into ``module``; every tensor must match by name and shape."""
    state = module.state_dict()
    expected = {k for k in state if not k.endswith("num_batches_tracked")}
    provided = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    missing, unexpected = expected - provided, provided - expected
    if missing or unexpected:
        raise CheckpointError(f"tensor names differ: missing {sorted(missing)[:5]}, "
                              f"unexpected {sorted(unexpected)[:5]}")
    for k in expected:
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(state[k].shape):
            raise CheckpointError(f"{k}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(state[k].shape)}")
        state[k] = torch.as_tensor(np.array(arr), dtype=state[k].dtype)
    module.load_state_dict(state)
