"""Versioned tensor containers (safetensors files with a JSON metadata block)."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .errors import ConfigError, VersionMismatchError

CHECKPOINT_FORMAT = 1
_META_KEY = "signface"


def save_checkpoint(path, tensors: dict, kind: str, meta: dict) -> str:
    """Write atomically and return the checkpoint id (sha256 of the file)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": CHECKPOINT_FORMAT, "kind": kind, **meta}
    tensors = {k: v.detach().contiguous().cpu() for k, v in sorted(tensors.items())}
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata={_META_KEY: json.dumps(header, sort_keys=True)})
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return checkpoint_id(path)


def load_checkpoint(path, kind: str):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}")
    try:
        tensors = load_file(str(path))
        with open(path, "rb") as fh:
            n = int.from_bytes(fh.read(8), "little")
            raw = json.loads(fh.read(n))
    except (SafetensorError, OSError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    meta = json.loads(raw.get("__metadata__", {}).get(_META_KEY, "{}"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise VersionMismatchError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    if meta.get("kind") != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    return tensors, meta


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_to_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def tensors_to_state(prefix: str, tensors: dict) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
