"""Single-file checkpoints: versioned config plus named tensors and a checksum."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .model import CoReFusionNet, ModelConfig

CHECKPOINT_SCHEMA_VERSION = 1
_META = "meta.json"
_TENSORS = "tensors.npz"


class CheckpointError(Exception):
    pass


def _state_arrays(net: CoReFusionNet) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def tensor_checksum(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(net: CoReFusionNet, path, extra: Optional[dict] = None) -> str:
    """Write ``net`` to ``path``; returns the content checksum."""
    arrays = _state_arrays(net)
    checksum = tensor_checksum(arrays)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": net.config.to_dict(),
        "tensors": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in sorted(arrays.items())},
        "checksum": checksum,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed timestamps keep the archive bytes reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in ((_META, json.dumps(meta, indent=2, sort_keys=True).encode()), (_TENSORS, buf.getvalue())):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)
    return checksum


def load_checkpoint(path) -> Tuple[CoReFusionNet, dict]:
    """Load a checkpoint, verifying schema and checksum. Returns ``(net, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(_META))
            with np.load(io.BytesIO(zf.read(_TENSORS)), allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
    if tensor_checksum(arrays) != meta.get("checksum"):
        raise CheckpointError(f"checksum mismatch in {path}: tensor data is corrupt")
    config = ModelConfig(**meta["model_config"])
    floats = [a for a in arrays.values() if np.issubdtype(a.dtype, np.floating)]
    dtype = torch.from_numpy(floats[0]).dtype if floats else torch.float32
    net = CoReFusionNet(config).to(dtype)
    state = {k: torch.from_numpy(a) for k, a in arrays.items()}
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    net.eval()
    return net, meta


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
