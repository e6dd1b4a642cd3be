"""Checkpoint files: ``MTTU1`` magic, JSON manifest, little-endian float32 payload.

Layout::

    b"MTTU1"  | uint64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every tensor with its shape, dtype and byte offset into the
payload. Parameters and optimizer moments are listed separately.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..model import ModelConfig, MultiTaskTokenNet
from .optim import Adam

MAGIC = b"MTTU1"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint."""


def _pack(named: dict[str, np.ndarray], offset: int, chunks: list[bytes]) -> tuple[list[dict], int]:
    entries = []
    for name, array in named.items():
        raw = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, offset


def save_checkpoint(path, model: MultiTaskTokenNet, optimizer: Adam | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    chunks: list[bytes] = []
    params, offset = _pack(model.state_dict(), 0, chunks)
    manifest = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "parameters": params,
        "extra": extra or {},
    }
    if optimizer is not None:
        moments = {f"m/{k}": v for k, v in optimizer.m.items()}
        moments.update({f"v/{k}": v for k, v in optimizer.v.items()})
        entries, offset = _pack(moments, offset, chunks)
        manifest["optimizer"] = {"step": optimizer.step_count, "beta1": optimizer.beta1,
                                 "beta2": optimizer.beta2, "eps": optimizer.eps, "tensors": entries}
    manifest["payload_bytes"] = offset
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Parse and validate a checkpoint; returns (manifest, parameters, optimizer tensors)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"{path}: no such checkpoint")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    start = len(MAGIC) + 8
    if len(blob) < start:
        raise CheckpointFormatError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC):start])
    try:
        manifest = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {manifest.get('version')}")
    payload = blob[start + header_len :]
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointFormatError(
            f"{path}: payload has {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")

    def unpack(entries):
        out = {}
        for e in entries:
            chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
            out[e["name"]] = np.frombuffer(chunk, dtype=_DTYPE).reshape(e["shape"]).astype(np.float64)
        return out

    params = unpack(manifest["parameters"])
    optim = unpack(manifest["optimizer"]["tensors"]) if "optimizer" in manifest else {}
    return manifest, params, optim


def load_checkpoint(path) -> tuple[MultiTaskTokenNet, Adam | None, dict]:
    manifest, params, optim = read_checkpoint(path)
    model = MultiTaskTokenNet(ModelConfig(**manifest["model_config"]))
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(str(exc)) from exc
    optimizer = None
    if "optimizer" in manifest:
        meta = manifest["optimizer"]
        optimizer = Adam(model.named_parameters(), meta["beta1"], meta["beta2"], meta["eps"])
        optimizer.load_state({
            "step": meta["step"],
            "m": {k[2:]: v for k, v in optim.items() if k.startswith("m/")},
            "v": {k[2:]: v for k, v in optim.items() if k.startswith("v/")},
        })
    return model, optimizer, manifest
