"""Checkpoint files: a JSON header followed by raw little-endian arrays.

Layout::

    AVBCKPT <version>\\n
    <header byte length>\\n
    <header JSON, sorted keys>
    <array payload>

The header lists every array as ``{name, shape, dtype, offset}``; offsets are
relative to the start of the payload. Serialisation is byte-deterministic, so two
identical training runs produce identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BinauralUNet, ModelConfig

MAGIC = b"AVBCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.model_config.hash()


def model_arrays(model: BinauralUNet) -> dict[str, np.ndarray]:
    out = {f"param/{n}": p.data for n, p in model.named_parameters()}
    out.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    return out


def param_names(model: BinauralUNet) -> dict[int, str]:
    return {id(p): n for n, p in model.named_parameters()}


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float64:
        return "<f8"
    if a.dtype == np.float32:
        return "<f4"
    raise CheckpointError(f"unsupported array dtype {a.dtype}")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    manifest, chunks, offset = [], [], 0
    for name in ckpt.arrays:
        a = np.ascontiguousarray(ckpt.arrays[name])
        tag = _dtype_tag(a)
        blob = a.astype(tag).tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": tag, "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": ckpt.config_hash,
        "model_config": ckpt.model_config.to_dict(),
        "arrays": manifest,
        "payload_bytes": offset,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        f.write(str(len(head)).encode() + b"\n")
        f.write(head)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        first = f.readline().rstrip(b"\n").split(b" ")
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(first[1]) != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {int(first[1])}, expected {FORMAT_VERSION}")
        n = int(f.readline())
        header = json.loads(f.read(n))
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    cfg = ModelConfig(**header["model_config"])
    if cfg.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch ({cfg.hash()} != {header['config_hash']})")
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(cfg, arrays, header.get("meta", {}))


def load_into(model: BinauralUNet, ckpt: Checkpoint) -> BinauralUNet:
    """Copy parameters and buffers into ``model``; shapes and names must match."""
    if model.cfg.hash() != ckpt.config_hash:
        raise CheckpointError(
            f"model config hash {model.cfg.hash()} does not match checkpoint {ckpt.config_hash}"
        )
    for name, p in model.named_parameters():
        src = ckpt.arrays.get(f"param/{name}")
        if src is None or src.shape != p.shape:
            raise CheckpointError(f"checkpoint parameter {name} missing or misshapen")
        p.data = src.astype(p.dtype, copy=True)
    targets = dict(model.named_buffers())
    for name, buf in targets.items():
        src = ckpt.arrays.get(f"buffer/{name}")
        if src is None or src.shape != buf.shape:
            raise CheckpointError(f"checkpoint buffer {name} missing or misshapen")
        buf[...] = src
    return model


def model_from_checkpoint(path: str | Path, expected_hash: str | None = None) -> BinauralUNet:
    ckpt = load_checkpoint(path)
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        raise CheckpointError(
            f"{path}: checkpoint config hash {ckpt.config_hash} differs from run config {expected_hash}"
        )
    dtype = np.float64 if any(a.dtype == np.float64 for a in ckpt.arrays.values()) else np.float32
    model = BinauralUNet(ckpt.model_config, np.random.default_rng(0), dtype=dtype)
    load_into(model, ckpt)
    return model.eval()
