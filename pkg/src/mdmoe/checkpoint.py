"""Versioned single-file checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"MDMOECK\\0"
    version    u32
    digest     16 bytes  ASCII shape digest of the model config
    meta_len   u32, then meta_len bytes of UTF-8 JSON (model config, stage, counters)
    n_tensors  u32, then per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64, 2 = int64)
        ndim     u8, then ndim x u32 extents
        raw C-order data
    state_len  u64, then state_len bytes of UTF-8 JSON (optimizer step, RNG and data cursors)

Parameters are stored under their own names; optimizer moments under
``optim.m.<name>`` and ``optim.v.<name>``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"MDMOECK\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    stage: str = ""
    tokens_seen: int = 0
    step: int = 0  # global optimizer steps
    stage_step: int = 0
    stage_tokens: int = 0
    optim_step: int = 0
    optim_m: dict[str, np.ndarray] = field(default_factory=dict)
    optim_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    data_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def _write_tensor(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw_name = name.encode()
    buf.write(struct.pack("<H", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_tensor(buf) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode()
    tag, ndim = struct.unpack("<BB", _read_exact(buf, 2))
    if tag not in _DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    dtype = _DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(buf, count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.astype(dtype.newbyteorder("="))


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "stage": ckpt.stage,
        "tokens_seen": ckpt.tokens_seen,
        "step": ckpt.step,
        "stage_step": ckpt.stage_step,
        "stage_tokens": ckpt.stage_tokens,
        "extra": ckpt.extra,
    }
    state = {"optim_step": ckpt.optim_step, "rng_state": ckpt.rng_state, "data_state": ckpt.data_state}
    tensors = dict(ckpt.params)
    tensors.update({f"optim.m.{k}": v for k, v in ckpt.optim_m.items()})
    tensors.update({f"optim.v.{k}": v for k, v in ckpt.optim_v.items()})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(ckpt.model_config.shape_digest().encode("ascii"))
        raw = json.dumps(meta).encode()
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(f, name, arr)
        raw = json.dumps(state).encode()
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version > VERSION:
            raise CheckpointError(f"checkpoint version {version} is newer than supported ({VERSION})")
        digest = _read_exact(f, 16).decode("ascii")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len))
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = dict(_read_tensor(f) for _ in range(n))
        (state_len,) = struct.unpack("<Q", _read_exact(f, 8))
        state = json.loads(_read_exact(f, state_len))
    cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg.shape_digest() != digest:
        raise CheckpointError("config digest does not match the stored model config")
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    m = {k[len("optim.m."):]: v for k, v in tensors.items() if k.startswith("optim.m.")}
    v = {k[len("optim.v."):]: v for k, v in tensors.items() if k.startswith("optim.v.")}
    return Checkpoint(
        model_config=cfg,
        params=params,
        stage=meta["stage"],
        tokens_seen=meta["tokens_seen"],
        step=meta["step"],
        stage_step=meta["stage_step"],
        stage_tokens=meta["stage_tokens"],
        optim_step=state["optim_step"],
        optim_m=m,
        optim_v=v,
        rng_state=state["rng_state"],
        data_state=state["data_state"],
        extra=meta.get("extra", {}),
        version=version,
    )
