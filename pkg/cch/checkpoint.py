# cch/checkpoint.py
"""
Checkpoint container.

Byte layout (all integers little-endian):
    0   8 bytes   magic b"CCHCKPT1"
    8   u32       format version (CHECKPOINT_VERSION)
    12  u64       header length n
    20  n bytes   UTF-8 JSON header, sorted keys, compact separators:
                    step, r1_mode, config, rng_state, meta,
                    tensors: [{name, dtype, shape, offset, nbytes}] sorted by name
    ..  payload   raw little-endian C-order tensor bytes at the listed offsets
    -32 32 bytes  SHA-256 of everything before it

Tensor names are "params/<module>.<state key>" and
"optimizer/<g|d>/<param name>/<exp_avg|exp_avg_sq|step>".
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import torch
from torch import nn

from Constants.variables import CHECKPOINT_VERSION
from pretty_logs import pretty_log
from utils.errors import CheckpointError
from utils.persistence import atomic_write_bytes

MAGIC = b"CCHCKPT1"
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32

# ---------------- Type ---------------- #


@dataclass
class Checkpoint:
    step: int = 0
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    r1_mode: str = "autograd"
    meta: Dict[str, Any] = field(default_factory=dict)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f"params/{k}": v for k, v in self.params.items()}
        out.update({f"optimizer/{k}": v for k, v in self.optimizer.items()})
        return out


# ---------------- Encoding ---------------- #


def _little(array: np.ndarray) -> np.ndarray:
    # np.require keeps 0-d arrays 0-d; ascontiguousarray would promote them to (1,)
    array = np.require(np.asarray(array), requirements="C")
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, array in sorted(ckpt.tensors().items()):
        data = _little(np.asarray(array))
        raw = data.tobytes(order="C")
        index.append({"name": name, "dtype": data.dtype.str, "shape": list(data.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "step": int(ckpt.step),
        "r1_mode": ckpt.r1_mode,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(payload: bytes) -> Checkpoint:
    if len(payload) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint is truncated (shorter than its fixed header)")
    magic, version, header_len = _PREFIX.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    body, digest = payload[:-_DIGEST], payload[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"checkpoint header is unreadable: {e}") from None
    data = body[start + header_len:]

    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        begin, size = entry["offset"], entry["nbytes"]
        if begin + size > len(data):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the payload")
        array = np.frombuffer(data[begin:begin + size], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = array.reshape(entry["shape"]).copy()

    ckpt = Checkpoint(step=int(header["step"]), config=header["config"],
                      rng_state=header["rng_state"], r1_mode=header["r1_mode"],
                      meta=header["meta"])
    for name, array in tensors.items():
        group, _, key = name.partition("/")
        (ckpt.params if group == "params" else ckpt.optimizer)[key] = array
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))
    pretty_log("ckpt", f"step {ckpt.step} saved to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# ---------------- Snapshot / restore ---------------- #

_MOMENTS = ("exp_avg", "exp_avg_sq", "step")


def _module_state(prefix: str, module: nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()}


def _optimizer_state(tag: str, module: nn.Module,
                     optimizer: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    out = {}
    for name, param in module.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        for moment in _MOMENTS:
            value = state[moment]
            array = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            out[f"{tag}/{name}/{moment}"] = array.copy()
    return out


def snapshot(step: int,
             generator: nn.Module,
             discriminator: nn.Module,
             *,
             opt_g: Optional[torch.optim.Optimizer] = None,
             opt_d: Optional[torch.optim.Optimizer] = None,
             config: Optional[Dict[str, Any]] = None,
             rng: Optional[np.random.Generator] = None,
             r1_mode: str = "autograd",
             meta: Optional[Dict[str, Any]] = None) -> Checkpoint:
    params = _module_state("generator", generator)
    params.update(_module_state("discriminator", discriminator))
    optimizer = {}
    if opt_g is not None:
        optimizer.update(_optimizer_state("g", generator, opt_g))
    if opt_d is not None:
        optimizer.update(_optimizer_state("d", discriminator, opt_d))
    return Checkpoint(step=step, params=params, optimizer=optimizer, config=config or {},
                      rng_state=rng.bit_generator.state if rng is not None else {},
                      r1_mode=r1_mode, meta=meta or {})


def _load_module(prefix: str, module: nn.Module, params: Dict[str, np.ndarray]) -> None:
    lead = prefix + "."
    state = {k[len(lead):]: torch.from_numpy(v.copy()) for k, v in params.items()
             if k.startswith(lead)}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not fit the {prefix}: {e}") from None


def _load_optimizer(tag: str, module: nn.Module, optimizer: torch.optim.Optimizer,
                    moments: Dict[str, np.ndarray]) -> None:
    for name, param in module.named_parameters():
        keys = [f"{tag}/{name}/{m}" for m in _MOMENTS]
        if not all(k in moments for k in keys):
            continue
        optimizer.state[param] = {m: torch.from_numpy(moments[k].copy())
                                  for m, k in zip(_MOMENTS, keys)}


def restore(ckpt: Checkpoint,
            generator: nn.Module,
            discriminator: Optional[nn.Module] = None,
            *,
            opt_g: Optional[torch.optim.Optimizer] = None,
            opt_d: Optional[torch.optim.Optimizer] = None,
            rng: Optional[np.random.Generator] = None) -> None:
    """Load parameters, optimizer moments and RNG state in place."""
    _load_module("generator", generator, ckpt.params)
    if discriminator is not None:
        _load_module("discriminator", discriminator, ckpt.params)
    if opt_g is not None:
        _load_optimizer("g", generator, opt_g, ckpt.optimizer)
    if opt_d is not None and discriminator is not None:
        _load_optimizer("d", discriminator, opt_d, ckpt.optimizer)
    if rng is not None and ckpt.rng_state:
        rng.bit_generator.state = ckpt.rng_state
