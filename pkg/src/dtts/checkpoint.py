"""Binary checkpoint format.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header (sorted keys), then every tensor as little-endian float32 in header
order, then a SHA-256 digest of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import CrossLingualTTS, ModelConfig

MAGIC = b"DTTSCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


# settings that may change between a run and its resumption without changing the trajectory
RESUMABLE_KEYS = frozenset({"out", "steps", "ckpt_every", "valid_every", "threads", "cache", "manifest"})


def _tensors(trainer) -> list[tuple[str, torch.Tensor]]:
    out = []
    named = list(trainer.model.named_parameters())
    for name, p in named:
        out.append((f"param/{name}", p.detach()))
    for name, p in named:
        state = trainer.optimizer.state.get(p)
        if state:
            out.append((f"adam_m/{name}", state["exp_avg"]))
            out.append((f"adam_v/{name}", state["exp_avg_sq"]))
    for name, p in named:
        if p.grad is not None:
            out.append((f"grad/{name}", p.grad))
    return out


def encode(meta: dict, tensors: list[tuple[str, torch.Tensor]]) -> bytes:
    entries = []
    blobs = []
    for name, t in tensors:
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    start = _PREFIX.size
    header = json.loads(body[start:start + header_len])
    offset = start + header_len
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(body):
            raise CheckpointError("checkpoint is truncated")
        arrays[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f4").reshape(entry["shape"]).copy()
        offset = end
    if offset != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    return header["meta"], arrays


def trainer_meta(trainer) -> dict:
    return {
        "step": trainer.step,
        "optimizer_steps": trainer.optimizer_steps,
        "adam_steps": {name: int(st["step"]) for name, p in trainer.model.named_parameters()
                       if (st := trainer.optimizer.state.get(p))},
        "skipped": trainer.skipped,
        "model": trainer.model.cfg.to_dict(),
        # the run directory is where state is written, not part of it
        "train": {k: v for k, v in trainer.cfg.to_dict().items() if k != "out"},
        "vocab": list(trainer.vocab),
    }


def save(trainer, path: str | Path) -> bytes:
    raw = encode(trainer_meta(trainer), _tensors(trainer))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    tmp.replace(path)
    return raw


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def load_model(path: str | Path) -> tuple[CrossLingualTTS, dict]:
    """Model in float32 with restored parameters, plus the checkpoint metadata."""
    meta, arrays = read(path)
    model = CrossLingualTTS(ModelConfig.from_dict(meta["model"]))
    _assign_params(model, arrays)
    return model, meta


def _assign_params(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    missing = [n for n in named if f"param/{n}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:3]}")
    with torch.no_grad():
        for name, p in named.items():
            src = arrays[f"param/{name}"]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: shape {src.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(src))


def restore(trainer, path: str | Path) -> None:
    """Load parameters, AdamW moments, accumulated gradients and the step counter into ``trainer``.

    The file is fully read and verified before anything is modified.
    """
    meta, arrays = read(path)
    if meta["model"] != trainer.model.cfg.to_dict():
        raise CheckpointError("checkpoint model configuration differs from the trainer's")
    ours = trainer.cfg.to_dict()
    changed = sorted(k for k, v in meta["train"].items() if k not in RESUMABLE_KEYS and ours.get(k) != v)
    if changed:
        raise CheckpointError(f"training settings differ from the checkpoint's: {', '.join(changed)}")
    named = dict(trainer.model.named_parameters())
    for key in arrays:
        kind, name = key.split("/", 1)
        if name not in named:
            raise CheckpointError(f"unknown tensor {key}")
    _assign_params(trainer.model, arrays)
    trainer.optimizer.state.clear()
    n_opt = int(meta["optimizer_steps"])
    with torch.no_grad():
        for name, p in named.items():
            if f"adam_m/{name}" in arrays:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(float(meta["adam_steps"][name])),
                    "exp_avg": torch.from_numpy(arrays[f"adam_m/{name}"]).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam_v/{name}"]).to(p.dtype),
                }
            grad = arrays.get(f"grad/{name}")
            p.grad = None if grad is None else torch.from_numpy(grad).to(p.dtype)
    trainer.step = int(meta["step"])
    trainer.optimizer_steps = n_opt
    trainer.skipped = int(meta.get("skipped", 0))
