"""Checkpoint container.

Layout (all integers little-endian)::

    b"SSMXCKPT"            8-byte magic
    u32 format version
    u64 header length
    header                 UTF-8 JSON, sorted keys, no whitespace
    tensor data            raw C-order bytes, concatenated in header order

The header records the model config, step count, free-form metadata, and for
each tensor its name, dtype, shape, offset and byte length. Serialization is
deterministic, so loading and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ssmax.model import ModelConfig, Transformer

MAGIC = b"SSMXCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """The file was written by a different format version and needs migrating."""


_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]
    optimizer: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Transformer, optimizer_state=None, step: int = 0, meta=None) -> "Checkpoint":
        return cls(
            model.config,
            {k: v.detach().clone() for k, v in model.state_dict().items()},
            {n: {k: v.detach().clone() for k, v in st.items()} for n, st in (optimizer_state or {}).items()},
            step,
            dict(meta or {}),
        )

    def build_model(self) -> Transformer:
        dtype = next(iter(self.tensors.values())).dtype
        model = Transformer(self.config, seed=None).to(dtype)
        model.load_state_dict(self.tensors, strict=True)
        return model


def _flat_tensors(ckpt: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    items = [("model/" + k, v) for k, v in sorted(ckpt.tensors.items())]
    for name in sorted(ckpt.optimizer):
        for slot in sorted(ckpt.optimizer[name]):
            items.append((f"optim/{name}/{slot}", ckpt.optimizer[name][slot]))
    return items


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in _flat_tensors(ckpt):
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "meta": ckpt.meta,
        "step": int(ckpt.step),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION}); migrate it first"
        )
    header = json.loads(buf[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    tensors, optim = {}, {}
    for e in header["tensors"]:
        raw = buf[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated data for {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"]).copy()
        t = torch.from_numpy(arr.astype(np.dtype(e["dtype"])))
        kind, _, rest = e["name"].partition("/")
        if kind == "model":
            tensors[rest] = t
        else:
            pname, _, slot = rest.rpartition("/")
            optim.setdefault(pname, {})[slot] = t
    return Checkpoint(ModelConfig(**header["config"]), tensors, optim, header["step"], header["meta"])


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
