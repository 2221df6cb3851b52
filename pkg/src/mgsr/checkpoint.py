"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MGSR" | u32 version | u32 config_len | config JSON (UTF-8, sorted keys)
    | u32 n_arrays | per array: u32 name_len, name (UTF-8), u32 rank,
      rank x u32 dims, float64 values (little-endian, C order)

Sub-network arrays, when present, are stored under the ``subnet.`` prefix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .divergences import SubNetwork
from .lm import ModelConfig, TransformerLM
from . import autodiff as ad

MAGIC = b"MGSR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(model: TransformerLM, subnet: SubNetwork | None = None) -> bytes:
    header = {"model": model.config.to_dict()}
    arrays = [(name, p.data) for name, p in model.params.items()]
    if subnet is not None:
        header["subnet"] = {"vocab_size": subnet.vocab_size, "hidden": subnet.hidden}
        arrays += [("subnet." + name, p.data) for name, p in subnet.params.items()]
    cfg = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: TransformerLM, subnet: SubNetwork | None, path: str | Path) -> None:
    data = to_bytes(model, subnet)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(data: bytes, config: ModelConfig | None = None) -> tuple[TransformerLM, SubNetwork | None]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an MGSR checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    stored = ModelConfig(**header["model"])
    model = TransformerLM(config or stored, init=False)
    expected = dict(model.param_shapes())
    subnet = None
    if "subnet" in header:
        subnet = SubNetwork(header["subnet"]["vocab_size"], header["subnet"]["hidden"], init="zeros")
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith("subnet."):
            if subnet is None:
                raise CheckpointError(f"unexpected sub-network array {name}")
            key = name[len("subnet."):]
            if subnet.params[key].shape != shape:
                raise CheckpointError(f"shape mismatch for {name}: stored {shape}, expected {subnet.params[key].shape}")
            subnet.params[key] = ad.parameter(arr, name)
            continue
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name}")
        if expected[name] != shape:
            raise CheckpointError(f"shape mismatch for {name}: stored {shape}, expected {expected[name]}")
        model.params[name] = ad.parameter(arr, name)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last array")
    missing = set(expected) - set(model.params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    # keep the canonical ordering
    model.params = {name: model.params[name] for name in expected}
    return model, subnet


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> tuple[TransformerLM, SubNetwork | None]:
    """Load a model (and sub-network if stored). ``config`` forces the expected shapes."""
    return from_bytes(Path(path).read_bytes(), config)
