"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DFIT" | u32 version | u64 header_len | header (UTF-8 JSON)
    then per tensor: u32 name_len | name | u32 rank | rank x u64 dims
                     | u32 crc32(data) | data (little-endian f32)

The JSON header holds the network config snapshot, training step, RNG state,
the tensor count and free-form metadata. Tensor names prefixed ``ema.`` hold
the optional EMA shadow weights.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .networks import DenoisingNetwork, build_network, config_from_dict, config_to_dict
from .tensor.core import ContractError

MAGIC = b"DFIT"
VERSION = 1


class CheckpointError(ContractError):
    """Malformed, truncated, corrupted or incompatible checkpoint."""


@dataclass
class Checkpoint:
    network: DenoisingNetwork
    step: int = 0
    rng_state: list | None = None
    ema: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _encode(network: DenoisingNetwork, step: int, rng_state, ema: dict | None, meta: dict | None) -> bytes:
    tensors = list(network.state_dict().items())
    tensors += [(f"ema.{k}", v) for k, v in (ema or {}).items()]
    header = {
        "config": config_to_dict(network.config),
        "step": int(step),
        "rng_state": [int(w) for w in rng_state] if rng_state is not None else None,
        "num_tensors": len(tensors),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<I", zlib.crc32(data)))
        parts.append(data)
    return b"".join(parts)


def save_checkpoint(path, network: DenoisingNetwork, step: int = 0, rng_state=None,
                    ema: dict | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = _encode(network, step, rng_state, ema, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a file into ``(header, {name: float32 array})`` with full validation."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a DFIT checkpoint")
    version, hlen = r.unpack("<IQ", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if not isinstance(header, dict) or "config" not in header or "num_tensors" not in header:
        raise CheckpointError("corrupt checkpoint header: missing fields")
    tensors = {}
    for _ in range(int(header["num_tensors"])):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I", f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"corrupt record for {name}: rank {rank}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        (crc,) = r.unpack("<I", f"crc of {name}")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(4 * count, f"data of {name}")
        if zlib.crc32(data) != crc:
            raise CheckpointError(f"checksum mismatch in tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last tensor record")
    return header, tensors


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_checkpoint(path)
    try:
        config = config_from_dict(header["config"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"invalid config in checkpoint: {e}") from None
    network = build_network(config, meta=True)
    weights = {k: v for k, v in tensors.items() if not k.startswith("ema.")}
    ema = {k[4:]: v for k, v in tensors.items() if k.startswith("ema.")}
    network.load_state_dict(weights)
    return Checkpoint(network, int(header.get("step", 0)), header.get("rng_state"), ema, header.get("meta", {}))


def checkpoint_save(network: DenoisingNetwork, path) -> Path:
    return save_checkpoint(path, network)


def checkpoint_load(path) -> DenoisingNetwork:
    return load_checkpoint(path).network
