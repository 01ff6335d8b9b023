"""BATCKPT1 checkpoint files.

Layout, all integers little-endian::

    b"BATCKPT1"
    u32 entry count
    per entry: u32 name length, UTF-8 name, u8 dtype code, u32 rank, rank x u64 dims
    raw data of every entry in manifest order

Dtype code 0 is float64 (every tensor); code 1 is uint8 and is used only for
the ``__meta__`` entry, a UTF-8 JSON document holding the run config and the
adapter plan descriptor.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BATCKPT1"
META_NAME = "__meta__"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 0, np.dtype("u1"): 1}


class CheckpointError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize ``arrays`` (cast to float64) in the given order, with optional JSON meta first."""
    entries = []
    if meta is not None:
        entries.append((META_NAME, np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype="u1")))
    for name, a in arrays.items():
        if name == META_NAME:
            raise CheckpointError(f"tensor name {META_NAME!r} is reserved")
        entries.append((name, np.array(a, dtype="<f8", order="C")))
    head = [MAGIC, struct.pack("<I", len(entries))]
    for name, a in entries:
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)) + raw)
        head.append(struct.pack("<BI", _CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
    return b"".join(head + [a.tobytes() for _, a in entries])


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`encode`; returns (arrays, meta)."""
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated while reading {what} at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise CheckpointError(f"{source}: not a BATCKPT1 checkpoint")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: entry name is not UTF-8") from None
        code, rank = struct.unpack("<BI", take(5, f"header of {name}"))
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: entry {name} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name}"))
        manifest.append((name, _DTYPES[code], dims))
    arrays, meta = {}, {}
    for name, dtype, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        a = np.frombuffer(take(n * dtype.itemsize, f"data of {name}"), dtype=dtype).reshape(dims)
        if name == META_NAME:
            meta = json.loads(a.tobytes().decode("utf-8"))
        else:
            arrays[name] = a.astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return arrays, meta


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), str(path))


# ---------------------------------------------------------------- model level

def model_arrays(model, prefix: str = "") -> dict[str, np.ndarray]:
    return {k: t.data for k, t in model.named_tensors().items() if k.startswith(prefix)}


def model_meta(model) -> dict:
    return {"config": model.cfg.to_dict(), "plan": model.plan.descriptor()}


def save_model(path, model) -> None:
    save(path, model_arrays(model), model_meta(model))


def load_model(path):
    """Rebuild a :class:`BATModel` from its config meta, then load every tensor."""
    from .config import ConfigError, config_from_dict
    from .tracker import BATModel

    arrays, meta = load(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no run config")
    try:
        cfg = config_from_dict(meta["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model = BATModel(cfg)
    try:
        model.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model


def backbone_bytes(model) -> bytes:
    """Serialized frozen backbone alone, for bit-level comparisons."""
    return encode(model_arrays(model, "backbone."))
