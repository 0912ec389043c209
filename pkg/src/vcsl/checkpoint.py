"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0-3    magic b"VCSL"
    bytes 4-5    format version (uint16)
    bytes 6-9    header length N (uint32)
    next N       UTF-8 JSON header
    remainder    parameter blobs, raw little-endian float64, in header order

The header holds ``cursor`` ([stage, epoch]), ``completed`` stages,
``corpus_seed``, the full run ``config`` and a ``tensors`` list of
``{"name", "shape"}`` entries naming each blob (``group/param``).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"VCSL"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(RuntimeError):
    pass


def encode(state, config: dict, corpus_seed: int) -> bytes:
    params = state.named_parameters()
    header = {
        "cursor": list(state.cursor),
        "completed": sorted(state.completed),
        "corpus_seed": int(corpus_seed),
        "config": config,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values())
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + blobs


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and named arrays from checkpoint bytes."""
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, size = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt header: {err}") from err
    offset = start + size
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"truncated blob for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset) \
            .reshape(entry["shape"]).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after the last blob")
    return header, arrays


def save(path: str | os.PathLike, state, config: dict, corpus_seed: int) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    data = encode(state, config, corpus_seed)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def restore(state, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an already-built state of matching architecture."""
    params = state.named_parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"parameter set differs from the model: {missing[:5]}")
    for name, t in params.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
        t.data[...] = arrays[name]
        t.grad = None
    state.cursor = tuple(header["cursor"])
    state.completed = set(header["completed"])


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())
