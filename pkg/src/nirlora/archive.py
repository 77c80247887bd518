"""LVWT tensor archive.

Layout, all integers little-endian::

    b"LVWT" | version u32 = 1 | entry_count u32
    per entry: name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u32 * rank | payload

dtype 1 is float32 (row-major payload). dtype 2 is raw bytes; it is used only
for the optional leading ``__meta__`` entry, a UTF-8 JSON document.

Tensor names follow the model registry, e.g. ``encoder.embed.weight``,
``encoder.blocks.3.attn.q.weight``, ``encoder.blocks.3.attn.q.lora_A``,
``head.aspp.branch1.weight``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"LVWT"
VERSION = 1
DTYPE_F32 = 1
DTYPE_BYTES = 2
META_NAME = "__meta__"


class ArchiveError(ValueError):
    """The archive is malformed or does not match what the caller expects."""


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _entry_header(name: str, dtype: int, dims: tuple[int, ...]) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ArchiveError(f"tensor name too long: {name[:40]}...")
    if len(dims) > 0xFF:
        raise ArchiveError(f"rank {len(dims)} too large for {name}")
    return struct.pack(f"<H{len(raw)}sBB{len(dims)}I", len(raw), raw, dtype, len(dims), *dims)


def encode_archive(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors) + (meta is not None))]
    if meta is not None:
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        parts += [_entry_header(META_NAME, DTYPE_BYTES, (len(payload),)), payload]
    for name, arr in tensors.items():
        if name == META_NAME:
            raise ArchiveError(f"{META_NAME} is reserved")
        arr = np.asarray(arr, dtype="<f4", order="C")
        parts += [_entry_header(name, DTYPE_F32, arr.shape), arr.tobytes()]
    return b"".join(parts)


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    _atomic_write(Path(path), encode_archive(tensors, meta))


def decode_archive(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict | None]:
    def need(n: int, pos: int, what: str) -> None:
        if pos + n > len(blob):
            raise ArchiveError(f"{source}: truncated while reading {what}")

    need(12, 0, "header")
    if blob[:4] != MAGIC:
        raise ArchiveError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ArchiveError(f"{source}: unsupported version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    meta = None
    for _ in range(count):
        need(2, pos, "entry name length")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len + 2, pos, "entry name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dtype, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        need(4 * rank, pos, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if name in tensors:
            raise ArchiveError(f"{source}: duplicate entry {name}")
        if dtype == DTYPE_F32:
            need(4 * n, pos, f"payload of {name}")
            flat = np.frombuffer(blob, dtype="<f4", count=n, offset=pos)
            tensors[name] = np.reshape(flat, dims).astype(np.float32)
            pos += 4 * n
        elif dtype == DTYPE_BYTES and name == META_NAME:
            need(n, pos, "metadata")
            meta = json.loads(blob[pos : pos + n].decode("utf-8"))
            pos += n
        else:
            raise ArchiveError(f"{source}: unsupported dtype {dtype} for entry {name}")
    if pos != len(blob):
        raise ArchiveError(f"{source}: {len(blob) - pos} trailing bytes")
    return tensors, meta


def load_archive(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    return decode_archive(path.read_bytes(), str(path))
