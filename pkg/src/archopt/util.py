"""Small shared helpers: seed derivation, canonical JSON, binary array bank."""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

_MAGIC = b"AOB1"  # array bank, version 1


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from arbitrary labelled parts.

    Uses SHA-256 of the joined string forms, so derivation is stable across
    processes and Python versions (unlike builtin hash()).
    """
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def canonical_json(obj) -> str:
    """Serialize to JSON with sorted keys and fixed separators (hashable form)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write text to a temp file in the same directory, then rename over path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_array_bank(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian FP32, row-major, with shape headers.

    Layout: magic, uint32 record count; per record: uint16 name length,
    UTF-8 name, uint8 ndim, ndim x uint32 dims, then the FP32 payload.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_array_bank(path: str) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_elem = 1
            for s in shape:
                n_elem *= s
            data = np.frombuffer(fh.read(4 * n_elem), dtype="<f4").reshape(shape)
            arrays[name] = data.copy()
    return arrays


def format_bytes(n: float) -> str:
    """Human-readable byte count (decimal units, matching GB-scale budgets)."""
    for unit in ("B", "KB", "MB", "GB", "TB"):
        if abs(n) < 1000:
            return f"{n:.2f} {unit}"
        n /= 1000
    return f"{n:.2f} PB"
