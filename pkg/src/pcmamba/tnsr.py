"""TNSR binary tensors and JSON manifests.

Layout (all little-endian)::

    b"TNSR" | u32 version=1 | u32 ndim | ndim x u32 extents | float64 values, row-major
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class TnsrFormatError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if any(n < 1 for n in a.shape):
        raise ValueError("TNSR extents must be positive")
    header = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise TnsrFormatError("missing TNSR magic")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise TnsrFormatError(f"unsupported TNSR version {version}")
    off = 12 + 4 * ndim
    if len(buf) < off:
        raise TnsrFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 8 * count:
        raise TnsrFormatError(f"expected {count} values, payload is {len(buf) - off} bytes")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(dims)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tnsr(path, array) -> None:
    atomic_write_bytes(path, encode(array))


def read_tnsr(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_manifest(directory, arrays: dict[str, np.ndarray], extra: dict | None = None,
                  manifest_name: str = "manifest.json") -> Path:
    """Write every array as ``<name>.tnsr`` and a manifest mapping name -> file."""
    directory = Path(directory)
    files = {}
    for name, arr in arrays.items():
        fname = name.replace("/", ".") + ".tnsr"
        write_tnsr(directory / fname, arr)
        files[name] = fname
    body = {"format": "TNSR", "version": VERSION, "tensors": files}
    if extra:
        body["meta"] = extra
    path = directory / manifest_name
    atomic_write_text(path, json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(directory, manifest_name: str = "manifest.json") -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    body = json.loads((directory / manifest_name).read_text())
    arrays = {name: read_tnsr(directory / fname) for name, fname in body["tensors"].items()}
    return arrays, body.get("meta", {})
