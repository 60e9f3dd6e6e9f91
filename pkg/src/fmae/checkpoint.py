"""Versioned checkpoint files.

Layout::

    FMAE-CKPT\\n
    key = value\\n          (manifest, UTF-8, one entry per line)
    ...
    ---\\n
    record*                  (binary tensors)

Each record is ``u32 name_len | name | u16 dtype_len | dtype | u32 ndim |
u64 shape[ndim] | u64 payload_len | payload`` in little endian, with the
payload holding the array's raw little-endian bytes in C order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError

MAGIC = b"FMAE-CKPT\n"
SEPARATOR = b"---\n"
FORMAT_VERSION = "1"


@dataclass
class Checkpoint:
    manifest: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(value: str) -> str:
    out, i = [], 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append("\n" if nxt == "n" else nxt)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temporary file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(ckpt.manifest)
    manifest["format_version"] = FORMAT_VERSION
    chunks = [MAGIC]
    for key in sorted(manifest):
        if "=" in key or "\n" in key:
            raise CheckpointError(f"invalid manifest key {key!r}")
        chunks.append(f"{key} = {_escape(str(manifest[key]))}\n".encode("utf-8"))
    chunks.append(SEPARATOR)
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype.hasobject or arr.dtype.kind not in "biufc":
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        # astype rather than ascontiguousarray, which would turn 0-d arrays into 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
        nb = name.encode("utf-8")
        dt = arr.dtype.str.encode("ascii")
        payload = arr.tobytes(order="C")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<H", len(dt)) + dt)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file ends inside {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = buf.find(b"\n" + SEPARATOR, len(MAGIC) - 1)
    if end < 0:
        raise CheckpointTruncatedError("manifest terminator missing")
    manifest = {}
    for line in buf[len(MAGIC):end + 1].decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition(" = ")
        manifest[key] = _unescape(value)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format {version!r} (expected {FORMAT_VERSION})")
    r = _Reader(buf, end + 1 + len(SEPARATOR))
    tensors = {}
    while r.pos < len(buf):
        (nlen,) = r.unpack("<I", "record name length")
        name = r.take(nlen, "record name").decode("utf-8")
        (dlen,) = r.unpack("<H", "dtype length")
        dtype = np.dtype(r.take(dlen, "dtype").decode("ascii"))
        (ndim,) = r.unpack("<I", "rank")
        shape = r.unpack(f"<{ndim}Q", "shape") if ndim else ()
        (plen,) = r.unpack("<Q", "payload length")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if plen != expected:
            if r.pos + plen > len(buf):
                raise CheckpointTruncatedError(f"payload of {name!r} runs past end of file")
            raise CheckpointError(f"payload of {name!r} has {plen} bytes, expected {expected}")
        data = r.take(plen, f"payload of {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    manifest.pop("format_version", None)
    return Checkpoint(manifest, tensors)


def check_shapes(tensors: Mapping[str, np.ndarray], expected: Mapping[str, tuple],
                 allow_missing: Optional[tuple] = None) -> None:
    """Raise :class:`CheckpointShapeError` unless names and shapes match ``expected``."""
    allow_missing = allow_missing or ()
    for name, shape in expected.items():
        if name not in tensors:
            if name.startswith(allow_missing):
                continue
            raise CheckpointShapeError(f"tensor {name!r} missing from checkpoint")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointShapeError(f"tensor {name!r} has shape {tensors[name].shape}, expected {tuple(shape)}")
