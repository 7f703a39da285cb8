"""Binary checkpoint container.

Layout::

    magic      4 bytes  (b"IPUN" for generators, b"FREM" for embedders)
    version    u16 little-endian
    length     u32 little-endian, byte length of the manifest
    manifest   UTF-8 text, ``key=value`` lines
    payload    float32 little-endian tensors, in manifest order

Manifest tensor lines read ``tensor=<name>;<d0>x<d1>...;<offset>;<nbytes>``
with offsets relative to the start of the payload, and a
``tensor_count=<n>`` line states how many follow. Scalar tensors use the
shape token ``scalar``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    """Base class for unreadable or inconsistent checkpoints."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or an unparsable manifest."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    """Manifest is internally inconsistent (e.g. wrong declared tensor count)."""


class CheckpointShapeError(CheckpointError):
    pass


def _shape_token(shape):
    return "x".join(str(int(d)) for d in shape) if len(shape) else "scalar"


def _parse_shape(token):
    if token == "scalar":
        return ()
    return tuple(int(d) for d in token.split("x"))


def write_checkpoint(path, magic: bytes, meta: dict, tensors) -> None:
    """Write ``tensors`` (iterable of ``(name, array)``) with string metadata."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    lines = []
    for key, value in meta.items():
        if "\n" in str(value) or "=" in key:
            raise ValueError(f"invalid manifest entry {key!r}")
        lines.append(f"{key}={value}")
    payload = []
    offset = 0
    entries = []
    for name, arr in tensors:
        if ";" in name or "\n" in name:
            raise ValueError(f"invalid tensor name {name!r}")
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(f"tensor={name};{_shape_token(np.shape(arr))};{offset};{len(buf)}")
        payload.append(buf)
        offset += len(buf)
    lines.append(f"tensor_count={len(entries)}")
    lines.extend(entries)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for buf in payload:
            fh.write(buf)


def read_checkpoint(path, magic: bytes):
    """Return ``(meta, tensors)`` where ``tensors`` is an ordered name -> float32 array dict."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    got_magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise CheckpointFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        text = raw[start : start + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{path}: manifest is not UTF-8") from exc
    payload = memoryview(raw)[start + mlen :]

    meta = {}
    entries = []
    declared = None
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"{path}: malformed manifest line {line!r}")
        if key == "tensor":
            parts = value.split(";")
            if len(parts) != 4:
                raise CheckpointFormatError(f"{path}: malformed tensor entry {value!r}")
            try:
                entries.append((parts[0], _parse_shape(parts[1]), int(parts[2]), int(parts[3])))
            except ValueError as exc:
                raise CheckpointFormatError(f"{path}: malformed tensor entry {value!r}") from exc
        elif key == "tensor_count":
            declared = int(value)
        else:
            meta[key] = value
    if declared is None:
        raise CheckpointManifestError(f"{path}: manifest lacks tensor_count")
    if declared != len(entries):
        raise CheckpointManifestError(
            f"{path}: manifest declares tensor_count={declared} but lists {len(entries)} tensors"
        )
    tensors = {}
    for name, shape, offset, nbytes in entries:
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != expected:
            raise CheckpointShapeError(f"{path}: tensor {name} shape {shape} needs {expected} bytes, manifest says {nbytes}")
        if offset + nbytes > len(payload):
            raise CheckpointTruncatedError(f"{path}: payload for tensor {name} is truncated")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return meta, tensors
