"""Binary containers for datasets and model checkpoints.

Dataset layout (little endian)::

    b"MLMCDS01"
    u32 version, u32 m, u64 N, u32 R_1 .. R_m, u32 d
    per level: N*R^d float64 inputs, then N*R^d float64 outputs
    u32 CRC32 of everything between the magic and the checksum

A JSON sidecar (``<path>.json``) holds provenance.

Checkpoint layout::

    b"MLMCCKPT"
    u32 version, u32 header length, JSON header (config echo, optimizer meta)
    u64 P, P float64 parameters, optional optimizer moment vectors
    u32 CRC32 as above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .datagen import MultiResDataset
from .multires import ResolutionLevel

DATASET_MAGIC = b"MLMCDS01"
CHECKPOINT_MAGIC = b"MLMCCKPT"
FORMAT_VERSION = 1

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """File is not a container of the expected kind."""


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def _seal(magic: bytes, body: bytes) -> bytes:
    return magic + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unseal(blob: bytes, magic: bytes) -> memoryview:
    if len(blob) < len(magic) or blob[: len(magic)] != magic:
        raise FormatError(f"bad magic bytes, expected {magic!r}")
    if len(blob) < len(magic) + 4:
        raise ChecksumError("file truncated")
    body = blob[len(magic) : -4]
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch (file corrupted or truncated)")
    return memoryview(body)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(ds: MultiResDataset, path) -> None:
    path = Path(path)
    header = struct.pack("<IIQ", FORMAT_VERSION, ds.m, ds.n_samples)
    header += struct.pack(f"<{ds.m}I", *ds.resolutions)
    header += struct.pack("<I", ds.dim)
    chunks = [header]
    for x, y in zip(ds.inputs, ds.outputs):
        chunks.append(np.ascontiguousarray(x, dtype=_F64).tobytes())
        chunks.append(np.ascontiguousarray(y, dtype=_F64).tobytes())
    path.write_bytes(_seal(DATASET_MAGIC, b"".join(chunks)))
    sidecar_path(path).write_text(json.dumps(ds.provenance, indent=2, sort_keys=True))


def load_dataset(path) -> MultiResDataset:
    path = Path(path)
    body = _unseal(path.read_bytes(), DATASET_MAGIC)
    try:
        version, m, n = struct.unpack_from("<IIQ", body, 0)
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported dataset version {version}")
        offset = 16
        resolutions = struct.unpack_from(f"<{m}I", body, offset)
        offset += 4 * m
        (d,) = struct.unpack_from("<I", body, offset)
        offset += 4
    except struct.error as exc:
        raise FormatError(f"malformed header: {exc}") from None
    inputs, outputs = [], []
    for R in resolutions:
        count = n * R**d
        shape = (n,) + (R,) * d
        for target in (inputs, outputs):
            nbytes = 8 * count
            if offset + nbytes > len(body):
                raise FormatError("payload shorter than header declares")
            arr = np.frombuffer(body, dtype=_F64, count=count, offset=offset)
            target.append(arr.reshape(shape).astype(np.float64))
            offset += nbytes
    if offset != len(body):
        raise FormatError("trailing bytes after payload")
    side = sidecar_path(path)
    provenance = json.loads(side.read_text()) if side.exists() else {}
    hierarchy = [ResolutionLevel(i + 1, R) for i, R in enumerate(resolutions)]
    return MultiResDataset(hierarchy, inputs, outputs, provenance)


def save_checkpoint(path, params: np.ndarray, header: dict,
                    moments: tuple[np.ndarray, np.ndarray] | None = None) -> None:
    meta = json.dumps(dict(header, has_moments=moments is not None), sort_keys=True).encode()
    params = np.ascontiguousarray(params, dtype=_F64)
    body = struct.pack("<II", FORMAT_VERSION, len(meta)) + meta
    body += struct.pack("<Q", params.size) + params.tobytes()
    if moments is not None:
        for vec in moments:
            body += np.ascontiguousarray(vec, dtype=_F64).tobytes()
    Path(path).write_bytes(_seal(CHECKPOINT_MAGIC, body))


def load_checkpoint(path):
    """Return ``(params, header, moments_or_None)``."""
    body = _unseal(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    try:
        version, meta_len = struct.unpack_from("<II", body, 0)
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        header = json.loads(bytes(body[8 : 8 + meta_len]))
        offset = 8 + meta_len
        (p,) = struct.unpack_from("<Q", body, offset)
        offset += 8
    except (struct.error, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from None
    n_vec = 3 if header.get("has_moments") else 1
    if offset + 8 * p * n_vec != len(body):
        raise FormatError("checkpoint payload size mismatch")
    vecs = [
        np.frombuffer(body, dtype=_F64, count=p, offset=offset + 8 * p * k).copy()
        for k in range(n_vec)
    ]
    moments = (vecs[1], vecs[2]) if n_vec == 3 else None
    return vecs[0], header, moments
