"""Versioned binary checkpoints.

Layout::

    MAGIC (8 bytes) | version u32 | header length u64 | header JSON | header crc32 u32 | payload

The header holds the architecture fingerprint, the gating slab shape, free-form
metadata and an index of tensors (name, dtype, shape, offset, byte length,
crc32) into the payload. JSON is emitted with sorted keys and fixed separators
so that load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..models import (
    COUNT_LEVELS,
    Denoiser,
    DenoiserConfig,
    FusionConfig,
    FusionHead,
    NoiseAwareConfig,
    NoiseAwareNet,
    SlabShapeError,
    UnnModel,
    architecture_fingerprint,
)
from ..nn import Module
from ..tensor import default_dtype
from ..volume import atomic_write_bytes

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "FingerprintMismatchError",
    "encode_checkpoint",
    "decode_checkpoint",
    "write_checkpoint",
    "read_checkpoint",
    "checkpoint_from_model",
    "model_from_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "normalize_fingerprint",
]

MAGIC = b"UNNPETCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    """Truncated, garbled or otherwise unreadable checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class FingerprintMismatchError(CheckpointError):
    """Stored architecture does not match the one being assembled or rebuilt."""


def normalize_fingerprint(fp: dict) -> dict:
    """Round-trip through JSON so tuples and lists compare equal."""
    return json.loads(json.dumps(fp, sort_keys=True))


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


@dataclass
class Checkpoint:
    kind: str
    fingerprint: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    metadata: dict = field(default_factory=dict)
    slab_shape: tuple | None = None


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = _dumps({
        "kind": ckpt.kind,
        "fingerprint": normalize_fingerprint(ckpt.fingerprint),
        "slab_shape": None if ckpt.slab_shape is None else [int(v) for v in ckpt.slab_shape],
        "metadata": ckpt.metadata,
        "tensors": index,
    })
    return b"".join([_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header,
                     _CRC.pack(zlib.crc32(header))] + chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f"{source}: file too short to be a checkpoint ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{source}: bad magic {magic!r}, not a checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    end = start + hlen
    if len(blob) < end + _CRC.size:
        raise CorruptCheckpointError(f"{source}: truncated header")
    header_bytes = blob[start:end]
    (crc,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(header_bytes) != crc:
        raise CorruptCheckpointError(f"{source}: header checksum mismatch")
    try:
        header = json.loads(header_bytes)
    except ValueError as exc:
        raise CorruptCheckpointError(f"{source}: unreadable header: {exc}") from exc
    payload = memoryview(blob)[end + _CRC.size:]
    tensors = OrderedDict()
    try:
        for t in header["tensors"]:
            lo, n = int(t["offset"]), int(t["nbytes"])
            if lo + n > len(payload):
                raise CorruptCheckpointError(f"{source}: payload truncated at tensor {t['name']}")
            raw = bytes(payload[lo:lo + n])
            if zlib.crc32(raw) != t["crc32"]:
                raise CorruptCheckpointError(f"{source}: checksum mismatch in tensor {t['name']}")
            tensors[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        slab = header["slab_shape"]
        return Checkpoint(header["kind"], header["fingerprint"], tensors, header["metadata"],
                          None if slab is None else tuple(slab))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CorruptCheckpointError(f"{source}: malformed header: {exc}") from exc


def write_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(ckpt))
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def checkpoint_from_model(model: Module, metadata: dict | None = None) -> Checkpoint:
    fp = architecture_fingerprint(model)
    meta = dict(getattr(model, "checkpoint_metadata", {}) if metadata is None else metadata)
    if isinstance(model, Denoiser) and model.count_level is not None:
        meta.setdefault("count_level", model.count_level)
    slab = model.gating.config.slab_shape if isinstance(model, UnnModel) else None
    tensors = OrderedDict((k, np.array(v)) for k, v in model.state_dict().items())
    return Checkpoint(fp["kind"], fp, tensors, meta, slab)


def _param_dtype(ckpt: Checkpoint):
    for arr in ckpt.tensors.values():
        return arr.dtype.newbyteorder("=")
    return np.dtype(np.float32)


def model_from_checkpoint(ckpt: Checkpoint, expected_fingerprint: dict | None = None,
                          slab_shape=None) -> Module:
    """Rebuild the network described by ``ckpt`` and load its parameters."""
    fp = normalize_fingerprint(ckpt.fingerprint)
    if expected_fingerprint is not None and normalize_fingerprint(expected_fingerprint) != fp:
        raise FingerprintMismatchError("checkpoint architecture differs from the expected fingerprint")
    if slab_shape is not None and ckpt.slab_shape is not None and tuple(slab_shape) != tuple(ckpt.slab_shape):
        raise SlabShapeError(f"checkpoint gating slab {ckpt.slab_shape} != requested {tuple(slab_shape)}")
    try:
        with default_dtype(_param_dtype(ckpt)):
            if ckpt.kind == "denoiser":
                model = Denoiser(DenoiserConfig(**fp["denoiser"]), count_level=ckpt.metadata.get("count_level"))
            elif ckpt.kind == "unn":
                dcfg = DenoiserConfig(**fp["denoiser"])
                gcfg = NoiseAwareConfig(**fp["gating"])
                if ckpt.slab_shape is None or tuple(ckpt.slab_shape) != gcfg.slab_shape:
                    raise SlabShapeError(
                        f"stored slab_shape {ckpt.slab_shape} disagrees with the gating config {gcfg.slab_shape}")
                model = UnnModel([Denoiser(dcfg, count_level=f) for f in COUNT_LEVELS],
                                 NoiseAwareNet(gcfg), FusionHead(FusionConfig(**fp["fusion"])))
            else:
                raise CheckpointError(f"checkpoint holds a {ckpt.kind!r}, not a model")
    except TypeError as exc:
        raise FingerprintMismatchError(f"fingerprint does not describe a buildable model: {exc}") from exc
    if normalize_fingerprint(architecture_fingerprint(model)) != fp:
        raise FingerprintMismatchError("parameter counts of the rebuilt model disagree with the fingerprint")
    try:
        model.load_state_dict(ckpt.tensors)
    except (KeyError, ValueError) as exc:
        raise FingerprintMismatchError(f"stored tensors do not fit the architecture: {exc}") from exc
    model.checkpoint_metadata = dict(ckpt.metadata)
    return model


def save_checkpoint(model: Module, path, metadata: dict | None = None) -> Path:
    return write_checkpoint(checkpoint_from_model(model, metadata), path)


def load_checkpoint(path, expected_fingerprint: dict | None = None, slab_shape=None) -> Module:
    """Read, verify and rebuild a model; its metadata lands on ``model.checkpoint_metadata``."""
    return model_from_checkpoint(read_checkpoint(path), expected_fingerprint, slab_shape)
