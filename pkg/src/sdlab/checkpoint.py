"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SDLAB\\x00\\x00\\x01"
    8       1     record type code (0 model, 1 mask, 2 synthetic_dataset, 3 curve, 4 grid)
    9       4     header length H (uint32)
    13      H     header, UTF-8 JSON with sorted keys
    13+H    ...   payload, ``count`` little-endian floats of ``dtype`` ("<f4" or "<f8")

Header keys: ``record_type``, ``count``, ``dtype``, ``meta`` (record
metadata), ``config_hash`` (first 16 hex chars of the SHA-256 of the
canonical JSON of ``meta``) and ``payload_sha256``. Loading re-derives both
hashes and rejects any mismatch.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SDLAB\x00\x00\x01"
RECORD_TYPES = ("model", "mask", "synthetic_dataset", "curve", "grid")
_PREFIX = struct.Struct("<8sBI")
_DTYPES = ("<f4", "<f8")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PayloadLengthError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


@dataclass(eq=False)
class CheckpointRecord:
    record_type: str
    meta: dict
    payload: np.ndarray
    dtype: str = "<f8"
    config_hash: str = field(default="", compare=False)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def meta_hash(meta: dict) -> str:
    return hashlib.sha256(_canonical(meta)).hexdigest()[:16]


def encode(record: CheckpointRecord) -> bytes:
    if record.record_type not in RECORD_TYPES:
        raise HeaderError(f"unknown record type {record.record_type!r}")
    if record.dtype not in _DTYPES:
        raise HeaderError(f"unsupported payload dtype {record.dtype!r}")
    payload = np.ascontiguousarray(record.payload, dtype=record.dtype).ravel().tobytes()
    header = {
        "record_type": record.record_type,
        "count": int(np.asarray(record.payload).size),
        "dtype": record.dtype,
        "meta": record.meta,
        "config_hash": meta_hash(record.meta),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = _canonical(header)
    code = RECORD_TYPES.index(record.record_type)
    return _PREFIX.pack(MAGIC, code, len(hbytes)) + hbytes + payload


def decode(raw: bytes) -> CheckpointRecord:
    if len(raw) < len(MAGIC):
        raise TruncatedCheckpointError("file ends before the magic bytes")
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError("file ends inside the fixed prefix")
    _, code, hlen = _PREFIX.unpack_from(raw)
    if len(raw) < _PREFIX.size + hlen:
        raise TruncatedCheckpointError(f"header declares {hlen} bytes, file is too short")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode())
        rtype, count, dtype, meta = header["record_type"], int(header["count"]), header["dtype"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"unreadable header: {exc}") from exc
    if code >= len(RECORD_TYPES) or RECORD_TYPES[code] != rtype:
        raise HeaderError(f"record type code {code} disagrees with header type {rtype!r}")
    if dtype not in _DTYPES:
        raise HeaderError(f"unsupported payload dtype {dtype!r}")
    body = raw[_PREFIX.size + hlen:]
    itemsize = np.dtype(dtype).itemsize
    if len(body) != count * itemsize:
        raise PayloadLengthError(
            f"header declares {count} values ({count * itemsize} bytes), payload has {len(body)} bytes"
        )
    if hashlib.sha256(body).hexdigest() != header.get("payload_sha256"):
        raise HashMismatchError("payload hash does not match header")
    if meta_hash(meta) != header.get("config_hash"):
        raise HashMismatchError("config hash does not match header metadata")
    payload = np.frombuffer(body, dtype=dtype).astype(dtype[1:], copy=True)
    return CheckpointRecord(rtype, meta, payload, dtype, header["config_hash"])


def write_record(record: CheckpointRecord, path) -> str:
    data = encode(record)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return str(path)


def read_record(path) -> CheckpointRecord:
    with open(path, "rb") as fh:
        return decode(fh.read())


# ---------------------------------------------------------------------------
# domain objects <-> records
# ---------------------------------------------------------------------------


def to_record(obj, extra_meta: dict | None = None) -> CheckpointRecord:
    from .distill import SyntheticDataset
    from .landscape import LandscapeGrid
    from .nn import ModelState
    from .pruning import SparsityMask, sparsity
    from .stability import InterpolationCurve

    extra = dict(extra_meta or {})
    if isinstance(obj, ModelState):
        meta = {"arch": obj.arch.to_dict(), "seed": int(obj.seed), **extra}
        return CheckpointRecord("model", meta, obj.params, "<f8")
    if isinstance(obj, SparsityMask):
        meta = {"length": len(obj), "sparsity": sparsity(obj), **extra}
        payload = np.concatenate([obj.bits, obj.prunable]).astype(np.float32)
        return CheckpointRecord("mask", meta, payload, "<f4")
    if isinstance(obj, SyntheticDataset):
        meta = {
            "ipc": obj.ipc,
            "class_count": obj.class_count,
            "source_name": obj.source_name,
            "distill_config_hash": obj.distill_config_hash,
            "rows": int(obj.features.shape[0]),
            "dim": int(obj.features.shape[1]),
            "labels": [int(v) for v in obj.labels],
            "match_loss_history": [float(v) for v in obj.match_loss_history],
            **extra,
        }
        return CheckpointRecord("synthetic_dataset", meta, obj.features, "<f8")
    if isinstance(obj, InterpolationCurve):
        meta = {"points": int(obj.alphas.size), "endpoint_meta": obj.endpoint_meta, **extra}
        payload = np.concatenate([obj.alphas, obj.train_loss, obj.val_accuracy])
        return CheckpointRecord("curve", meta, payload, "<f8")
    if isinstance(obj, LandscapeGrid):
        meta = {
            "x_range": list(obj.x_range),
            "y_range": list(obj.y_range),
            "resolution": list(obj.resolution),
            "ref_coords": [list(c) for c in obj.ref_coords],
            "ref_losses": list(obj.ref_losses),
            "evaluations": obj.evaluations,
            **extra,
        }
        return CheckpointRecord("grid", meta, obj.losses, "<f8")
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def from_record(rec: CheckpointRecord):
    from .distill import SyntheticDataset
    from .landscape import LandscapeGrid
    from .nn import ArchSpec, ModelState
    from .pruning import SparsityMask
    from .stability import InterpolationCurve

    m, p = rec.meta, rec.payload
    if rec.record_type == "model":
        return ModelState(ArchSpec.from_dict(m["arch"]), p, m["seed"])
    if rec.record_type == "mask":
        n = m["length"]
        if p.size != 2 * n:
            raise PayloadLengthError(f"mask payload holds {p.size} values, expected {2 * n}")
        return SparsityMask(p[:n] != 0, p[n:] != 0)
    if rec.record_type == "synthetic_dataset":
        feats = p.reshape(m["rows"], m["dim"])
        return SyntheticDataset(
            feats, np.array(m["labels"]), m["ipc"], m["class_count"], m["source_name"],
            m["distill_config_hash"], list(m["match_loss_history"]),
        )
    if rec.record_type == "curve":
        n = m["points"]
        return InterpolationCurve(p[:n], p[n:2 * n], p[2 * n:], m["endpoint_meta"])
    nx, ny = m["resolution"]
    losses = p.reshape(nx, ny)
    return LandscapeGrid(
        tuple(m["x_range"]), tuple(m["y_range"]), (nx, ny), losses, np.isnan(losses),
        tuple(tuple(c) for c in m["ref_coords"]), tuple(m["ref_losses"]), m["evaluations"],
    )


def save_checkpoint(obj, path, extra_meta: dict | None = None) -> str:
    """Write a domain object (or a raw :class:`CheckpointRecord`) to ``path``."""
    rec = obj if isinstance(obj, CheckpointRecord) else to_record(obj, extra_meta)
    return write_record(rec, path)


def load_checkpoint(path):
    """Read ``path`` back into the domain object it was written from."""
    return from_record(read_record(path))
