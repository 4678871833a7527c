"""
EEGB epoch container.

Layout (little endian)::

    b"EEGB" | u16 version = 1 | u32 header_len | JSON header
    | f32 data N*C*T (row major) | i16 labels N | u16 subject ids N

The JSON header holds fs, n_epochs, n_channels, n_samples, class_names,
channel_names and provenance. It is written with sorted keys and compact
separators so that reading and re-writing a file reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..diffcore import ContainerError
from ..epochs import EpochSet

MAGIC = b"EEGB"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class CountMismatchError(ContainerError):
    pass


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def encode(epochs: EpochSet) -> bytes:
    if epochs.labels.min(initial=0) < -1 or epochs.labels.max(initial=0) > np.iinfo(np.int16).max:
        raise ContainerError("labels do not fit in int16")
    subj = np.asarray(epochs.subjects)
    if subj.min(initial=0) < 0 or subj.max(initial=0) > np.iinfo(np.uint16).max:
        raise ContainerError("subject ids must lie in [0, 65535]")
    header = {
        "fs": float(epochs.fs),
        "n_epochs": epochs.n_epochs,
        "n_channels": epochs.n_channels,
        "n_samples": epochs.n_samples,
        "class_names": list(epochs.class_names),
        "channel_names": list(epochs.channel_names),
        "provenance": _json_safe(epochs.provenance),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        _PREFIX.pack(MAGIC, VERSION, len(blob)), blob,
        np.ascontiguousarray(epochs.data, dtype="<f4").tobytes(),
        epochs.labels.astype("<i2").tobytes(),
        subj.astype("<u2").tobytes(),
    ])


def decode(buf: bytes) -> EpochSet:
    if len(buf) < _PREFIX.size:
        raise TruncatedPayloadError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported EEGB version {version}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise TruncatedPayloadError("header extends past end of file")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
        n, c, t = header["n_epochs"], header["n_channels"], header["n_samples"]
    except (ValueError, KeyError) as exc:
        raise ContainerError(f"malformed header: {exc}") from exc
    per_epoch = 4 * c * t + 2 + 2
    payload = len(buf) - start
    if payload != n * per_epoch:
        # a whole number of epochs means the header count is wrong; otherwise bytes are missing
        if payload % per_epoch == 0:
            raise CountMismatchError(f"header claims {n} epochs but payload holds {payload // per_epoch}")
        raise TruncatedPayloadError(f"payload is {payload} bytes, expected {n * per_epoch}")
    data = np.frombuffer(buf, "<f4", n * c * t, start).reshape(n, c, t).astype(np.float32)
    off = start + 4 * n * c * t
    labels = np.frombuffer(buf, "<i2", n, off).astype(np.int64)
    subjects = np.frombuffer(buf, "<u2", n, off + 2 * n).astype(np.int64)
    try:
        return EpochSet(data, labels, subjects, header["fs"], header["class_names"],
                        header["channel_names"], header.get("provenance", {}))
    except ValueError as exc:
        raise ContainerError(f"invalid container contents: {exc}") from exc


def write_container(epochs: EpochSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(epochs))
    return path


def read_container(path) -> EpochSet:
    return decode(Path(path).read_bytes())
