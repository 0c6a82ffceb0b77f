"""Versioned binary records and atomic file writes."""

from __future__ import annotations

import os
import pickle
import struct
import tempfile
from pathlib import Path

MAGIC = b"WMARREC\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHH")


class RecordError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_record(kind: str, payload) -> bytes:
    kind_b = kind.encode("ascii")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(kind_b)) + kind_b + pickle.dumps(payload, protocol=5)


def loads_record(data: bytes, kind: str):
    if len(data) < _HEADER.size:
        raise RecordError("truncated record")
    magic, version, klen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RecordError("not a wmar record")
    if version != FORMAT_VERSION:
        raise RecordError(f"unsupported record version {version}")
    got = data[_HEADER.size : _HEADER.size + klen].decode("ascii")
    if got != kind:
        raise RecordError(f"expected a {kind!r} record, found {got!r}")
    return pickle.loads(data[_HEADER.size + klen :])


def save_record(path, kind: str, payload) -> None:
    atomic_write_bytes(path, dumps_record(kind, payload))


def load_record(path, kind: str):
    return loads_record(Path(path).read_bytes(), kind)
