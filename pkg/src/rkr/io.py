"""Binary formats: tensor bundles (checkpoints) and RKRD dataset files.

Both formats are a 4-byte magic, a little-endian ``uint32`` JSON header
length, the UTF-8 JSON header, then raw little-endian payload. Writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BUNDLE_MAGIC = b"RKRA"
DATASET_MAGIC = b"RKRD"
DATASET_VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared layout or checksum."""


def atomic_write_bytes(path, data: bytes) -> None:
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


def dumps_json(obj) -> str:
    """Deterministic JSON; Python's float repr is the shortest exact round-trip form."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(_plain(header), sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(head)) + head + payload


def _unpack(raw: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if raw[:4] != magic:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 8:
        raise FormatError("truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    return header, memoryview(raw)[8 + n :]


# ---------------------------------------------------------------- tensor bundles


def write_bundle(path, tensors: dict[str, np.ndarray], meta: dict) -> str:
    """Write named tensors as length-prefixed sections; returns the content checksum."""
    entries, sections = [], []
    for name, arr in tensors.items():
        arr = _le(np.asarray(arr))
        data = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        sections.append(struct.pack("<Q", len(data)) + data)
    payload = b"".join(sections)
    digest = hashlib.sha256(payload).hexdigest()
    header = {"format": "rkr-bundle", "version": 1, "meta": meta, "tensors": entries, "checksum": digest}
    atomic_write_bytes(path, _pack(BUNDLE_MAGIC, header, payload))
    return digest


def read_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    header, body = _unpack(Path(path).read_bytes(), BUNDLE_MAGIC)
    if hashlib.sha256(body).hexdigest() != header.get("checksum"):
        raise FormatError(f"{path}: checksum mismatch")
    tensors, off = {}, 0
    for entry in header["tensors"]:
        (n,) = struct.unpack("<Q", body[off : off + 8])
        off += 8
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if n != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: section {entry['name']!r} has {n} bytes, shape says otherwise")
        arr = np.frombuffer(body[off : off + n], dtype=dtype).reshape(shape)
        tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        off += n
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes")
    return tensors, header["meta"]


# ---------------------------------------------------------------- RKRD dataset files


@dataclass
class DatasetFile:
    """One example set: float32 inputs, uint32 labels, optional class-embedding table."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    embeddings: np.ndarray | None = None
    meta: dict | None = None

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])


def write_dataset(path, ds: DatasetFile) -> None:
    x = np.asarray(ds.inputs)
    y = np.asarray(ds.labels)
    if x.dtype != np.float32:
        raise FormatError("dataset inputs must be float32")
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise FormatError(f"{y.shape} labels for {x.shape[0]} examples")
    if y.size and (y.min() < 0 or y.max() >= 2**32):
        raise FormatError("labels must fit in uint32")
    header = {
        "version": DATASET_VERSION,
        "count": int(x.shape[0]),
        "input_shape": [int(s) for s in x.shape[1:]],
        "num_classes": int(ds.num_classes),
        "embedding": None,
        "meta": ds.meta or {},
    }
    payload = [_le(x).tobytes(), _le(y.astype(np.uint32)).tobytes()]
    if ds.embeddings is not None:
        e = np.asarray(ds.embeddings)
        if e.dtype != np.float32 or e.ndim != 2:
            raise FormatError("embedding table must be a 2-D float32 array")
        header["embedding"] = {"rows": int(e.shape[0]), "dim": int(e.shape[1])}
        payload.append(_le(e).tobytes())
    atomic_write_bytes(path, _pack(DATASET_MAGIC, header, b"".join(payload)))


def read_dataset(path) -> DatasetFile:
    header, body = _unpack(Path(path).read_bytes(), DATASET_MAGIC)
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    count = int(header["count"])
    shape = tuple(header["input_shape"])
    nx = count * int(np.prod(shape, dtype=np.int64)) * 4
    ny = count * 4
    emb = header.get("embedding")
    ne = emb["rows"] * emb["dim"] * 4 if emb else 0
    if len(body) != nx + ny + ne:
        raise FormatError(f"{path}: payload is {len(body)} bytes, header declares {nx + ny + ne}")
    x = np.frombuffer(body[:nx], dtype="<f4").astype(np.float32).reshape((count, *shape))
    y = np.frombuffer(body[nx : nx + ny], dtype="<u4").astype(np.int64)
    e = None
    if emb:
        e = np.frombuffer(body[nx + ny :], dtype="<f4").astype(np.float32).reshape(emb["rows"], emb["dim"])
    return DatasetFile(x, y, int(header["num_classes"]), e, header.get("meta") or {})
