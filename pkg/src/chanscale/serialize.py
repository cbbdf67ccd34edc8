"""Binary model file format.

Layout (all integers little-endian)::

    b"CSSM"                    magic
    u16                        format version (major)
    u32                        header length in bytes
    header                     UTF-8 JSON, keys sorted
    u32                        CRC32 of the header bytes
    then, for each tensor in header order:
        u64                    payload length in bytes
        payload                raw little-endian IEEE-754 values, C order
        u32                    CRC32 of the payload

The header lists the layers (kind, flags, tensor names) and every tensor's
shape and dtype (``"<f4"`` or ``"<f8"``), plus the input shape and metadata.
The encoding is canonical: saving the same model twice gives identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ModelVersionError
from .netgraph import GAP, Conv, Dense, MaxPool, NetworkModel, Scaling

MAGIC = b"CSSM"
VERSION = 1

_TENSORS = {Conv: ("kernel", "bias"), Scaling: ("s",), Dense: ("weight", "bias"), MaxPool: (), GAP: ()}
_CLASSES = {"conv": Conv, "scaling": Scaling, "dense": Dense, "maxpool": MaxPool, "gap": GAP}
_FLAGS = {Conv: "frozen", Dense: "trainable"}


def _header_and_tensors(model):
    layers, tensors = [], []
    for layer in model.layers:
        cls = type(layer)
        entry = {"kind": next(k for k, v in _CLASSES.items() if v is cls), "tensors": []}
        if cls in _FLAGS:
            entry[_FLAGS[cls]] = bool(getattr(layer, _FLAGS[cls]))
        for name in _TENSORS[cls]:
            arr = np.ascontiguousarray(getattr(layer, name))
            dt = arr.dtype.newbyteorder("<")
            entry["tensors"].append({"name": name, "shape": list(arr.shape), "dtype": dt.str})
            tensors.append(arr.astype(dt, copy=False))
        layers.append(entry)
    header = {"input_shape": list(model.input_shape), "layers": layers, "metadata": model.metadata}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode(), tensors


def dumps(model) -> bytes:
    header, tensors = _header_and_tensors(model)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", VERSION, len(header)))
    out.write(header)
    out.write(struct.pack("<I", zlib.crc32(header)))
    for arr in tensors:
        payload = arr.tobytes()
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated file while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> NetworkModel:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("not a model file (bad magic bytes)")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ModelVersionError(f"unsupported format version {version} (this reader handles {VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    header_bytes = r.take(hlen, "header")
    (crc,) = r.unpack("<I", "header checksum")
    if zlib.crc32(header_bytes) != crc:
        raise ModelFormatError("header checksum mismatch")
    try:
        header = json.loads(header_bytes.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from None

    layers = []
    for i, entry in enumerate(header["layers"]):
        cls = _CLASSES.get(entry.get("kind"))
        if cls is None:
            raise ModelFormatError(f"layer {i}: unknown kind {entry.get('kind')!r}")
        kwargs = {}
        for spec in entry["tensors"]:
            (length,) = r.unpack("<Q", f"layer {i} {spec['name']} length")
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            if length != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise ModelFormatError(f"layer {i} {spec['name']}: payload length disagrees with shape")
            payload = r.take(length, f"layer {i} {spec['name']} payload")
            (crc,) = r.unpack("<I", f"layer {i} {spec['name']} checksum")
            if zlib.crc32(payload) != crc:
                raise ModelFormatError(f"layer {i} {spec['name']}: checksum mismatch")
            arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
            kwargs[spec["name"]] = arr.astype(dtype.newbyteorder("="))
        if cls in _FLAGS:
            kwargs[_FLAGS[cls]] = bool(entry[_FLAGS[cls]])
        layers.append(cls(**kwargs))
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return NetworkModel(tuple(layers), tuple(header["input_shape"]), header["metadata"])


def save_model(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dumps(model)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_model(path):
    return loads(Path(path).read_bytes())
