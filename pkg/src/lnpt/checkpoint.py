"""Binary checkpoint container.

Layout: magic b"LNPT", u32 LE format version, u32 LE header length,
UTF-8 JSON header, then the raw data section. The header lists every
array as {name, shape, dtype, offset} with offsets relative to the data
section; float arrays are stored little-endian in header order. Masks
are packed bitsets (LSB-first within each byte), one per layer, listed
under "masks". The header JSON is serialized with sorted keys and fixed
separators so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelSpec, Parameters

MAGIC = b"LNPT"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _pack_bits(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[:count].astype(bool)


def save(path, params: Parameters, seed: int | None = None,
         mask: np.ndarray | None = None, extra: dict | None = None) -> None:
    """Write parameters (and an optional flat mask) to path."""
    arrays = []
    blobs = []
    offset = 0
    for e in params.entries:
        arr = params.view(e.name)
        buf = arr.astype(f"<{arr.dtype.kind}{arr.dtype.itemsize}", copy=False).tobytes()
        arrays.append({"name": e.name, "shape": list(e.shape),
                       "dtype": str(params.dtype), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    masks = []
    if mask is not None:
        flat_mask = np.asarray(mask, dtype=bool).reshape(-1)
        if flat_mask.size != params.count:
            raise FormatError("mask length does not match parameter count")
        for e in params.entries:
            bits = _pack_bits(flat_mask[e.offset:e.offset + e.size])
            masks.append({"name": e.name, "count": e.size, "offset": offset,
                          "nbytes": len(bits)})
            blobs.append(bits)
            offset += len(bits)
    header = {
        "spec": params.spec.to_dict(),
        "seed": seed,
        "dtype": str(params.dtype),
        "arrays": arrays,
        "masks": masks,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def load(path):
    """Read a checkpoint; returns (params, header dict, mask or None)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    data = raw[12 + hlen:]
    spec = ModelSpec.from_dict(header["spec"])
    params = Parameters(spec, dtype=np.dtype(header["dtype"]))
    for rec in header["arrays"]:
        dt = _DTYPES[rec["dtype"]]
        n = int(np.prod(rec["shape"]))
        start = rec["offset"]
        end = start + n * np.dtype(dt).itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated array {rec['name']}")
        arr = np.frombuffer(data[start:end], dtype=dt).reshape(rec["shape"])
        params.view(rec["name"])[...] = arr
    mask = None
    if header["masks"]:
        mask = np.zeros(params.count, dtype=bool)
        pos = 0
        for rec in header["masks"]:
            start, end = rec["offset"], rec["offset"] + rec["nbytes"]
            if end > len(data):
                raise FormatError(f"{path}: truncated mask {rec['name']}")
            mask[pos:pos + rec["count"]] = _unpack_bits(data[start:end], rec["count"])
            pos += rec["count"]
    return params, header, mask


def save_arrays(path, named: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write bare named float arrays in the same container (matrix dumps)."""
    arrays = []
    blobs = []
    offset = 0
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        buf = arr.astype("<f8", copy=False).tobytes()
        arrays.append({"name": name, "shape": list(arr.shape),
                       "dtype": "float64", "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    header = {"spec": None, "seed": None, "dtype": "float64",
              "arrays": arrays, "masks": []}
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    _, hlen = struct.unpack("<II", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    data = raw[12 + hlen:]
    out = {}
    for rec in header["arrays"]:
        dt = _DTYPES[rec["dtype"]]
        n = int(np.prod(rec["shape"]))
        start = rec["offset"]
        out[rec["name"]] = np.frombuffer(
            data[start:start + n * np.dtype(dt).itemsize], dtype=dt).reshape(rec["shape"])
    return out
