"""On-disk formats: framed binary containers and PGM dumps.

Container layout (datasets, magic TSA1; checkpoints, magic TSAC):

    magic(4) | header_len(u32 LE) | JSON header | payload | crc32(u32 LE)

The header declares every array's name/shape/dtype plus the exact
payload byte count; payloads are raw little-endian array bytes in
header order. Corruption modes map to distinct errors: unparsable
magic/header -> DatasetFormatError, file shorter than promised ->
DatasetTruncatedError, declared shapes not adding up to the declared
payload size -> DatasetShapeError, CRC mismatch -> DatasetChecksumError.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    DatasetChecksumError,
    DatasetFormatError,
    DatasetShapeError,
    DatasetTruncatedError,
)
from .scenegen import SceneSample

DATASET_MAGIC = b"TSA1"
CHECKPOINT_MAGIC = b"TSAC"

_DTYPES = {"float32": np.float32, "float64": np.float64, "uint8": np.uint8}


def _le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def write_framed(path, magic: bytes, header: dict, arrays: list[np.ndarray]):
    payload = b"".join(_le(a) for a in arrays)
    header = dict(header)
    header["payload_bytes"] = len(payload)
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def read_framed(path, magic: bytes) -> tuple[dict, bytes]:
    """Parse and verify a framed container; returns (header, payload)."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DatasetTruncatedError(f"{path}: file shorter than the fixed 8-byte prologue")
    if data[:4] != magic:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise DatasetTruncatedError(f"{path}: header cut short ({len(data) - 8} of {hlen} bytes)")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: header is not valid JSON: {e}") from e
    if "payload_bytes" not in header or "arrays" not in header:
        raise DatasetFormatError(f"{path}: header missing payload_bytes/arrays")
    nbytes = int(header["payload_bytes"])
    body = data[8 + hlen :]
    if len(body) < nbytes + 4:
        raise DatasetTruncatedError(f"{path}: payload cut short ({len(body)} of {nbytes + 4} bytes)")
    if len(body) > nbytes + 4:
        raise DatasetFormatError(f"{path}: {len(body) - nbytes - 4} trailing bytes after checksum")
    payload = body[:nbytes]
    (crc,) = struct.unpack("<I", body[nbytes : nbytes + 4])
    if zlib.crc32(payload) != crc:
        raise DatasetChecksumError(f"{path}: payload CRC32 mismatch")

    declared = 0
    for spec in header["arrays"]:
        if spec.get("dtype") not in _DTYPES:
            raise DatasetFormatError(f"{path}: unknown dtype {spec.get('dtype')!r}")
        declared += int(np.prod(spec["shape"], dtype=np.int64)) * np.dtype(_DTYPES[spec["dtype"]]).itemsize
    if declared != nbytes:
        raise DatasetShapeError(f"{path}: declared shapes need {declared} bytes, payload has {nbytes}")
    return header, payload


def _unpack_arrays(header: dict, payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    off = 0
    for spec in header["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]]).newbyteorder("<")
        shape = tuple(spec["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=off)
        out[spec["name"]] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        off += size
    return out


# ---------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------


def write_dataset(path, samples: list[SceneSample]):
    if not samples:
        raise DatasetFormatError("refusing to write an empty dataset")
    h, w = samples[0].occ_gt.shape
    arrays = []
    specs = []
    for i, s in enumerate(samples):
        if s.occ_gt.shape != (h, w):
            raise DatasetShapeError(f"sample {i} is {s.occ_gt.shape}, expected {(h, w)}")
        for name, channels, dtype in SceneSample.FIELD_SPECS:
            arr = np.asarray(getattr(s, name), dtype=dtype)
            shape = (channels, h, w) if channels else (h, w)
            if arr.shape != shape:
                raise DatasetShapeError(f"sample {i} field {name}: {arr.shape} != {shape}")
            arrays.append(arr)
            specs.append({"name": f"{i}/{name}", "shape": list(shape), "dtype": np.dtype(dtype).name})
    header = {"kind": "dataset", "count": len(samples), "height": h, "width": w, "arrays": specs}
    write_framed(path, DATASET_MAGIC, header, arrays)


def read_dataset(path) -> list[SceneSample]:
    header, payload = read_framed(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise DatasetFormatError(f"{path}: container kind {header.get('kind')!r} is not a dataset")
    arrays = _unpack_arrays(header, payload)
    count = int(header["count"])
    samples = []
    for i in range(count):
        try:
            fields = {name: arrays[f"{i}/{name}"] for name, _, _ in SceneSample.FIELD_SPECS}
        except KeyError as e:
            raise DatasetFormatError(f"{path}: missing array {e} for sample {i}") from e
        samples.append(SceneSample(**fields))
    return samples


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, step: int):
    """Parameters keyed by module path, plus the config snapshot and step."""
    names = list(params)
    arrays = [np.asarray(params[k]) for k in names]
    specs = [
        {"name": k, "shape": list(a.shape), "dtype": a.dtype.name}
        for k, a in zip(names, arrays)
    ]
    header = {"kind": "checkpoint", "step": int(step), "config": config, "arrays": specs}
    write_framed(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, int]:
    header, payload = read_framed(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise DatasetFormatError(f"{path}: container kind {header.get('kind')!r} is not a checkpoint")
    return _unpack_arrays(header, payload), header["config"], int(header["step"])


# ---------------------------------------------------------------------
# PGM dumps
# ---------------------------------------------------------------------


def write_pgm(path, values: np.ndarray, maxval: int = 65535):
    """16-bit binary PGM, values scaled so the array max maps to maxval."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise DatasetShapeError(f"PGM wants a 2-D array, got shape {v.shape}")
    top = float(v.max())
    scaled = np.zeros_like(v) if top <= 0 else np.clip(v, 0, None) / top * maxval
    pix = scaled.astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{v.shape[1]} {v.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Minimal reader for the PGMs this package writes (P5, 16-bit)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise DatasetFormatError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    dt = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(parts[3], dtype=dt, count=h * w).reshape(h, w)
    return arr.astype(np.int64)
