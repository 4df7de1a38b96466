"""On-disk formats: BVOL volumes, model checkpoints, PGM slices.

BVOL layout (all integers little-endian)::

    magic   4 bytes  b"BVOL"
    version u16      1
    dtype   u8       0 = float32, 1 = uint8
    ndim    u8
    dims    ndim x u32
    payload row-major array, prod(dims) * itemsize bytes

Checkpoints use magic ``b"BCKP"``, a u16 version, a u32 header length, a
UTF-8 JSON header (architecture config, tensor index, free-form metadata),
then every tensor as little-endian float32 in header order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import BadMagic, DataError, TruncatedPayload, UnsupportedVersion
from .model import ArchConfig, ModelState

BVOL_MAGIC = b"BVOL"
BVOL_VERSION = 1
CKPT_MAGIC = b"BCKP"
CKPT_VERSION = 1

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def bvol_header(shape, dtype) -> bytes:
    code = DTYPE_CODES.get(np.dtype(dtype))
    if code is None:
        raise DataError(f"BVOL supports float32 and uint8, not {dtype}")
    shape = tuple(int(s) for s in shape)
    return BVOL_MAGIC + struct.pack(f"<HBB{len(shape)}I", BVOL_VERSION, code, len(shape), *shape)


def payload_nbytes(header: bytes) -> int:
    """Payload size declared by a BVOL header."""
    _, code, ndim = struct.unpack_from("<HBB", header, 4)
    dims = struct.unpack_from(f"<{ndim}I", header, 8)
    return int(np.prod(dims, dtype=np.int64)) * DTYPES[code].itemsize


def encode_bvol(v: np.ndarray) -> bytes:
    v = np.asarray(v)
    if v.dtype not in DTYPE_CODES:
        v = v.astype(np.float32)
    code = DTYPE_CODES[v.dtype]
    return bvol_header(v.shape, v.dtype) + np.ascontiguousarray(v, dtype=DTYPES[code]).tobytes()


def decode_bvol(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != BVOL_MAGIC:
        raise BadMagic("not a BVOL file")
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != BVOL_VERSION:
        raise UnsupportedVersion(f"BVOL version {version} is not supported")
    if code not in DTYPES:
        raise DataError(f"unknown BVOL dtype code {code}")
    head = 8 + 4 * ndim
    if len(buf) < head:
        raise TruncatedPayload("BVOL header is truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dtype = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - head < nbytes:
        raise TruncatedPayload(f"expected {nbytes} payload bytes, found {len(buf) - head}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=head)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_bvol(v, path) -> None:
    atomic_write(path, encode_bvol(v))


def read_bvol(path) -> np.ndarray:
    return decode_bvol(Path(path).read_bytes())


def encode_checkpoint(m: ModelState, meta: dict | None = None) -> bytes:
    index = [{"name": k, "shape": list(v.shape)} for k, v in m.params.items()]
    header = {"arch": m.cfg.to_dict(), "tensors": index, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in m.params.values())
    return CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hbytes)) + hbytes + body


def decode_checkpoint(buf: bytes) -> tuple[ModelState, dict]:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic("not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} is not supported")
    start = 10
    if len(buf) < start + hlen:
        raise TruncatedPayload("checkpoint header is truncated")
    header = json.loads(buf[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    params = OrderedDict()
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if len(buf) < offset + 4 * n:
            raise TruncatedPayload(f"checkpoint payload truncated at tensor {t['name']}")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(t["shape"])
        params[t["name"]] = arr.astype(np.float32)
        offset += 4 * n
    cfg = ArchConfig.from_dict(header["arch"])
    return ModelState(cfg, params), header.get("meta", {})


def save_checkpoint(m: ModelState, path, meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(m, meta))


def load_checkpoint(path) -> tuple[ModelState, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def slice_to_pgm(v: np.ndarray, axis: str, index: int) -> bytes:
    """8-bit binary PGM of one slice, min-max scaled to 0..255."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 4:
        v = v[..., 0]
    ax = {"z": 0, "y": 1, "x": 2}[axis]
    if not 0 <= index < v.shape[ax]:
        raise DataError(f"slice index {index} out of range for axis {axis} of size {v.shape[ax]}")
    img = np.take(v, index, axis=ax)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo) * 255.0
    pix = np.round(scaled).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()
