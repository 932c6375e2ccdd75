"""Binary weight files (little-endian).

Layout::

    b"SGZ1"                     magic
    u32 version                 currently 1
    u32 header_len
    header                      UTF-8 ``key=value\\n`` lines (model config)
    u32 n_tensors
    per tensor:
        u16 name_len, name (UTF-8)
        u8 dtype code (1 = float32, 2 = float64)
        u8 ndim, u32 dims[ndim]
        u64 nbytes, raw C-order payload
    u32 CRC-32 of everything above

Tensors are written in sorted name order, so save -> load -> save is
byte-identical.
"""

import struct
import zlib
from dataclasses import asdict, fields

import numpy as np

from .model import ModelConfig, ModelParams, tensor_shapes

MAGIC = b"SGZ1"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class WeightFileError(Exception):
    pass


class VersionError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


def _header(config):
    return "".join(f"{k}={v}\n" for k, v in asdict(config).items()).encode("utf-8")


def _parse_header(text):
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    kw = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        if k not in kinds:
            raise WeightFileError(f"unknown header key {k!r}")
        default = getattr(ModelConfig(), k)
        if isinstance(default, bool):
            kw[k] = v == "True"
        elif isinstance(default, int):
            kw[k] = int(v)
        elif isinstance(default, float):
            kw[k] = float(v)
        else:
            kw[k] = v
    return ModelConfig(**kw)


def to_bytes(params):
    out = [MAGIC, struct.pack("<I", VERSION)]
    head = _header(params.config)
    out += [struct.pack("<I", len(head)), head, struct.pack("<I", len(params.tensors))]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise WeightFileError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        nb = name.encode("utf-8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", code, arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", len(raw)), raw]
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save(params, path):
    data = to_bytes(params)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data, config=None):
    """Parse a weight file. If ``config`` is given, tensor shapes must match it."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("not an SGZ1 weight file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"weight file version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I", "header length")
    file_cfg = _parse_header(r.take(hlen, "header").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"{name} dtype")
        if code not in _DTYPES:
            raise WeightFileError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        (nbytes,) = r.unpack("<Q", f"{name} size")
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape)) * dt.itemsize:
            raise TruncatedError(f"{name}: recorded size {nbytes} disagrees with shape {shape}")
        tensors[name] = np.frombuffer(r.take(nbytes, name), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise WeightFileError("checksum mismatch (corrupted file)")
    expect_cfg = file_cfg if config is None else config
    expected = tensor_shapes(expect_cfg)
    if set(expected) != set(tensors):
        raise ShapeMismatchError(f"tensor names differ: file {sorted(tensors)} vs model {sorted(expected)}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatchError(f"{name}: file shape {tensors[name].shape}, model expects {tuple(shape)}")
    want = np.dtype(expect_cfg.dtype)
    tensors = {k: (v if v.dtype == want else v.astype(want)) for k, v in tensors.items()}
    return ModelParams(expect_cfg, tensors)


def load(path, config=None):
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), config)
