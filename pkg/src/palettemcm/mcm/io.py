"""Binary containers: MCM1 checkpoints and PTEB embedding matrices.

MCM1 layout::

    b"MCM1" | u32 LE header length | JSON header | f32 LE tensor data

The header records the model config and, for each tensor, its name, shape and
byte offset relative to the start of the data section.

PTEB layout::

    b"PTEB" | u8 version (1) | u32 LE rows | u32 LE cols | rows*cols f32 LE
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ..errors import FormatError, InvalidConfig, IoError, ShapeMismatch, VersionError
from .model import McmConfig, param_shapes

CKPT_MAGIC = b"MCM1"
CKPT_VERSION = 1
PTEB_MAGIC = b"PTEB"
PTEB_VERSION = 1
_F32 = np.dtype("<f4")


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None


def _write_bytes(path, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def checkpoint_bytes(params: dict, cfg: McmConfig) -> bytes:
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        raise ShapeMismatch("parameter names do not match the config")
    tensors, chunks, offset = [], [], 0
    for name, shape in shapes.items():
        arr = np.ascontiguousarray(params[name], dtype=_F32)
        if arr.shape != shape:
            raise ShapeMismatch(f"{name}: shape {arr.shape} != {shape}")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": CKPT_VERSION,
        "dtype": "float32",
        "config": cfg.to_dict(),
        "tensors": tensors,
    }
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def save_checkpoint(params: dict, cfg: McmConfig, path) -> None:
    _write_bytes(path, checkpoint_bytes(params, cfg))


def load_checkpoint(path):
    """Read an MCM1 file; returns ``(params, cfg)`` with float32 tensors."""
    data = _read_bytes(path)
    if len(data) < 8 or data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an MCM1 checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    try:
        cfg = McmConfig.from_dict(header["config"])
    except (KeyError, TypeError, InvalidConfig) as exc:
        raise FormatError(f"{path}: invalid config in header ({exc})") from None
    body = memoryview(data)[8 + hlen :]
    expected = param_shapes(cfg)
    params = {}
    for t in header.get("tensors", []):
        name, shape = t["name"], tuple(t["shape"])
        if expected.get(name) != shape:
            raise FormatError(f"{path}: tensor {name} has unexpected shape {shape}")
        start, n = t["offset"], t["nbytes"]
        if n != int(np.prod(shape)) * 4 or start + n > len(body):
            raise FormatError(f"{path}: truncated tensor data for {name}")
        params[name] = np.frombuffer(body[start : start + n], dtype=_F32).reshape(shape).astype(np.float32)
    if set(params) != set(expected):
        raise FormatError(f"{path}: missing tensors {sorted(set(expected) - set(params))}")
    return params, cfg


# ---------------------------------------------------------------------------
# PTEB
# ---------------------------------------------------------------------------

def pteb_bytes(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatch(f"PTEB payload must be a non-empty 2-D matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeMismatch("PTEB payload contains non-finite values")
    header = PTEB_MAGIC + struct.pack("<BII", PTEB_VERSION, m.shape[0], m.shape[1])
    return header + np.ascontiguousarray(m, dtype=_F32).tobytes()


def write_pteb(path, matrix) -> None:
    _write_bytes(path, pteb_bytes(matrix))


def read_pteb(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 13 or data[:4] != PTEB_MAGIC:
        raise FormatError(f"{path}: not a PTEB file")
    version, rows, cols = struct.unpack("<BII", data[4:13])
    if version != PTEB_VERSION:
        raise VersionError(f"{path}: unsupported PTEB version {version}")
    if rows < 1 or cols < 1 or len(data) != 13 + rows * cols * 4:
        raise FormatError(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(data, dtype=_F32, offset=13).reshape(rows, cols).astype(np.float32)


def stub_condition_encoder(text: str, rows: int, cols: int) -> np.ndarray:
    """Deterministic stand-in for a text/image encoder.

    A 64-bit BLAKE2b digest of the string seeds a PCG64 stream that fills a
    ``rows x cols`` float32 matrix with values in [-1, 1).
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    seed = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(rows, cols)).astype(np.float32)
