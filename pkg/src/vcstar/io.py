"""WAV, FEA1 feature files and the checkpoint container."""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import wave
from pathlib import Path
from typing import BinaryIO

import numpy as np

FEA1_MAGIC = b"FEA1"
KIND_MCC, KIND_F0, KIND_ENVELOPE = 0, 1, 2

CKPT_MAGIC = b"VCSK"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# --------------------------------------------------------------------------
# WAV


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM or 32-bit float WAV into float64 samples in [-1, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise FormatError(f"{path}: {channels} channels; only mono is supported")
    if tag == 1 and bits == 16:
        samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise FormatError(f"{path}: unsupported encoding (format {tag}, {bits} bits)")
    return samples, rate


def write_wav(path, samples: np.ndarray, rate: int) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(rate))
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# FEA1


def encode_fea1(values: np.ndarray, kind: int) -> bytes:
    values = np.asarray(values)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    if values.ndim != 2:
        raise FormatError("FEA1 holds a 2-d Q x N matrix")
    q, n = values.shape
    header = FEA1_MAGIC + struct.pack("<IIB", q, n, kind)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_fea1(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 13 or buf[:4] != FEA1_MAGIC:
        raise FormatError("missing FEA1 magic")
    q, n, kind = struct.unpack("<IIB", buf[4:13])
    if kind not in (KIND_MCC, KIND_F0, KIND_ENVELOPE):
        raise FormatError(f"unknown FEA1 kind {kind}")
    expected = 13 + 4 * q * n
    if len(buf) != expected:
        raise FormatError(f"FEA1 payload is {len(buf)} bytes, expected {expected}")
    values = np.frombuffer(buf, dtype="<f4", offset=13).reshape(q, n).astype(np.float32)
    return values, kind


def write_fea1(path, values: np.ndarray, kind: int) -> None:
    atomic_write(path, encode_fea1(values, kind))


def read_fea1(path) -> tuple[np.ndarray, int]:
    try:
        return decode_fea1(Path(path).read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def atomic_write(path, payload: bytes) -> None:
    """Write via a temporary file and rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# checkpoint container
#
# layout: magic "VCSK", u32 version, u32 header length, UTF-8 JSON header,
# u32 tensor count, then per tensor: u32 name length, name, u32 ndim,
# ndim x u32 dims, little-endian f32 payload.


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta)) + meta)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        bname = name.encode()
        out.write(struct.pack("<I", len(bname)) + bname)
        out.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated checkpoint")
    return b


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    f = io.BytesIO(buf)
    if _read_exact(f, 4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", _read_exact(f, 8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(_read_exact(f, hlen).decode())
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, nlen).decode()
        (ndim,) = struct.unpack("<I", _read_exact(f, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(shape)
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint tensors")
    return header, tensors
