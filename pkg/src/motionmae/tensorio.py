"""Binary tensor records, portable pixmaps and frame-directory clips.

Tensor file layout (little-endian)::

    magic  b"MMTN"
    u8     dtype code (see DTYPES)
    u8     ndim
    u64    dims[ndim]
    ...    payload, C order
"""
from __future__ import annotations

import io
import os
import re
import struct
from pathlib import Path

import numpy as np

from .errors import BadFormat, ShapeMismatch, TruncatedFile

TENSOR_MAGIC = b"MMTN"
DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<u1", 5: "<i4", 6: "|b1"}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFile(f"expected {n} bytes, got {len(data)}")
    return data


def write_tensor_record(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    le = np.ascontiguousarray(arr, dtype=DTYPES[code])
    fh.write(struct.pack("<BB", code, le.ndim))
    fh.write(struct.pack(f"<{le.ndim}Q", *le.shape))
    fh.write(le.tobytes())


def read_tensor_record(fh) -> np.ndarray:
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in DTYPES:
        raise BadFormat(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    dt = np.dtype(DTYPES[code])
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    arr = np.frombuffer(_read_exact(fh, nbytes), dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        write_tensor_record(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != TENSOR_MAGIC:
            raise BadFormat(f"{path}: not a tensor file")
        return read_tensor_record(fh)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    write_tensor_record(buf, arr)
    return buf.getvalue()


# --------------------------------------------------------------------------
# portable pixmaps (P6, maxval 255)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected [H, W, 3], got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap into float values in [0, 1]."""
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if not m:
        raise BadFormat(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise BadFormat(f"{path}: 16-bit PPM is not supported")
    body = data[m.end():m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise TruncatedFile(f"{path}: truncated pixel data")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).astype(np.float32) / maxval


def read_frame_dir(path) -> np.ndarray:
    """All ``*.ppm`` files, lexicographically ordered, as [T, H, W, 3]."""
    files = sorted(f for f in os.listdir(path) if f.lower().endswith(".ppm"))
    if not files:
        raise FileNotFoundError(f"{path}: no .ppm frames")
    return np.stack([read_ppm(os.path.join(path, f)) for f in files])


def write_frame_dir(path, frames: np.ndarray) -> None:
    os.makedirs(path, exist_ok=True)
    width = max(4, len(str(len(frames))))
    for i, f in enumerate(frames):
        write_ppm(os.path.join(path, f"{i:0{width}d}.ppm"), f)


def load_video(path) -> np.ndarray:
    """A frame directory or a tensor file holding [T, H, W, 3]."""
    p = Path(path)
    arr = read_frame_dir(p) if p.is_dir() else load_tensor(p)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"{path}: expected [T, H, W, 3], got {arr.shape}")
    return arr
