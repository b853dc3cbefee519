"""Versioned checkpoint container.

Layout (little-endian)::

    magic b"MMCK" | u32 version | u32 meta length | meta JSON (utf-8)
    u32 tensor count | per tensor: u16 name length, name, tensor record

The JSON metadata carries the encoder/decoder configs, the checkpoint kind
and the optimizer step, so a resume or a fine-tune load can verify every
expected tensor name and shape.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import lgi_former as E
from .errors import BadFormat, ShapeMismatch, TruncatedFile, VersionMismatch
from .tensorio import _read_exact, read_tensor_record, write_tensor_record

MAGIC = b"MMCK"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            write_tensor_record(fh, tensors[name])


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        try:
            if _read_exact(fh, 4) != MAGIC:
                raise BadFormat(f"{path}: not a checkpoint file")
            version, mlen = struct.unpack("<II", _read_exact(fh, 8))
            if version != VERSION:
                raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
            meta = json.loads(_read_exact(fh, mlen).decode("utf-8"))
            (count,) = struct.unpack("<I", _read_exact(fh, 4))
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
                name = _read_exact(fh, nlen).decode("utf-8")
                tensors[name] = read_tensor_record(fh)
        except (TruncatedFile, struct.error) as exc:
            raise TruncatedFile(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return tensors, meta


def verify_shapes(tensors: dict, expected: dict[str, tuple], what: str) -> None:
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeMismatch(f"{what}: missing tensors {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatch(f"{what}: {name} has shape {tensors[name].shape}, expected {shape}")


def check_config(meta: dict, cfg: E.EncoderConfig) -> None:
    stored = meta.get("encoder")
    if stored is None:
        raise VersionMismatch("checkpoint carries no encoder config")
    # pooling only changes how features are read out, never a tensor shape
    a = {k: v for k, v in E.EncoderConfig.from_dict(stored).to_dict().items() if k != "pool"}
    b = {k: v for k, v in cfg.to_dict().items() if k != "pool"}
    if a != b:
        diff = sorted(k for k in a if a[k] != b.get(k))
        raise VersionMismatch(f"checkpoint encoder config differs in {diff}: stored {[a[k] for k in diff]}, "
                              f"requested {[b.get(k) for k in diff]}")


def load_encoder(path, cfg: E.EncoderConfig | None = None) -> tuple[dict[str, np.ndarray], E.EncoderConfig, dict]:
    """Encoder weights only; decoder, heads, mask token and optimizer state are dropped."""
    tensors, meta = load_checkpoint(path)
    stored = E.EncoderConfig.from_dict(meta["encoder"])
    if cfg is not None:
        check_config(meta, cfg)
    cfg = stored if cfg is None else cfg
    enc = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    expected = E.encoder_shapes(cfg)
    verify_shapes(enc, expected, str(path))
    extra = sorted(set(enc) - set(expected))
    if extra:
        raise ShapeMismatch(f"{path}: unexpected encoder tensors {extra[:5]}")
    return enc, cfg, meta
