"""Binary checkpoint files.

Layout, all integers little-endian::

    b"TDRL" | u32 format_version | u32 n_records
    n_records x ( u32 name_len | name (utf-8)
                  u8 dtype_len | dtype (numpy str, or "json")
                  u32 ndim | ndim x u64 dim
                  u64 n_bytes | raw bytes )
    u32 CRC-32 of every preceding byte

Records are written in sorted name order and JSON payloads are canonical
(sorted keys, no whitespace), so save -> load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, CorruptChecksum, IoError, VersionMismatch

MAGIC = b"TDRL"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and, optionally, resume its training."""

    encoder_config: dict
    params: dict
    buffers: dict = field(default_factory=dict)
    optimizer: dict | None = None       # {"m": {...}, "v": {...}, "t": int}
    rng: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    extra_arrays: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _records(ckpt):
    out = {
        "json/encoder_config": ckpt.encoder_config,
        "json/rng": ckpt.rng,
        "json/history": ckpt.history,
        "json/meta": ckpt.meta,
    }
    for k, v in ckpt.params.items():
        out[f"param/{k}"] = np.asarray(v)
    for k, v in ckpt.buffers.items():
        out[f"buffer/{k}"] = np.asarray(v)
    for k, v in ckpt.extra_arrays.items():
        out[f"extra/{k}"] = np.asarray(v)
    if ckpt.optimizer is not None:
        out["json/optim_t"] = int(ckpt.optimizer["t"])
        for moment in ("m", "v"):
            for k, v in ckpt.optimizer[moment].items():
                out[f"optim_{moment}/{k}"] = np.asarray(v)
    return out


def encode_checkpoint(ckpt):
    records = _records(ckpt)
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(records))]
    for name in sorted(records):
        value = records[name]
        if name.startswith("json/"):
            dtype, shape, raw = "json", (), _canonical_json(value)
        else:
            arr = np.ascontiguousarray(value)
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            dtype, shape, raw = arr.dtype.str, arr.shape, arr.tobytes()
        name_b, dtype_b = name.encode("utf-8"), dtype.encode("ascii")
        parts.append(struct.pack("<I", len(name_b)) + name_b)
        parts.append(struct.pack("<B", len(dtype_b)) + dtype_b)
        parts.append(struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptChecksum("not a checkpoint file or truncated header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptChecksum("CRC-32 mismatch; file is truncated or corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version > FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version} is newer than supported {FORMAT_VERSION}")

    pos, records = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos); pos += 4
            name = body[pos:pos + n].decode("utf-8"); pos += n
            (n,) = struct.unpack_from("<B", body, pos); pos += 1
            dtype = body[pos:pos + n].decode("ascii"); pos += n
            (ndim,) = struct.unpack_from("<I", body, pos); pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos); pos += 8 * ndim
            (n,) = struct.unpack_from("<Q", body, pos); pos += 8
            raw = body[pos:pos + n]; pos += n
            if dtype == "json":
                records[name] = json.loads(raw.decode("utf-8"))
            else:
                records[name] = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed record stream: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last record")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)}

    optimizer = None
    if "json/optim_t" in records:
        optimizer = {"m": group("optim_m/"), "v": group("optim_v/"), "t": records["json/optim_t"]}
    return Checkpoint(
        encoder_config=records["json/encoder_config"],
        params=group("param/"),
        buffers=group("buffer/"),
        optimizer=optimizer,
        rng=records["json/rng"],
        history=records["json/history"],
        meta=records["json/meta"],
        extra_arrays=group("extra/"),
        format_version=version,
    )


def save_checkpoint(path, ckpt):
    blob = encode_checkpoint(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


__all__ = ["Checkpoint", "FORMAT_VERSION", "decode_checkpoint", "encode_checkpoint",
           "load_checkpoint", "save_checkpoint"]
