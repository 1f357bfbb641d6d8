"""Binary container formats: named-tensor checkpoints (ADVASVCK) and
utterance datasets (ADVASVDS).

Both are little-endian, start with an 8-byte magic and a version byte, and end
with a CRC32 of the body (every byte between the version byte and the CRC).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"ADVASVCK"
DATA_MAGIC = b"ADVASVDS"
VERSION = 1
FLAG_ADVERSARIAL = 0x01


class FormatError(ValueError):
    """Malformed or corrupted file; message carries the byte offset."""


class _Reader:
    def __init__(self, buf: bytes, start: int):
        self.buf = buf
        self.pos = start

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what} at byte {self.pos} (need {n}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def _split_envelope(buf: bytes, magic: bytes) -> bytes:
    if len(buf) < len(magic) + 1 + 4:
        raise FormatError(f"file too short ({len(buf)} bytes) at byte 0")
    if buf[:len(magic)] != magic:
        raise FormatError(f"bad magic {buf[:len(magic)]!r} at byte 0")
    version = buf[len(magic)]
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte {len(magic)}")
    body = buf[len(magic) + 1:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"CRC32 mismatch at byte {len(buf) - 4}")
    return body


def _wrap(magic: bytes, body: bytes) -> bytes:
    return magic + bytes([VERSION]) + body + struct.pack("<I", zlib.crc32(body))


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return _wrap(CKPT_MAGIC, b"".join(parts))


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    _split_envelope(buf, CKPT_MAGIC)
    r = _Reader(buf[:-4], len(CKPT_MAGIC) + 1)
    (count,) = r.unpack("I", "tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (rank,) = r.unpack("B", "rank")
        dims = r.unpack(f"{rank}I", "dims") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(r.take(8 * n, f"values of {name!r}"), dtype="<f8").astype(np.float64)
        out[name] = vals.reshape(dims)
    if r.pos != len(buf) - 4:
        raise FormatError(f"trailing bytes at byte {r.pos}")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetFile:
    speaker_ids: list[int]
    features: list[np.ndarray]
    adversarial: bool = False
    meta: str = ""  # e.g. "threat=aware;config=<hash>"

    def __eq__(self, other):
        if not isinstance(other, DatasetFile):
            return NotImplemented
        return (
            self.speaker_ids == other.speaker_ids
            and self.adversarial == other.adversarial
            and self.meta == other.meta
            and len(self.features) == len(other.features)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )


def encode_dataset(ds: DatasetFile) -> bytes:
    meta = ds.meta.encode("utf-8")
    parts = [
        struct.pack("<B", FLAG_ADVERSARIAL if ds.adversarial else 0),
        struct.pack("<H", len(meta)) + meta,
        struct.pack("<Q", len(ds.features)),
    ]
    for spk, feat in zip(ds.speaker_ids, ds.features):
        feat = np.asarray(feat, dtype="<f8")
        t, c = feat.shape
        parts.append(struct.pack("<III", spk, t, c))
        parts.append(np.ascontiguousarray(feat).tobytes())
    return _wrap(DATA_MAGIC, b"".join(parts))


def decode_dataset(buf: bytes) -> DatasetFile:
    _split_envelope(buf, DATA_MAGIC)
    r = _Reader(buf[:-4], len(DATA_MAGIC) + 1)
    (flags,) = r.unpack("B", "flags")
    (mlen,) = r.unpack("H", "meta length")
    meta = r.take(mlen, "meta").decode("utf-8")
    (n,) = r.unpack("Q", "utterance count")
    spk, feats = [], []
    for i in range(n):
        s, t, c = r.unpack("III", f"record header {i}")
        vals = np.frombuffer(r.take(8 * t * c, f"record {i} values"), dtype="<f8").astype(np.float64)
        spk.append(s)
        feats.append(vals.reshape(t, c))
    if r.pos != len(buf) - 4:
        raise FormatError(f"trailing bytes at byte {r.pos}")
    return DatasetFile(spk, feats, bool(flags & FLAG_ADVERSARIAL), meta)


def save_dataset_file(path, ds: DatasetFile) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset_file(path) -> DatasetFile:
    return decode_dataset(Path(path).read_bytes())
