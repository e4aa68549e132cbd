"""``PFEM`` per-frame extraction archive.

Layout (little-endian)::

    b"PFEM" | u32 version=1 | u32 T | u32 D | u32 period_ms=80 | u32 offset_ms
    | f32[T*D] embeddings (row-major) | f32[T] vad_prob | f32[T] osd_prob
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .model import PerFrameOutput, _atomic_write

MAGIC = b"PFEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class ArchiveError(ValueError):
    pass


@dataclass
class ExtractionArchive:
    embeddings: np.ndarray  # T x D float32
    vad_prob: np.ndarray  # T float32
    osd_prob: np.ndarray  # T float32
    period_ms: int = 80
    offset_ms: int = 40

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise ArchiveError("embeddings must be T x D")
        self.vad_prob = np.asarray(self.vad_prob, dtype=np.float32).reshape(-1)
        self.osd_prob = np.asarray(self.osd_prob, dtype=np.float32).reshape(-1)
        T = len(self.embeddings)
        if len(self.vad_prob) != T or len(self.osd_prob) != T:
            raise ArchiveError("vad/osd length differs from embedding count")
        for p in (self.vad_prob, self.osd_prob):
            if T and (p.min() < 0 or p.max() > 1):
                raise ArchiveError("probabilities must lie in [0, 1]")

    @classmethod
    def from_output(cls, out: PerFrameOutput) -> "ExtractionArchive":
        return cls(out.embeddings, out.vad_prob, out.osd_prob, int(round(out.period_ms)), int(round(out.origin_ms)))

    def __len__(self):
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return (self.offset_ms + self.period_ms * np.arange(len(self))) / 1000.0

    def to_bytes(self) -> bytes:
        T, D = self.embeddings.shape
        return b"".join([
            _HEADER.pack(MAGIC, VERSION, T, D, self.period_ms, self.offset_ms),
            self.embeddings.astype("<f4").tobytes(),
            self.vad_prob.astype("<f4").tobytes(),
            self.osd_prob.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ExtractionArchive":
        if len(blob) < _HEADER.size:
            raise ArchiveError("archive shorter than header")
        magic, version, T, D, period, offset = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ArchiveError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ArchiveError(f"unsupported version {version}")
        expected = _HEADER.size + 4 * (T * D + 2 * T)
        if len(blob) != expected:
            raise ArchiveError(f"byte length {len(blob)} does not match header ({expected})")
        pos = _HEADER.size
        emb = np.frombuffer(blob, "<f4", T * D, pos).reshape(T, D)
        pos += 4 * T * D
        vad = np.frombuffer(blob, "<f4", T, pos)
        osd = np.frombuffer(blob, "<f4", T, pos + 4 * T)
        return cls(emb.astype(np.float32), vad.astype(np.float32), osd.astype(np.float32), period, offset)


def save_archive(path, archive: ExtractionArchive) -> None:
    _atomic_write(path, archive.to_bytes())


def load_archive(path) -> ExtractionArchive:
    with open(path, "rb") as fh:
        return ExtractionArchive.from_bytes(fh.read())
