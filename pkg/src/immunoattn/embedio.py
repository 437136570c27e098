"""VVEB embedding container and deterministic synthetic embeddings.

Layout (little-endian)::

    b"VVEB" | version u32 = 1 | record_count u64
    per record: id_len u16 | id utf-8 | L u32 | d u32
                | L*d f32 row-major | L u8 fine tokens | L u16 coarse tokens
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .datasets import ProteinRecord, residue_indices
from .errors import FormatError

MAGIC = b"VVEB"
VERSION = 1
FINE_VOCAB = 20
COARSE_VOCAB = 4096


@dataclass
class EmbeddingBundle:
    id: str
    seq_embedding: np.ndarray  # (L, d) float32 at rest
    fine_tokens: np.ndarray  # (L,) ids in [0, 20)
    coarse_tokens: np.ndarray  # (L,) ids in [0, 4096)

    @property
    def length(self) -> int:
        return int(self.seq_embedding.shape[0])

    @property
    def dim(self) -> int:
        return int(self.seq_embedding.shape[1])

    def validate(self) -> None:
        emb = self.seq_embedding
        if not self.id:
            raise FormatError("bundle id must be nonempty")
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise FormatError(f"bundle {self.id!r}: embedding must be L x d with L, d >= 1")
        L = emb.shape[0]
        if self.fine_tokens.shape != (L,) or self.coarse_tokens.shape != (L,):
            raise FormatError(f"bundle {self.id!r}: token sequences must have length {L}")
        if not np.all(np.isfinite(emb)):
            raise FormatError(f"bundle {self.id!r}: non-finite embedding entry")
        _check_range(self.id, "fine", self.fine_tokens, FINE_VOCAB)
        _check_range(self.id, "coarse", self.coarse_tokens, COARSE_VOCAB)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingBundle):
            return NotImplemented
        return (
            self.id == other.id
            and self.seq_embedding.shape == other.seq_embedding.shape
            and self.seq_embedding.astype("<f4").tobytes()
            == other.seq_embedding.astype("<f4").tobytes()
            and np.array_equal(self.fine_tokens, other.fine_tokens)
            and np.array_equal(self.coarse_tokens, other.coarse_tokens)
        )


def _check_range(rid: str, name: str, tokens: np.ndarray, vocab: int) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        bad = int(tokens[(tokens < 0) | (tokens >= vocab)][0])
        raise FormatError(f"bundle {rid!r}: {name} token {bad} outside [0, {vocab})")


def encode_bundles(bundles: Sequence[EmbeddingBundle]) -> bytes:
    seen: set[str] = set()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", VERSION, len(bundles)))
    for b in bundles:
        b.validate()
        if b.id in seen:
            raise FormatError(f"duplicate bundle id {b.id!r}")
        seen.add(b.id)
        rid = b.id.encode("utf-8")
        if len(rid) > 0xFFFF:
            raise FormatError(f"bundle id too long ({len(rid)} bytes)")
        L, d = b.seq_embedding.shape
        out.write(struct.pack("<H", len(rid)))
        out.write(rid)
        out.write(struct.pack("<II", L, d))
        out.write(np.ascontiguousarray(b.seq_embedding, dtype="<f4").tobytes())
        out.write(np.asarray(b.fine_tokens, dtype="u1").tobytes())
        out.write(np.asarray(b.coarse_tokens, dtype="<u2").tobytes())
    return out.getvalue()


def write_bundles(bundles: Sequence[EmbeddingBundle], path: str | os.PathLike) -> int:
    """Write bundles to ``path``; returns the number of bytes written."""
    payload = encode_bundles(bundles)
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_bundles(buf: bytes) -> list[EmbeddingBundle]:
    r = _Reader(buf)
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise FormatError("not a VVEB file")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported VVEB version {version}")
    (count,) = r.unpack("<Q", "record count")
    bundles: list[EmbeddingBundle] = []
    seen: set[str] = set()
    for n in range(count):
        (id_len,) = r.unpack("<H", f"record {n} id length")
        try:
            rid = bytes(r.take(id_len, f"record {n} id")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"record {n}: id is not valid UTF-8") from None
        L, d = r.unpack("<II", f"record {n} shape")
        if L < 1 or d < 1:
            raise FormatError(f"record {rid!r}: L and d must be >= 1, got {L} x {d}")
        emb = np.frombuffer(r.take(4 * L * d, f"record {rid!r} embedding"), dtype="<f4")
        fine = np.frombuffer(r.take(L, f"record {rid!r} fine tokens"), dtype="u1")
        coarse = np.frombuffer(r.take(2 * L, f"record {rid!r} coarse tokens"), dtype="<u2")
        b = EmbeddingBundle(
            rid,
            emb.reshape(L, d).astype(np.float32),
            fine.astype(np.int64),
            coarse.astype(np.int64),
        )
        b.validate()
        if rid in seen:
            raise FormatError(f"duplicate bundle id {rid!r}")
        seen.add(rid)
        bundles.append(b)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last record")
    return bundles


def read_bundles(path: str | os.PathLike) -> list[EmbeddingBundle]:
    with open(path, "rb") as fh:
        return decode_bundles(fh.read())


def _sequence_key(sequence: str) -> list[int]:
    digest = hashlib.sha256(sequence.encode("ascii")).digest()
    return list(struct.unpack("<4I", digest[:16]))


def synthetic_bundle(record: ProteinRecord, d: int, seed: int = 0) -> EmbeddingBundle:
    """Deterministic stand-in for extractor output.

    Row i of the embedding comes from a normal stream keyed by
    (seed, sequence digest, i); channel j is the j-th draw of that stream.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    seq = record.sequence
    key = _sequence_key(seq)
    L = len(seq)
    emb = np.empty((L, d), dtype=np.float32)
    coarse = np.empty(L, dtype=np.int64)
    for i in range(L):
        rng = np.random.default_rng([seed, *key, i])
        emb[i] = rng.standard_normal(d)
        h = hashlib.blake2b(struct.pack("<4IQ", *key, i), digest_size=8).digest()
        coarse[i] = int.from_bytes(h, "little") % COARSE_VOCAB
    fine = (residue_indices(seq) + np.arange(L)) % FINE_VOCAB
    return EmbeddingBundle(record.id, emb, fine.astype(np.int64), coarse)


def synthetic_bundles(
    records: Iterable[ProteinRecord], d: int, seed: int = 0
) -> list[EmbeddingBundle]:
    return [synthetic_bundle(r, d, seed) for r in records]
