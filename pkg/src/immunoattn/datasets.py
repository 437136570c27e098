"""Labeled protein records: parsing, length/redundancy filtering and splits."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DataError

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
SOURCES = ("bacteria", "virus", "tumor")
PARTITIONS = ("train", "valid", "test")
HEADER = ["id", "sequence", "label", "source"]

_RESIDUE_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}


@dataclass(frozen=True)
class ProteinRecord:
    id: str
    sequence: str
    label: int
    source: str

    def __len__(self) -> int:
        return len(self.sequence)


@dataclass
class SplitManifest:
    seed: int
    ratios: tuple[float, float, float]
    assignment: dict[str, str] = field(default_factory=dict)

    def ids(self, partition: str) -> list[str]:
        return [i for i, p in self.assignment.items() if p == partition]

    def sizes(self) -> tuple[int, int, int]:
        counts = {p: 0 for p in PARTITIONS}
        for p in self.assignment.values():
            counts[p] += 1
        return counts["train"], counts["valid"], counts["test"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "partition"])
        for rid, part in self.assignment.items():
            writer.writerow([rid, part])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "SplitManifest":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["id", "partition"]:
            raise DataError("split manifest must start with header 'id,partition'")
        assignment: dict[str, str] = {}
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != 2 or row[1] not in PARTITIONS:
                raise DataError(f"line {lineno}: malformed split row {row!r}")
            if row[0] in assignment:
                raise DataError(f"line {lineno}: duplicate id {row[0]!r}")
            assignment[row[0]] = row[1]
        n = max(len(assignment), 1)
        counts = {p: 0 for p in PARTITIONS}
        for p in assignment.values():
            counts[p] += 1
        ratios = tuple(counts[p] / n for p in PARTITIONS)
        return cls(seed=seed, ratios=ratios, assignment=assignment)


def validate_sequence(rid: str, sequence: str) -> None:
    if not sequence:
        raise DataError(f"record {rid!r}: empty sequence")
    for offset, ch in enumerate(sequence):
        if ch not in _RESIDUE_INDEX:
            raise DataError(f"invalid residue {ch!r} in record {rid!r} at offset {offset}")


def parse_dataset(data: bytes | str) -> list[ProteinRecord]:
    """Parse an ``id,sequence,label,source`` CSV into validated records."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"dataset is not valid UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(data))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty dataset: missing header") from None
    if header != HEADER:
        raise DataError(f"line 1: expected header {','.join(HEADER)!r}, got {','.join(header)!r}")

    records: list[ProteinRecord] = []
    seen: set[str] = set()
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
        rid, seq, label, source = (x.strip() for x in row)
        if not rid:
            raise DataError(f"line {lineno}: empty id")
        if label not in ("0", "1"):
            raise DataError(f"line {lineno}: label must be 0 or 1, got {label!r}")
        if source not in SOURCES:
            raise DataError(f"line {lineno}: unknown source {source!r}")
        validate_sequence(rid, seq)
        if rid in seen:
            raise DataError(f"line {lineno}: duplicate id {rid!r}")
        seen.add(rid)
        records.append(ProteinRecord(rid, seq, int(label), source))
    return records


def records_to_csv(records: Iterable[ProteinRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in records:
        writer.writerow([r.id, r.sequence, r.label, r.source])
    return buf.getvalue()


def filter_by_length(
    records: Sequence[ProteinRecord], min_len: int = 25, max_len: int = 1024
) -> list[ProteinRecord]:
    if min_len < 1 or max_len < min_len:
        raise DataError(f"invalid length window [{min_len}, {max_len}]")
    return [r for r in records if min_len <= len(r.sequence) <= max_len]


def kmer_codes(sequence: str, k: int = 3) -> np.ndarray:
    """Sorted unique integer codes (base 20) of the sequence's k-mers."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if len(sequence) < k:
        raise DataError(f"sequence of length {len(sequence)} is shorter than k={k}")
    idx = np.fromiter((_RESIDUE_INDEX[c] for c in sequence), dtype=np.int64, count=len(sequence))
    windows = np.lib.stride_tricks.sliding_window_view(idx, k)
    codes = windows @ (20 ** np.arange(k - 1, -1, -1, dtype=np.int64))
    return np.unique(codes)


def kmer_identity(seq_a: str, seq_b: str, k: int = 3) -> float:
    """Jaccard similarity of the two k-mer sets."""
    a = kmer_codes(seq_a, k)
    b = kmer_codes(seq_b, k)
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


def redundancy_filter(
    records: Sequence[ProteinRecord], threshold: float = 0.3, k: int = 3
) -> list[ProteinRecord]:
    """Greedy first-come clustering: keep a record iff its k-mer identity to
    every previously kept record is below ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise DataError(f"threshold must lie in (0, 1], got {threshold}")
    if not records:
        return []
    sets = [kmer_codes(r.sequence, k) for r in records]
    offsets = np.zeros(len(sets) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in sets])
    keep = _kernels.greedy_filter(np.concatenate(sets), offsets, float(threshold))
    return [r for r, kept in zip(records, keep) if kept]


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DataError(f"ratios must be three non-negative fractions, got {ratios!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    return tuple(float(r) for r in ratios)  # type: ignore[return-value]


def make_split(
    records: Sequence[ProteinRecord],
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitManifest:
    """Seeded shuffle, then slice at the rounded cumulative ratio boundaries."""
    ratios = _check_ratios(ratios)
    if not records:
        raise DataError("cannot split an empty record list")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    b1 = round(ratios[0] * n)
    b2 = round((ratios[0] + ratios[1]) * n)
    part = np.empty(n, dtype=object)
    part[order[:b1]] = "train"
    part[order[b1:b2]] = "valid"
    part[order[b2:]] = "test"
    assignment = {r.id: str(p) for r, p in zip(records, part)}
    return SplitManifest(seed=seed, ratios=ratios, assignment=assignment)


def _single_source(records: Sequence[ProteinRecord], what: str) -> str:
    tags = {r.source for r in records}
    if len(tags) != 1:
        raise DataError(f"{what} records must share one source tag, got {sorted(tags)}")
    return tags.pop()


def make_cross_test(
    train_source_records: Sequence[ProteinRecord],
    test_source_records: Sequence[ProteinRecord],
    valid_fraction: float = 0.1,
    seed: int = 0,
) -> SplitManifest:
    """Train on one source (holding out a seeded validation slice), test on another."""
    if not train_source_records or not test_source_records:
        raise DataError("cross-source split needs records from both sources")
    src_a = _single_source(train_source_records, "training")
    src_b = _single_source(test_source_records, "test")
    if src_a == src_b:
        raise DataError(f"cross-source split needs two different sources, got {src_a!r} twice")
    overlap = {r.id for r in train_source_records} & {r.id for r in test_source_records}
    if overlap:
        raise DataError(f"ids present in both sources: {sorted(overlap)[:5]}")

    n_a = len(train_source_records)
    n_valid = round(valid_fraction * n_a)
    order = np.random.default_rng(seed).permutation(n_a)
    valid_idx = set(order[:n_valid].tolist())
    assignment = {
        r.id: ("valid" if i in valid_idx else "train") for i, r in enumerate(train_source_records)
    }
    assignment.update({r.id: "test" for r in test_source_records})
    total = n_a + len(test_source_records)
    ratios = ((n_a - n_valid) / total, n_valid / total, len(test_source_records) / total)
    return SplitManifest(seed=seed, ratios=ratios, assignment=assignment)


def residue_indices(sequence: str) -> np.ndarray:
    return np.fromiter((_RESIDUE_INDEX[c] for c in sequence), dtype=np.int64, count=len(sequence))


def ceil_count(fraction: float, n: int) -> int:
    # guards against 0.5 * 100 = 50.000000000000001 style drift
    return min(n, math.ceil(round(fraction * n, 9)))
