import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_bundle
from immunoattn.datasets import ProteinRecord
from immunoattn.embedio import (
    EmbeddingBundle,
    decode_bundles,
    encode_bundles,
    read_bundles,
    synthetic_bundle,
    write_bundles,
)
from immunoattn.errors import FormatError


def test_roundtrip_one(tmp_path, rng):
    b = random_bundle(rng, 7, 5, "p1")
    path = tmp_path / "one.vveb"
    n = write_bundles([b], path)
    assert n == path.stat().st_size
    (back,) = read_bundles(path)
    assert back == b


def test_empty_list(tmp_path):
    path = tmp_path / "empty.vveb"
    write_bundles([], path)
    assert path.read_bytes() == b"VVEB" + struct.pack("<IQ", 1, 0)
    assert read_bundles(path) == []


def test_order_preserved(tmp_path, rng):
    bs = [random_bundle(rng, 3, 4, "b"), random_bundle(rng, 5, 4, "a")]
    write_bundles(bs, tmp_path / "two.vveb")
    assert [b.id for b in read_bundles(tmp_path / "two.vveb")] == ["b", "a"]


def test_exact_layout(rng):
    b = EmbeddingBundle("id", np.array([[1.5, -2.0]], dtype=np.float32), np.array([3]), np.array([4095]))
    expected = (
        b"VVEB" + struct.pack("<IQ", 1, 1) + struct.pack("<H", 2) + b"id"
        + struct.pack("<II", 1, 2) + struct.pack("<2f", 1.5, -2.0) + bytes([3]) + struct.pack("<H", 4095)
    )
    assert encode_bundles([b]) == expected


def test_duplicate_id_rejected(rng):
    with pytest.raises(FormatError, match="duplicate"):
        encode_bundles([random_bundle(rng, 2, 2, "x"), random_bundle(rng, 2, 2, "x")])


def test_bad_magic():
    with pytest.raises(FormatError, match="not a VVEB file"):
        decode_bundles(b"VVEX" + bytes(12))


def test_count(rng):
    bs = [random_bundle(rng, 2, 3, f"r{i}") for i in range(6)]
    assert len(decode_bundles(encode_bundles(bs))) == 6


def test_fine_token_out_of_range(rng):
    b = random_bundle(rng, 2, 2, "bad")
    raw = bytearray(encode_bundles([b]))
    fine_at = 4 + 12 + 2 + 3 + 8 + 4 * 4
    raw[fine_at] = 20
    with pytest.raises(FormatError, match="'bad'.*fine token 20"):
        decode_bundles(bytes(raw))


def test_truncated(rng):
    raw = encode_bundles([random_bundle(rng, 3, 3, "t")])
    with pytest.raises(FormatError, match="truncated"):
        decode_bundles(raw[:-1])


def test_trailing_bytes(rng):
    raw = encode_bundles([random_bundle(rng, 3, 3, "t")])
    with pytest.raises(FormatError, match="trailing"):
        decode_bundles(raw + b"\0")


def test_non_finite_rejected_on_write(rng):
    b = random_bundle(rng, 2, 2)
    b.seq_embedding[0, 0] = np.nan
    with pytest.raises(FormatError, match="non-finite"):
        encode_bundles([b])


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200))
def test_decoder_only_raises_format_error(blob):
    try:
        decode_bundles(b"VVEB" + blob)
    except FormatError:
        pass


REC = ProteinRecord("p", "AMKTAYIAKQ", 1, "virus")


def test_synthetic_deterministic():
    assert synthetic_bundle(REC, 6, 3) == synthetic_bundle(REC, 6, 3)


def test_synthetic_seed_matters():
    a, b = synthetic_bundle(REC, 6, 3), synthetic_bundle(REC, 6, 4)
    assert a.seq_embedding.tobytes() != b.seq_embedding.tobytes()


def test_synthetic_tokens():
    b = synthetic_bundle(REC, 4, 0)
    assert b.fine_tokens[0] == 0  # 'A' at position 0
    assert list(b.fine_tokens[:3]) == [0, (10 + 1) % 20, (8 + 2) % 20]  # A, M, K
    b.validate()


def test_synthetic_row_independent_of_width_prefix():
    # channel j of row i is the j-th draw of that row's stream
    a, b = synthetic_bundle(REC, 4, 1), synthetic_bundle(REC, 8, 1)
    np.testing.assert_array_equal(a.seq_embedding, b.seq_embedding[:, :4])
