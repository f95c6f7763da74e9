import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnqp.formats import (
    CodecError,
    Format,
    FormatParams,
    SparseEncoding,
    best_format,
    decode,
    encode,
    encoded_sizes,
    expected_rle_entries,
    from_bytes,
    load,
    rle_entries,
    save,
    size_bits,
    to_bytes,
)


@st.composite
def sparse_arrays(draw, max_n=4096):
    n = draw(st.integers(0, max_n))
    vb = draw(st.integers(2, 8))
    density = draw(st.floats(0, 1))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    lo, hi = -(1 << (vb - 1)), (1 << (vb - 1)) - 1
    vals = rng.integers(lo, hi + 1, n)
    vals[rng.random(n) >= density] = 0
    return vals, vb


class TestSizes:
    x = np.array([0, 0, 3, 0, 1])

    def test_ubm_cp_uop_examples(self):
        assert encode(self.x, "ubm", 8).total_bits == 21
        assert encode(self.x, "cp", 8).total_bits == 22
        assert encode(self.x, "uop", 8).total_bits == 46

    def test_rle_overflow_example(self):
        enc = encode(np.array([0, 0, 0, 0, 0, 7]), "rle", 8, FormatParams(rle_bits=2))
        runs, vals = rle_entries(np.array([0, 0, 0, 0, 0, 7]), 2)
        assert list(zip(runs.tolist(), vals.tolist())) == [(3, 0), (1, 7)]
        assert enc.total_bits == 20

    def test_split_metadata_payload(self):
        enc = encode(self.x, "cp", 8)
        assert (enc.metadata_bits, enc.payload_bits) == (6, 16)
        assert size_bits("cp", 5, 2, 8) == (6.0, 16.0)

    def test_ubm_placement_independent(self):
        a = encode(np.array([5, 0, 0, 0, -1, 0]), "ubm", 4)
        b = encode(np.array([0, 0, -3, 2, 0, 0]), "ubm", 4)
        assert a.total_bits == b.total_bits == 6 + 8

    def test_trailing_zero_chain(self):
        params = FormatParams(rle_bits=2)
        head = np.array([0, 3, 0, 1])
        base = rle_entries(head, 2)[0].size
        for tail in range(0, 13):
            v = np.concatenate([head, np.zeros(tail, dtype=int)])
            assert rle_entries(v, 2)[0].size == base + math.ceil(tail / 4)
            assert encode(v, "rle", 8, params).total_bits == (base + math.ceil(tail / 4)) * 10

    @given(st.integers(1, 500), st.integers(2, 8))
    def test_monotone_in_nnz(self, n, vb):
        for f in (Format.UBM, Format.CP):
            sizes = [sum(size_bits(f, n, k, vb)) for k in range(0, n + 1, max(1, n // 10))]
            assert all(a <= b for a, b in zip(sizes, sizes[1:]))
        rle = [sum(size_bits("rle", n, 0, vb, FormatParams(), e)) for e in range(10)]
        assert all(a <= b for a, b in zip(rle, rle[1:]))


class TestRoundtrip:
    @settings(max_examples=150, deadline=None)
    @given(sparse_arrays(), st.sampled_from(list(Format)), st.integers(1, 6))
    def test_roundtrip_and_size_exactness(self, data, fmt, r):
        vals, vb = data
        params = FormatParams(rle_bits=r)
        enc = encode(vals, fmt, vb, params)
        np.testing.assert_array_equal(decode(enc), vals)
        n, nnz = vals.size, int(np.count_nonzero(vals))
        entries = rle_entries(vals, r)[0].size
        meta, pay = size_bits(fmt, n, nnz, vb, params, entries)
        assert (enc.metadata_bits, enc.payload_bits) == (meta, pay)
        assert enc.total_bits == enc.metadata.size + enc.payload.size

    @pytest.mark.parametrize("fmt", list(Format))
    def test_all_zero(self, fmt):
        v = np.zeros(37, dtype=int)
        np.testing.assert_array_equal(decode(encode(v, fmt, 3)), v)

    def test_spike_bits(self):
        v = np.array([1, 0, 0, 1, 1])
        for f in Format:
            np.testing.assert_array_equal(decode(encode(v, f, 1)), v)
        with pytest.raises(ValueError):
            encode(np.array([2]), "ubm", 1)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            encode(np.array([8]), "cp", 4)
        with pytest.raises(ValueError):
            encode(np.array([0.5]), "cp", 4)

    @pytest.mark.parametrize("fmt", list(Format))
    def test_container(self, fmt, tmp_path):
        v = np.array([0, -2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 5, 0])
        enc = encode(v, fmt, 4, FormatParams(rle_bits=3))
        path = tmp_path / "t.spen"
        save(enc, path)
        back = load(path)
        np.testing.assert_array_equal(decode(back), v)
        assert back.total_bits == enc.total_bits and back.rle_bits == 3

    def test_truncated_container(self):
        blob = to_bytes(encode(np.arange(-4, 4), "cp", 4))
        with pytest.raises(CodecError):
            from_bytes(blob[:10])
        with pytest.raises(CodecError):
            from_bytes(blob[:-2])
        with pytest.raises(CodecError):
            from_bytes(b"XXXX" + blob[4:])

    @pytest.mark.parametrize("fmt", list(Format))
    def test_corrupt_streams(self, fmt):
        enc = encode(np.array([0, 3, 0, 0, 1, 0, 2, 0]), fmt, 4, FormatParams(rle_bits=2))
        short = SparseEncoding(enc.format, enc.n, enc.value_bits, enc.rle_bits, enc.metadata[:-1], enc.payload)
        with pytest.raises(CodecError) as info:
            decode(short)
        assert info.value.bit_offset >= 0

    def test_rle_overrun_reports_offset(self):
        enc = encode(np.array([0, 0, 1]), "rle", 4, FormatParams(rle_bits=2))
        bad = SparseEncoding(Format.RLE, 2, 4, 2, enc.metadata, enc.payload)
        with pytest.raises(CodecError, match="bit 0"):
            decode(bad)


class TestBestFormat:
    def test_dense_limit(self):
        assert best_format(1.0, 1000, 8)[0] is Format.UOP

    def test_sparse_limit(self):
        fmt, bits = best_format(0.05, 16384, 8, FormatParams(rle_bits=4))
        sizes = {f: sum(size_bits(f, 16384, 0.05 * 16384, 8)) for f in Format}
        assert fmt is Format.RLE and bits == min(sizes.values())

    @pytest.mark.parametrize("n", [3, 4, 10, 100, 4096])
    def test_ubm_beats_cp_at_half(self, n):
        assert sum(size_bits("ubm", n, n / 2, 8)) <= sum(size_bits("cp", n, n / 2, 8))

    def test_tie_order(self):
        # n=1, zero density: UBM=1, CP=0, RLE=1 entry, UOP=2+vb
        fmt, bits = best_format(0.0, 1, 8, values=np.array([0]))
        assert fmt is Format.CP and bits == 0
        sizes = encoded_sizes(np.array([0, 0]), 1, FormatParams(rle_bits=1))
        assert sizes[Format.RLE] == sizes[Format.UBM] == 2
        assert best_format(0.0, 2, 1, FormatParams(rle_bits=1), values=np.array([0, 0]))[0] is Format.CP

    def test_density_range(self):
        with pytest.raises(ValueError):
            best_format(1.5, 10, 8)

    @pytest.mark.parametrize("n, density, r", [(10, 0.3, 2), (9, 0.1, 1), (8, 0.7, 2), (12, 0.05, 3)])
    def test_expected_rle_entries_by_enumeration(self, n, density, r):
        exact = 0.0
        for bits in itertools.product((0, 1), repeat=n):
            k = sum(bits)
            exact += density ** k * (1 - density) ** (n - k) * rle_entries(np.array(bits), r)[0].size
        assert expected_rle_entries(n, density, r) == pytest.approx(exact, rel=1e-12)

    def test_expected_rle_matches_sampling(self):
        rng = np.random.default_rng(0)
        n, p = 2000, 0.1
        mean = np.mean([rle_entries((rng.random(n) < p).astype(int), 4)[0].size for _ in range(300)])
        assert expected_rle_entries(n, p, 4) == pytest.approx(mean, rel=0.01)
