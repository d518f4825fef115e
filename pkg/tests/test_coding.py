"""Tests for the range coder."""

import numpy as np
import pytest


def _tables(pmf):
    from multiref_codec.coding import pmf_to_cdf, quantize_pmf

    return pmf_to_cdf(quantize_pmf(np.asarray(pmf)))


class TestQuantizePmf:
    """Test integer frequency tables."""

    def test_rows_sum_to_total(self):
        """Every row sums to 2**16 and keeps non-zero symbols alive."""
        from multiref_codec.coding import TOTAL, quantize_pmf

        counts = quantize_pmf(np.array([[1e-9, 0.5, 0.5 - 1e-9], [0.25] * 3 + [0.25]]))
        assert np.all(counts.sum(axis=-1) == TOTAL)
        assert np.all(counts >= 1)

    def test_cdf_starts_at_zero(self):
        """Cumulative tables start at 0 and end at the total."""
        from multiref_codec.coding import TOTAL

        cdf = _tables([[0.5, 0.25, 0.25]])
        assert cdf[0, 0] == 0
        assert cdf[0, -1] == TOTAL


class TestRangeCoder:
    """Test encoding and decoding."""

    def test_uniform_bytes(self):
        """1000 uniform 8-bit symbols take 1000-1010 bytes and decode exactly."""
        from multiref_codec.coding import range_decode, range_encode

        rng = np.random.default_rng(0)
        symbols = rng.integers(0, 256, size=1000)
        cdfs = _tables(np.full((1, 256), 1 / 256))
        indexes = np.zeros(1000, dtype=np.int64)
        data = range_encode(symbols, cdfs, indexes)
        assert 1000 <= len(data) <= 1010
        assert range_decode(data, cdfs, indexes) == symbols.tolist()

    def test_skewed_source_near_entropy(self):
        """A 0.99 / 0.01 source codes within 5% of its information content."""
        from multiref_codec.coding import range_decode, range_encode

        rng = np.random.default_rng(1)
        symbols = (rng.random(20000) < 0.01).astype(np.int64)
        cdfs = _tables([[0.99, 0.01]])
        indexes = np.zeros(len(symbols), dtype=np.int64)
        data = range_encode(symbols, cdfs, indexes)
        bound = -np.log2(np.where(symbols == 1, 0.01, 0.99)).sum()
        assert 8 * len(data) <= 1.05 * bound
        assert range_decode(data, cdfs, indexes) == symbols.tolist()

    def test_short_skewed_run_overhead(self):
        """Short runs stay within the information content plus a few bytes."""
        from multiref_codec.coding import range_encode

        rng = np.random.default_rng(2)
        symbols = (rng.random(1000) < 0.01).astype(np.int64)
        data = range_encode(symbols, _tables([[0.99, 0.01]]), np.zeros(1000, dtype=np.int64))
        bound = -np.log2(np.where(symbols == 1, 0.01, 0.99)).sum()
        assert 8 * len(data) <= bound + 32 + 16

    def test_mixed_tables(self):
        """Each symbol may use its own table row."""
        from multiref_codec.coding import range_decode, range_encode

        cdfs = _tables([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
        symbols = [0, 2, 1, 2, 2, 0, 1]
        indexes = [0, 1, 0, 1, 1, 0, 1]
        assert range_decode(range_encode(symbols, cdfs, indexes), cdfs, indexes) == symbols

    def test_empty_input(self):
        """No symbols encode to no bytes."""
        from multiref_codec.coding import range_decode, range_encode

        cdfs = _tables([[0.5, 0.5]])
        assert range_encode([], cdfs, []) == b""
        assert range_decode(b"", cdfs, []) == []

    def test_out_of_alphabet(self):
        """Symbols outside the table raise CodingError with the position."""
        from multiref_codec.coding import range_encode
        from multiref_codec.errors import CodingError

        with pytest.raises(CodingError) as excinfo:
            range_encode([0, 1, 3], _tables([[0.5, 0.5]]), [0, 0, 0], where="slice 0")
        assert excinfo.value.position == 2
