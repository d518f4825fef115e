"""
Carry-less range coder with 16-bit probability precision.

The coder state is 64 bits wide and emits whole bytes. Probability tables
are integer frequency rows summing to ``2**16``; every symbol of an
alphabet keeps a non-zero frequency.

Examples
--------
>>> import numpy as np
>>> cdfs = pmf_to_cdf(quantize_pmf(np.full((1, 4), 0.25)))
>>> data = range_encode([0, 3, 2, 1], cdfs, np.zeros(4, dtype=np.int64))
>>> range_decode(data, cdfs, np.zeros(4, dtype=np.int64))
[0, 3, 2, 1]
"""

from typing import List, Optional, Sequence

import numpy as np

from .errors import CodingError

PRECISION = 16
TOTAL = 1 << PRECISION

_STATE_BITS = 64
_MASK = (1 << _STATE_BITS) - 1
_TOP = 1 << (_STATE_BITS - 8)
_BOT = 1 << (_STATE_BITS - 16)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """
    Integer frequencies summing to ``2**16`` per row.

    Entries with positive probability get at least 1; rounding slack goes
    to the most probable symbol of the row.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    pmf = pmf / pmf.sum(axis=-1, keepdims=True)
    counts = np.floor(pmf * TOTAL).astype(np.int64)
    counts = np.where(pmf > 0, np.maximum(counts, 1), 0)
    slack = TOTAL - counts.sum(axis=-1)
    rows = np.arange(counts.shape[0])
    top = counts.argmax(axis=-1)
    counts[rows, top] += slack
    if (counts[rows, top] < 1).any():
        raise CodingError("alphabet too large for 16-bit probability precision")
    return counts


def pmf_to_cdf(counts: np.ndarray) -> np.ndarray:
    """(rows, K) frequencies -> (rows, K + 1) cumulative table starting at 0."""
    counts = np.atleast_2d(counts)
    cdf = np.zeros((counts.shape[0], counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cdf[:, 1:])
    return cdf


class RangeEncoder:
    """Carry-less range encoder writing to an in-memory byte buffer."""

    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()

    def encode(self, start: int, freq: int):
        """Narrow the interval to ``[start, start + freq)`` out of ``2**16``."""
        r = self._range >> PRECISION
        self._low += start * r
        self._range = freq * r
        while True:
            if (self._low ^ (self._low + self._range)) >= _TOP:
                if self._range >= _BOT:
                    break
                self._range = -self._low & (_BOT - 1)
            self._out.append(self._low >> (_STATE_BITS - 8))
            self._low = (self._low << 8) & _MASK
            self._range = (self._range << 8) & _MASK

    def finish(self) -> bytes:
        """
        Flush the fewest bytes that pin a value inside the final interval
        when the decoder pads the stream with zero bytes.
        """
        for nbytes in range(0, _STATE_BITS // 8 + 1):
            unit = 1 << (_STATE_BITS - 8 * nbytes)
            value = -(-self._low // unit) * unit
            if value < self._low + self._range and value <= _MASK:
                for shift in range(nbytes):
                    self._out.append((value >> (_STATE_BITS - 8 * (shift + 1))) & 0xFF)
                break
        return bytes(self._out)


class RangeDecoder:
    """Mirror of ``RangeEncoder``; reads zeros past the end of the data."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK
        self._code = 0
        for _ in range(_STATE_BITS // 8):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            byte = self._data[self._pos]
        else:
            byte = 0
        self._pos += 1
        return byte

    def decode(self, cdf: np.ndarray) -> int:
        """Decode one symbol against a cumulative table ``cdf`` (K + 1 entries)."""
        r = self._range >> PRECISION
        target = min((self._code - self._low) // r, TOTAL - 1)
        symbol = int(np.searchsorted(cdf, target, side="right")) - 1
        start, stop = int(cdf[symbol]), int(cdf[symbol + 1])
        self._low += start * r
        self._range = (stop - start) * r
        while True:
            if (self._low ^ (self._low + self._range)) >= _TOP:
                if self._range >= _BOT:
                    break
                self._range = -self._low & (_BOT - 1)
            self._code = ((self._code << 8) & _MASK) | self._next_byte()
            self._low = (self._low << 8) & _MASK
            self._range = (self._range << 8) & _MASK
        return symbol


def range_encode(
    symbols: Sequence[int],
    cdfs: np.ndarray,
    indexes: Optional[Sequence[int]] = None,
    where: str = "",
) -> bytes:
    """
    Range-code ``symbols``; symbol ``i`` uses table row ``indexes[i]``.

    Raises
    ------
    CodingError
        If a symbol lies outside its table's alphabet
    """
    if len(symbols) == 0:
        return b""
    cdfs = np.atleast_2d(cdfs)
    if indexes is None:
        indexes = np.arange(len(symbols))
    encoder = RangeEncoder()
    alphabet = cdfs.shape[1] - 1
    for position, (symbol, row) in enumerate(zip(symbols, indexes)):
        symbol = int(symbol)
        if not 0 <= symbol < alphabet:
            raise CodingError(
                f"symbol {symbol} outside alphabet [0, {alphabet})", where, position
            )
        cdf = cdfs[row]
        start, stop = int(cdf[symbol]), int(cdf[symbol + 1])
        if stop <= start:
            raise CodingError(f"symbol {symbol} has zero frequency", where, position)
        encoder.encode(start, stop - start)
    return encoder.finish()


def range_decode(
    data: bytes,
    cdfs: np.ndarray,
    indexes: Sequence[int],
) -> List[int]:
    """Decode ``len(indexes)`` symbols written by ``range_encode``."""
    if len(indexes) == 0:
        return []
    cdfs = np.atleast_2d(cdfs)
    decoder = RangeDecoder(data)
    return [decoder.decode(cdfs[row]) for row in indexes]
