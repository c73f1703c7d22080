"""Byte-oriented range coder with carry propagation (LZMA-style low/range
registers) over static cumulative-frequency tables.

The encoder never emits the leading byte (it is always zero) and strips
trailing zero bytes; the decoder supplies both implicitly.
"""
from __future__ import annotations

from bisect import bisect_right

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
MAX_TOTAL = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        if (self.low & MASK32) < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if not self._cache_size:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, start: int, size: int, total: int) -> None:
        if not (0 <= start and size > 0 and start + size <= total <= MAX_TOTAL):
            raise ValueError(f"bad interval start={start} size={size} total={total}")
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int) -> None:
        """Uniform coding of an nbits-wide integer, nbits <= 16."""
        self.encode(value, 1, 1 << nbits)

    def finish(self) -> bytes:
        # Pick the value in [low, low + range) with the most trailing zero bits.
        hi = self.low + self.range
        for shift in (32, 24, 16, 8, 0):
            m = (1 << shift) - 1
            v = (self.low + m) & ~m
            if v < hi:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        out = bytes(self._out[1:])
        return out.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
        else:
            b = 0
        self._pos += 1
        return b

    def _target(self, total: int) -> int:
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def _consume(self, start: int, size: int) -> None:
        self.code -= start * self._r
        self.range = self._r * size
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8

    def decode(self, cum: list) -> int:
        """Decode one symbol; ``cum`` is [0, c1, ..., total] cumulative counts."""
        t = self._target(cum[-1])
        sym = bisect_right(cum, t) - 1
        self._consume(cum[sym], cum[sym + 1] - cum[sym])
        return sym

    def decode_bits(self, nbits: int) -> int:
        v = self._target(1 << nbits)
        self._consume(v, 1)
        return v

    @property
    def overrun(self) -> int:
        """Bytes read past the end of the input (implicit zero padding)."""
        return max(0, self._pos - len(self._data))
