"""Integer arithmetic coding over 16-symbol alphabets with quantized PMFs.

The coder keeps 32-bit state and partitions each interval exactly (no dead
sub-ranges), so per-symbol precision loss is below 1e-4 bits and any stream
obeys ``bits <= sum(-log2 q) + small flush overhead``.  Probabilities reach
the coder only as integer frequency tables summing to ``PMF_TOTAL`` with a
floor of 1, which guarantees every symbol stays decodable.

Batch entry points move data between numpy and the symbol loop through
``array.array`` buffers (a single memcpy) because the per-symbol loop is the
throughput bottleneck of the whole codec.
"""

from __future__ import annotations

from array import array

import numpy as np

from .errors import DecodeError, InvalidPmf

PMF_TOTAL = 1 << 16

_PRECISION = 32
_FULL = 1 << _PRECISION
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_MASK = _FULL - 1


def quantize_pmf_batch(pmfs: np.ndarray) -> np.ndarray:
    """Apportion each row of an (N, 16) probability matrix to PMF_TOTAL.

    Largest-remainder rounding with a floor of 1 per symbol; the +1 bonuses
    go to the largest remainders (ties to the lower index) and the floor
    bumps are paid for by the largest frequencies.  Fully deterministic.
    """
    p = np.asarray(pmfs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape[1] != 16:
        raise InvalidPmf(f"expected 16-symbol PMFs, got width {p.shape[1]}")
    if not np.isfinite(p).all() or (p < -1e-9).any():
        raise InvalidPmf("PMF entries must be finite and non-negative")
    sums = p.sum(axis=1)
    if (np.abs(sums - 1.0) > 1e-3).any():
        raise InvalidPmf("PMF rows must sum to 1 within 1e-3")
    cp = np.clip(p, 0.0, None)
    q = cp / cp.sum(axis=1, keepdims=True)

    scaled = q * PMF_TOTAL
    base = np.floor(scaled).astype(np.int64)
    rem = scaled - base
    short = PMF_TOTAL - base.sum(axis=1)
    # Stable sort on -rem => ties resolve to the lower symbol index.
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(16)[None, :].repeat(len(order), 0), axis=1)
    freqs = base + (rank < short[:, None])

    zero = freqs == 0
    deficit = zero.sum(axis=1)
    freqs[zero] = 1
    while True:
        rows = np.flatnonzero(deficit > 0)
        if len(rows) == 0:
            break
        top = np.argmax(freqs[rows], axis=1)
        freqs[rows, top] -= 1
        deficit[rows] -= 1
    return freqs


def quantize_pmf(pmf) -> np.ndarray:
    """Quantize one 16-entry PMF; see quantize_pmf_batch."""
    return quantize_pmf_batch(np.asarray(pmf))[0]


def ideal_bits(freqs: np.ndarray, symbols: np.ndarray) -> float:
    """Information content of `symbols` under quantized frequency rows."""
    if len(symbols) == 0:
        return 0.0
    f = np.asarray(freqs, dtype=np.float64)
    picked = f[np.arange(len(symbols)), np.asarray(symbols, dtype=np.int64)]
    return float((16.0 - np.log2(picked)).sum())


def _int_buffer(a: np.ndarray) -> array:
    """Copy an integer ndarray into an array('q') for cheap scalar access."""
    buf = array("q")
    buf.frombytes(np.ascontiguousarray(a, dtype=np.int64).tobytes())
    return buf


class RangeEncoder:
    """Arithmetic encoder; feed interval bounds, then finish() for the bytes."""

    def __init__(self):
        self.low = 0
        self.high = _MASK
        self.pending = 0
        self._acc = 0
        self._nacc = 0
        self._out = bytearray()

    def encode_bounds(self, clows, chighs) -> None:
        """Encode symbols given cumulative bounds under total PMF_TOTAL."""
        low = self.low
        high = self.high
        pending = self.pending
        acc = self._acc
        nacc = self._nacc
        out = self._out
        for clow, chigh in zip(clows, chighs):
            span = high - low + 1
            high = low + ((chigh * span) >> 16) - 1
            low = low + ((clow * span) >> 16)
            while True:
                if high < _HALF:
                    bit = 0
                elif low >= _HALF:
                    bit = 1
                    low -= _HALF
                    high -= _HALF
                elif low >= _QUARTER and high < 3 * _QUARTER:
                    pending += 1
                    low -= _QUARTER
                    high -= _QUARTER
                    low <<= 1
                    high = (high << 1) | 1
                    continue
                else:
                    break
                acc = (acc << 1) | bit
                nacc += 1
                if nacc == 8:
                    out.append(acc)
                    acc = 0
                    nacc = 0
                if pending:
                    inv = bit ^ 1
                    for _ in range(pending):
                        acc = (acc << 1) | inv
                        nacc += 1
                        if nacc == 8:
                            out.append(acc)
                            acc = 0
                            nacc = 0
                    pending = 0
                low <<= 1
                high = (high << 1) | 1
        self.low = low
        self.high = high
        self.pending = pending
        self._acc = acc
        self._nacc = nacc

    def encode_interval(self, clow: int, chigh: int, total: int) -> None:
        """Encode one symbol under an arbitrary total (adaptive contexts)."""
        span = self.high - self.low + 1
        high = self.low + chigh * span // total - 1
        low = self.low + clow * span // total
        pending = self.pending
        acc = self._acc
        nacc = self._nacc
        out = self._out
        while True:
            if high < _HALF:
                bit = 0
            elif low >= _HALF:
                bit = 1
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < 3 * _QUARTER:
                pending += 1
                low -= _QUARTER
                high -= _QUARTER
                low <<= 1
                high = (high << 1) | 1
                continue
            else:
                break
            acc = (acc << 1) | bit
            nacc += 1
            if nacc == 8:
                out.append(acc)
                acc = 0
                nacc = 0
            if pending:
                inv = bit ^ 1
                for _ in range(pending):
                    acc = (acc << 1) | inv
                    nacc += 1
                    if nacc == 8:
                        out.append(acc)
                        acc = 0
                        nacc = 0
                pending = 0
            low <<= 1
            high = (high << 1) | 1
        self.low = low
        self.high = high
        self.pending = pending
        self._acc = acc
        self._nacc = nacc

    def finish(self) -> bytes:
        """Terminate the stream; one marker bit plus zero padding to a byte."""
        self._acc = (self._acc << 1) | 1
        self._nacc += 1
        self._acc <<= 8 - self._nacc
        self._out.append(self._acc & 0xFF)
        self._acc = 0
        self._nacc = 0
        return bytes(self._out)


class RangeDecoder:
    """Mirror of RangeEncoder; reads zeros past the end of the buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._bits_left = 0
        self._cur = 0
        self.low = 0
        self.high = _MASK
        code = 0
        for _ in range(_PRECISION):
            code = (code << 1) | self._read_bit()
        self.code = code

    def _read_bit(self) -> int:
        if self._bits_left == 0:
            if self._pos < len(self._data):
                self._cur = self._data[self._pos]
                self._pos += 1
            else:
                self._cur = 0
            self._bits_left = 8
        self._bits_left -= 1
        return (self._cur >> self._bits_left) & 1

    def decode_cdf16(self, n: int, flatcum) -> list:
        """Decode n symbols; flatcum holds 17-entry cumulative rows back to back."""
        low = self.low
        high = self.high
        code = self.code
        data = self._data
        pos = self._pos
        bits_left = self._bits_left
        cur = self._cur
        size = len(data)
        syms = []
        append = syms.append
        base = 0
        for _ in range(n):
            span = high - low + 1
            val = (((code - low + 1) << 16) - 1) // span
            if val >= PMF_TOTAL:
                raise DecodeError("corrupt stream: target outside frequency table")
            lo_j = 0
            hi_j = 16
            while hi_j - lo_j > 1:
                mid = (lo_j + hi_j) >> 1
                if flatcum[base + mid] <= val:
                    lo_j = mid
                else:
                    hi_j = mid
            append(lo_j)
            high = low + ((flatcum[base + lo_j + 1] * span) >> 16) - 1
            low = low + ((flatcum[base + lo_j] * span) >> 16)
            base += 17
            while True:
                if high < _HALF:
                    pass
                elif low >= _HALF:
                    low -= _HALF
                    high -= _HALF
                    code -= _HALF
                elif low >= _QUARTER and high < 3 * _QUARTER:
                    low -= _QUARTER
                    high -= _QUARTER
                    code -= _QUARTER
                else:
                    break
                low <<= 1
                high = (high << 1) | 1
                if bits_left == 0:
                    if pos < size:
                        cur = data[pos]
                        pos += 1
                    else:
                        cur = 0
                    bits_left = 8
                bits_left -= 1
                code = (code << 1) | ((cur >> bits_left) & 1)
        self.low = low
        self.high = high
        self.code = code
        self._pos = pos
        self._bits_left = bits_left
        self._cur = cur
        return syms

    def decode_target(self, total: int) -> int:
        """Cumulative value of the next symbol under an arbitrary total."""
        span = self.high - self.low + 1
        val = ((self.code - self.low + 1) * total - 1) // span
        if val >= total:
            raise DecodeError("corrupt stream: target outside frequency table")
        return val

    def consume(self, clow: int, chigh: int, total: int) -> None:
        """Narrow to [clow, chigh) after the caller resolved the symbol."""
        span = self.high - self.low + 1
        high = self.low + chigh * span // total - 1
        low = self.low + clow * span // total
        code = self.code
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                code -= _HALF
            elif low >= _QUARTER and high < 3 * _QUARTER:
                low -= _QUARTER
                high -= _QUARTER
                code -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
            code = (code << 1) | self._read_bit()
        self.low = low
        self.high = high
        self.code = code


def encode_symbols(enc: RangeEncoder, symbols: np.ndarray, freqs: np.ndarray) -> None:
    """Batch-encode symbols (values 0..15) under per-row quantized frequencies."""
    n = len(symbols)
    if n == 0:
        return
    s = np.asarray(symbols, dtype=np.int64)
    f = np.asarray(freqs, dtype=np.int64)
    cum = np.zeros((n, 17), dtype=np.int64)
    np.cumsum(f, axis=1, out=cum[:, 1:])
    rows = np.arange(n)
    clows = _int_buffer(cum[rows, s])
    chighs = _int_buffer(cum[rows, s + 1])
    enc.encode_bounds(clows, chighs)


def decode_symbols(dec: RangeDecoder, n: int, freqs: np.ndarray) -> np.ndarray:
    """Batch-decode n symbols under per-row quantized frequencies."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    f = np.asarray(freqs, dtype=np.int64)
    cum = np.zeros((n, 17), dtype=np.int64)
    np.cumsum(f, axis=1, out=cum[:, 1:])
    flat = _int_buffer(cum)
    return np.asarray(dec.decode_cdf16(n, flat), dtype=np.int64)


def encode_symbol(enc: RangeEncoder, symbol: int, freqs) -> None:
    """Single-symbol convenience wrapper over encode_symbols."""
    encode_symbols(enc, np.array([symbol]), np.asarray(freqs)[None, :])


def decode_symbol(dec: RangeDecoder, freqs) -> int:
    """Single-symbol convenience wrapper over decode_symbols."""
    return int(decode_symbols(dec, 1, np.asarray(freqs)[None, :])[0])


class _AdaptiveBit:
    """Per-context bit frequencies for the weight-delta coder."""

    __slots__ = ("c0", "c1")

    _CAP = 1 << 12
    _INC = 24

    def __init__(self):
        self.c0 = 1
        self.c1 = 1

    def update(self, bit: int) -> None:
        if bit:
            self.c1 += self._INC
        else:
            self.c0 += self._INC
        if self.c0 + self.c1 > self._CAP:
            self.c0 = max(1, self.c0 >> 1)
            self.c1 = max(1, self.c1 >> 1)


class AdaptiveBitEncoder:
    """Adaptive binary coder with named contexts, over the same core coder."""

    def __init__(self):
        self._enc = RangeEncoder()
        self._ctx = {}

    def _model(self, ctx: str) -> _AdaptiveBit:
        m = self._ctx.get(ctx)
        if m is None:
            m = _AdaptiveBit()
            self._ctx[ctx] = m
        return m

    def encode_bit(self, ctx: str, bit: int) -> None:
        m = self._model(ctx)
        total = m.c0 + m.c1
        if bit:
            self._enc.encode_interval(m.c0, total, total)
        else:
            self._enc.encode_interval(0, m.c0, total)
        m.update(bit)

    def finish(self) -> bytes:
        return self._enc.finish()


class AdaptiveBitDecoder:
    def __init__(self, data: bytes):
        self._dec = RangeDecoder(data)
        self._ctx = {}

    def _model(self, ctx: str) -> _AdaptiveBit:
        m = self._ctx.get(ctx)
        if m is None:
            m = _AdaptiveBit()
            self._ctx[ctx] = m
        return m

    def decode_bit(self, ctx: str) -> int:
        m = self._model(ctx)
        total = m.c0 + m.c1
        val = self._dec.decode_target(total)
        bit = 1 if val >= m.c0 else 0
        if bit:
            self._dec.consume(m.c0, total, total)
        else:
            self._dec.consume(0, m.c0, total)
        m.update(bit)
        return bit
