import math

import numpy as np
import pytest

from pccodec.errors import DecodeError, InvalidPmf
from pccodec.range_coder import (
    PMF_TOTAL,
    AdaptiveBitDecoder,
    AdaptiveBitEncoder,
    RangeDecoder,
    RangeEncoder,
    decode_symbol,
    decode_symbols,
    encode_symbol,
    encode_symbols,
    ideal_bits,
    quantize_pmf,
    quantize_pmf_batch,
)


def oracle_apportion(p):
    """Scalar reference for the largest-remainder apportionment with floor 1."""
    q = [max(x, 0.0) for x in p]
    s = sum(q)
    q = [x / s for x in q]
    scaled = [x * PMF_TOTAL for x in q]
    base = [math.floor(x) for x in scaled]
    rem = [s - b for s, b in zip(scaled, base)]
    short = PMF_TOTAL - sum(base)
    order = sorted(range(16), key=lambda i: (-rem[i], i))
    freqs = list(base)
    for i in order[:short]:
        freqs[i] += 1
    deficit = sum(1 for f in freqs if f == 0)
    freqs = [max(f, 1) for f in freqs]
    for _ in range(deficit):
        top = max(range(16), key=lambda i: (freqs[i], -i))
        freqs[top] -= 1
    return freqs


def sample_symbols(rng, freqs):
    cum = np.cumsum(freqs, axis=1)
    u = rng.integers(0, PMF_TOTAL, size=len(freqs))
    return (u[:, None] >= cum).sum(axis=1)


def roundtrip(symbols, freqs):
    enc = RangeEncoder()
    encode_symbols(enc, symbols, freqs)
    data = enc.finish()
    dec = RangeDecoder(data)
    return data, decode_symbols(dec, len(symbols), freqs)


class TestQuantizePmf:
    def test_uniform(self):
        assert quantize_pmf([1 / 16] * 16).tolist() == [4096] * 16

    def test_degenerate_spike(self):
        p = [0.0] * 16
        p[5] = 1.0
        freqs = quantize_pmf(p)
        assert freqs[5] == PMF_TOTAL - 15
        assert all(f == 1 for i, f in enumerate(freqs) if i != 5)

    def test_matches_oracle_and_bounds(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            p = rng.dirichlet(np.full(16, rng.uniform(0.05, 5.0)))
            freqs = quantize_pmf(p)
            assert freqs.sum() == PMF_TOTAL
            assert freqs.min() >= 1
            assert freqs.tolist() == oracle_apportion(p.tolist())
            assert np.abs(freqs - p * PMF_TOTAL).max() <= 16

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(43)
        batch = rng.dirichlet(np.ones(16), size=50)
        got = quantize_pmf_batch(batch)
        for row, p in zip(got, batch):
            assert row.tolist() == quantize_pmf(p).tolist()

    def test_invalid_inputs(self):
        with pytest.raises(InvalidPmf):
            quantize_pmf([float("nan")] + [1 / 15] * 15)
        with pytest.raises(InvalidPmf):
            quantize_pmf([-0.5] + [0.1] * 15)
        with pytest.raises(InvalidPmf):
            quantize_pmf([0.5 / 16] * 16)


class TestRoundtrip:
    def test_empty_sequence(self):
        enc = RangeEncoder()
        data = enc.finish()
        assert len(data) <= 2
        dec = RangeDecoder(data)
        assert len(decode_symbols(dec, 0, np.zeros((0, 16)))) == 0

    def test_single_symbol_wrappers(self):
        freqs = quantize_pmf(np.full(16, 1 / 16))
        enc = RangeEncoder()
        encode_symbol(enc, 11, freqs)
        data = enc.finish()
        assert decode_symbol(RangeDecoder(data), freqs) == 11

    def test_fuzz_million_symbols(self):
        rng = np.random.default_rng(1234)
        total = 0
        while total < 1_000_000:
            n = int(rng.integers(1, 40_000))
            total += n
            conc = rng.uniform(0.05, 4.0)
            pmfs = rng.dirichlet(np.full(16, conc), size=n)
            freqs = quantize_pmf_batch(pmfs)
            symbols = sample_symbols(rng, freqs)
            data, back = roundtrip(symbols, freqs)
            assert np.array_equal(back, symbols)

    def test_compression_bound(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            n = int(rng.integers(1, 5000))
            pmfs = rng.dirichlet(np.full(16, rng.uniform(0.1, 3.0)), size=n)
            freqs = quantize_pmf_batch(pmfs)
            symbols = sample_symbols(rng, freqs)
            data, back = roundtrip(symbols, freqs)
            assert len(data) * 8 <= ideal_bits(freqs, symbols) + 64

    def test_near_deterministic_pmf_collapses(self):
        p = np.full(16, 0.0)
        p[3] = 1.0
        freqs = np.tile(quantize_pmf(p), (1000, 1))
        data, back = roundtrip(np.full(1000, 3), freqs)
        assert np.all(back == 3)
        assert len(data) < 20

    def test_uniform_costs_four_bits(self):
        freqs = np.tile(quantize_pmf([1 / 16] * 16), (1000, 1))
        rng = np.random.default_rng(5)
        symbols = rng.integers(0, 16, size=1000)
        data, back = roundtrip(symbols, freqs)
        assert np.array_equal(back, symbols)
        assert abs(len(data) - 500) <= 8

    def test_quantization_penalty_small(self):
        # For PMFs bounded away from zero the integer approximation costs
        # below 0.01 bits per coded symbol on average.
        rng = np.random.default_rng(17)
        n = 10_000
        pmfs = rng.dirichlet(np.full(16, 2.0), size=n)
        pmfs = np.clip(pmfs, 1e-4, None)
        pmfs /= pmfs.sum(axis=1, keepdims=True)
        freqs = quantize_pmf_batch(pmfs)
        cum = np.cumsum(pmfs, axis=1)
        symbols = np.clip((rng.random(n)[:, None] >= cum).sum(axis=1), 0, 15)
        bits_q = ideal_bits(freqs, symbols)
        bits_p = float(-np.log2(pmfs[np.arange(n), symbols]).sum())
        assert (bits_q - bits_p) / n <= 0.01

    def test_corruption_detected_or_differs(self):
        rng = np.random.default_rng(7)
        pmfs = rng.dirichlet(np.ones(16), size=500)
        freqs = quantize_pmf_batch(pmfs)
        symbols = sample_symbols(rng, freqs)
        enc = RangeEncoder()
        encode_symbols(enc, symbols, freqs)
        data = bytearray(enc.finish())
        data[len(data) // 2] ^= 0x55
        try:
            back = decode_symbols(RangeDecoder(bytes(data)), len(symbols), freqs)
            assert not np.array_equal(back, symbols)
        except DecodeError:
            pass


class TestAdaptiveBits:
    def test_roundtrip(self):
        rng = np.random.default_rng(21)
        bits = (rng.random(5000) < 0.2).astype(int).tolist()
        enc = AdaptiveBitEncoder()
        for b in bits:
            enc.encode_bit("ctx", b)
        data = enc.finish()
        dec = AdaptiveBitDecoder(data)
        assert [dec.decode_bit("ctx") for _ in bits] == bits

    def test_skewed_bits_compress(self):
        enc = AdaptiveBitEncoder()
        for _ in range(4000):
            enc.encode_bit("z", 0)
        data = enc.finish()
        assert len(data) < 100

    def test_multiple_contexts(self):
        rng = np.random.default_rng(22)
        seq = [("a" if rng.random() < 0.5 else "b", int(rng.random() < 0.7)) for _ in range(2000)]
        enc = AdaptiveBitEncoder()
        for ctx, b in seq:
            enc.encode_bit(ctx, b)
        data = enc.finish()
        dec = AdaptiveBitDecoder(data)
        for ctx, b in seq:
            assert dec.decode_bit(ctx) == b
