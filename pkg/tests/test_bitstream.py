import math

import numpy as np
import pytest

from gsir.bitstream import (HEADER_LEN, StreamMeta, decode_bitstream, decode_header, decode_symbols, encode_bitstream,
                            payload_bits)
from gsir.core import GaussianSet, merge_sets
from gsir.errors import BadMagicError, BitstreamError, InvalidParameterError, TruncatedPayloadError, UnsupportedVersionError
from gsir.metrics import psnr
from gsir.quant import RangeStrategy, default_global_base, dequantize, derive_ranges, quantize
from gsir.render import render

import params
from fixture import rng
from utils import random_set, staged_set


def encoded(gset, width, height, n_stages, strategy=RangeStrategy.PER_IMAGE, bits=None):
    base = default_global_base()
    if bits is not None:
        base = base.with_bits(bits)
    spec = derive_ranges(gset, strategy, base, (width, height))
    return encode_bitstream(gset, spec, StreamMeta(width, height, n_stages)), spec


class TestContainer:
    def test_header_length(self):
        assert HEADER_LEN == 127

    def test_empty_set(self):
        data = encode_bitstream(GaussianSet.empty(), default_global_base(), StreamMeta(16, 16, 2))
        assert len(data) == HEADER_LEN
        gset, spec, meta = decode_bitstream(data)
        assert gset.count == 0
        assert meta.stage_counts == (0, 0)
        assert spec.strategy == RangeStrategy.GLOBAL

    def test_round_trip(self, rng):
        gset = staged_set(rng, [400, 300, 300], 64, 64)
        data, spec = encoded(gset, 64, 64, 3)
        assert len(data) == HEADER_LEN + math.ceil(payload_bits(1000, spec) / 8)
        assert len(data) == HEADER_LEN + 11 * 1000

        decoded, spec_back, meta = decode_bitstream(data)
        assert meta.stage_counts == (400, 300, 300)
        assert spec_back.ranges == spec.ranges
        assert decoded.equals(dequantize(quantize(gset, spec, (64, 64)), spec, (64, 64), gset.stage_id))

        symbols = decode_symbols(data)
        for attr, q in quantize(gset, spec, (64, 64)).items():
            np.testing.assert_array_equal(symbols[attr], q, err_msg=attr)

    def test_payload_padding(self, rng):
        gset = random_set(rng, 3, 16, 16)
        data, spec = encoded(gset, 16, 16, 1, bits=5)
        assert payload_bits(3, spec) == 3 * 40
        assert len(data) == HEADER_LEN + math.ceil(120 / 8)

    def test_reencode_is_byte_exact(self, rng):
        for _ in range(100):
            counts = rng.integers(0, 20, size=int(rng.integers(1, 5))).tolist()
            if not sum(counts):
                counts[0] = 1
            gset = staged_set(rng, counts, 40, 24)
            data, spec = encoded(gset, 40, 24, len(counts))
            decoded, spec_back, meta = decode_bitstream(data)
            assert encode_bitstream(decoded, spec_back, meta) == data

    def test_little_endian_fields(self, rng):
        gset = staged_set(rng, [3, 2], 300, 40)
        data, spec = encoded(gset, 300, 40, 2)
        assert data[:4] == b"GSIR"
        assert data[4:6] == (1).to_bytes(2, "little")
        assert data[6:10] == (300).to_bytes(4, "little")
        assert data[10:14] == (40).to_bytes(4, "little")
        assert data[14:16] == (2).to_bytes(2, "little")
        assert data[16] == RangeStrategy.PER_IMAGE.tag
        assert data[18:22] == (3).to_bytes(4, "little")
        assert data[22:26] == (2).to_bytes(4, "little")
        alpha, beta = np.frombuffer(data, dtype="<f4", count=2, offset=82 + 1)
        assert (float(alpha), float(beta)) == (spec["mu_x"].alpha, spec["mu_x"].beta)

    def test_sixteen_bit_reconstruction(self, rng):
        gset = random_set(rng, 60, 48, 48)
        data, _ = encoded(gset, 48, 48, 1, bits=16)
        decoded, _, _ = decode_bitstream(data)
        reference = render(gset, 48, 48)
        assert psnr(render(decoded, 48, 48), reference) >= params.high_fidelity_db


class TestMalformed:
    def stream(self, rng):
        return encoded(staged_set(rng, [5, 4], 32, 32), 32, 32, 2)[0]

    def test_bad_magic(self, rng):
        data = bytearray(self.stream(rng))
        data[:4] = b"GSIX"
        with pytest.raises(BadMagicError):
            decode_bitstream(bytes(data))

    def test_version(self, rng):
        data = bytearray(self.stream(rng))
        data[4:6] = (2).to_bytes(2, "little")
        with pytest.raises(UnsupportedVersionError):
            decode_bitstream(bytes(data))

    def test_truncated(self, rng):
        data = self.stream(rng)
        with pytest.raises(TruncatedPayloadError):
            decode_bitstream(data[:-1])
        with pytest.raises(TruncatedPayloadError):
            decode_header(data[:50])
        with pytest.raises(TruncatedPayloadError):
            decode_bitstream(data[:2])

    def test_trailing_bytes(self, rng):
        with pytest.raises(BitstreamError):
            decode_bitstream(self.stream(rng) + b"\x00")

    def test_counts_beyond_stages(self, rng):
        data = bytearray(self.stream(rng))
        data[26:30] = (1).to_bytes(4, "little")
        with pytest.raises(BitstreamError):
            decode_header(bytes(data))

    @pytest.mark.parametrize("field", [slice(6, 10), slice(10, 14)])
    def test_zero_canvas(self, rng, field):
        data = bytearray(self.stream(rng))
        data[field] = (0).to_bytes(4, "little")
        with pytest.raises(BitstreamError):
            decode_header(bytes(data))

    def test_unsorted_stage_ids(self, rng):
        gset = merge_sets(random_set(rng, 3, 16, 16, stage=2), random_set(rng, 3, 16, 16, stage=1))
        with pytest.raises(InvalidParameterError):
            encode_bitstream(gset, default_global_base(), StreamMeta(16, 16, 2))

    def test_stage_beyond_budget(self, rng):
        with pytest.raises(InvalidParameterError):
            encode_bitstream(random_set(rng, 3, 16, 16, stage=3), default_global_base(), StreamMeta(16, 16, 2))
