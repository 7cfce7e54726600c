"""The .gsir container: a fixed little-endian header followed by bit-packed
symbols. See FORMAT.md for the byte layout.

Payload order is attribute-major: mu_x, mu_y, log_scale[0], log_scale[1],
theta, color r, g, b; each column holds every primitive in stage order, each
symbol written MSB first with its attribute's bit width. The last byte is
zero-padded.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from gsir import params
from gsir.core import GaussianSet
from gsir.errors import BadMagicError, BitstreamError, InvalidParameterError, TruncatedPayloadError, UnsupportedVersionError
from gsir.quant import ATTRIBUTES, COMPONENTS, AttributeRange, QuantSpec, RangeStrategy, dequantize, quantize

log = logging.getLogger(__name__)

CODER_RAW = 0
HEADER_LEN = 4 + 2 + 4 + 4 + 2 + 1 + 1 + 4 * params.max_stages + len(ATTRIBUTES) * (1 + 4 + 4)


@dataclass(frozen=True)
class StreamMeta:
    width: int
    height: int
    n_stages: int
    stage_counts: tuple = ()

    @property
    def canvas(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def count(self) -> int:
        return sum(self.stage_counts)


def payload_bits(count: int, spec: QuantSpec) -> int:
    return count * spec.bits_per_primitive


def _columns(symbols: dict):
    for attr in ATTRIBUTES:
        for k in range(COMPONENTS[attr]):
            yield attr, symbols[attr][:, k]


def _pack(symbols: dict, spec: QuantSpec) -> bytes:
    chunks = []
    for attr, col in _columns(symbols):
        b = spec[attr].bits
        shifts = np.arange(b - 1, -1, -1, dtype=np.uint32)
        chunks.append(((col[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1))
    if not chunks or sum(c.size for c in chunks) == 0:
        return b""
    return np.packbits(np.concatenate(chunks)).tobytes()


def _unpack(payload: bytes, count: int, spec: QuantSpec) -> dict:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    symbols = {a: np.zeros((count, COMPONENTS[a]), dtype=np.uint32) for a in ATTRIBUTES}
    pos = 0
    for attr in ATTRIBUTES:
        b = spec[attr].bits
        weights = (1 << np.arange(b - 1, -1, -1)).astype(np.uint32)
        for k in range(COMPONENTS[attr]):
            chunk = bits[pos:pos + count * b].reshape(count, b).astype(np.uint32)
            symbols[attr][:, k] = chunk @ weights
            pos += count * b
    return symbols


def _stage_counts(gset: GaussianSet, n_stages: int) -> list[int]:
    if gset.count and np.any(np.diff(gset.stage_id) < 0):
        raise InvalidParameterError("stage ids must be non-decreasing to form a stream")
    if gset.count and gset.stage_id.max() > n_stages:
        raise InvalidParameterError(f"stage id {gset.stage_id.max()} exceeds n_stages={n_stages}")
    return gset.stage_counts(n_stages)


def encode_bitstream(gset: GaussianSet, spec: QuantSpec, meta: StreamMeta) -> bytes:
    if not 1 <= meta.n_stages <= params.max_stages:
        raise InvalidParameterError(f"n_stages must be in [1, {params.max_stages}], got {meta.n_stages}")
    counts = _stage_counts(gset, meta.n_stages)
    header = bytearray()
    header += params.magic
    header += params.format_version.to_bytes(2, "little")
    header += meta.width.to_bytes(4, "little")
    header += meta.height.to_bytes(4, "little")
    header += meta.n_stages.to_bytes(2, "little")
    header += RangeStrategy(spec.strategy).tag.to_bytes(1, "little")
    header += CODER_RAW.to_bytes(1, "little")
    for i in range(params.max_stages):
        header += (counts[i] if i < len(counts) else 0).to_bytes(4, "little")
    for attr in ATTRIBUTES:
        r = spec[attr]
        header += r.bits.to_bytes(1, "little")
        header += np.array([r.alpha, r.beta], dtype="<f4").tobytes()
    assert len(header) == HEADER_LEN
    payload = _pack(quantize(gset, spec, meta.canvas), spec)
    log.debug(f"encoded {gset.count=} header={HEADER_LEN} payload={len(payload)}")
    return bytes(header) + payload


def decode_header(data: bytes) -> tuple[QuantSpec, StreamMeta]:
    if len(data) < 4 or data[:4] != params.magic:
        if len(data) < 4:
            raise TruncatedPayloadError(f"stream of {len(data)} bytes is shorter than the magic")
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {params.magic!r}")
    if len(data) < 6:
        raise TruncatedPayloadError("stream ends inside the version field")
    version = int.from_bytes(data[4:6], "little")
    if version != params.format_version:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if len(data) < HEADER_LEN:
        raise TruncatedPayloadError(f"header needs {HEADER_LEN} bytes, got {len(data)}")
    width = int.from_bytes(data[6:10], "little")
    height = int.from_bytes(data[10:14], "little")
    if width == 0 or height == 0:
        raise BitstreamError(f"empty canvas {width}x{height}")
    n_stages = int.from_bytes(data[14:16], "little")
    strategy_tag, coder = data[16], data[17]
    if strategy_tag >= len(RangeStrategy):
        raise BitstreamError(f"unknown range strategy tag {strategy_tag}")
    if coder != CODER_RAW:
        raise BitstreamError(f"unknown coder {coder}")
    if not 1 <= n_stages <= params.max_stages:
        raise BitstreamError(f"invalid stage count {n_stages}")
    pos = 18
    counts = [int.from_bytes(data[pos + 4 * i:pos + 4 * i + 4], "little") for i in range(params.max_stages)]
    if any(counts[n_stages:]):
        raise BitstreamError(f"primitives recorded beyond stage {n_stages}")
    pos += 4 * params.max_stages
    ranges = {}
    for attr in ATTRIBUTES:
        bits = data[pos]
        alpha, beta = np.frombuffer(data, dtype="<f4", count=2, offset=pos + 1)
        pos += 9
        try:
            ranges[attr] = AttributeRange(int(bits), float(alpha), float(beta))
        except InvalidParameterError as e:
            raise BitstreamError(f"invalid range for {attr}: {e}") from e
    spec = QuantSpec(ranges, RangeStrategy.from_tag(strategy_tag))
    return spec, StreamMeta(width, height, n_stages, tuple(counts[:n_stages]))


def decode_bitstream(data: bytes) -> tuple[GaussianSet, QuantSpec, StreamMeta]:
    spec, meta = decode_header(data)
    count = meta.count
    need = math.ceil(payload_bits(count, spec) / 8)
    payload = data[HEADER_LEN:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload needs {need} bytes for {count} primitives, got {len(payload)}")
    if len(payload) > need:
        raise BitstreamError(f"{len(payload) - need} trailing bytes after the payload")
    stage_id = np.repeat(np.arange(1, meta.n_stages + 1), meta.stage_counts)
    if count == 0:
        return GaussianSet.empty(), spec, meta
    symbols = _unpack(payload, count, spec)
    return dequantize(symbols, spec, meta.canvas, stage_id), spec, meta


def decode_symbols(data: bytes) -> dict:
    spec, meta = decode_header(data)
    return _unpack(data[HEADER_LEN:], meta.count, spec)
