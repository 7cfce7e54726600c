"""Uniform quantization of Gaussian attributes.

Every attribute has one range {b, alpha, beta}; a value x maps to

    q = round((clamp(x, beta, beta + alpha) - beta) / alpha * (2^b - 1))

Multi-component attributes (log-scale, color) share their range across
components. mu is normalized by the canvas (W, H) first. alpha and beta are
held at float32 precision, which is what the bitstream stores.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from gsir import params
from gsir.core import GaussianSet, ImageBuffer
from gsir.errors import EmptyCorpusError, InvalidParameterError
from gsir.metrics import LossBreakdown, loss_render_with_grad
from gsir.render import DEFAULT_RENDER, GaussianGrads, RenderConfig, render, render_backward

log = logging.getLogger(__name__)

ATTRIBUTES = ("mu_x", "mu_y", "log_scale", "theta", "color")
COMPONENTS = {"mu_x": 1, "mu_y": 1, "log_scale": 2, "theta": 1, "color": 3}


class RangeStrategy(str, Enum):
    PER_IMAGE = "per_image"
    GLOBAL = "global"
    ADAPTIVE = "adaptive"

    @property
    def tag(self) -> int:
        return list(RangeStrategy).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "RangeStrategy":
        return list(cls)[tag]


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class AttributeRange:
    bits: int
    alpha: float
    beta: float

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise InvalidParameterError(f"bit width must be in [1, 16], got {self.bits}")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise InvalidParameterError(f"range must be finite, got alpha={self.alpha} beta={self.beta}")
        object.__setattr__(self, "alpha", _f32(self.alpha))
        object.__setattr__(self, "beta", _f32(self.beta))
        if self.alpha <= 0.0:
            raise InvalidParameterError(f"range width alpha must be > 0, got {self.alpha}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def step(self) -> float:
        return self.alpha / self.levels

    @property
    def top(self) -> float:
        return self.beta + self.alpha

    @classmethod
    def covering(cls, bits: int, lo: float, hi: float) -> "AttributeRange":
        """Smallest float32 range containing [lo, hi]."""
        beta = np.float32(lo)
        if float(beta) > lo:
            beta = np.nextafter(beta, np.float32(-np.inf))
        alpha = np.float32(max(hi - float(beta), 0.0))
        if float(beta) + float(alpha) < hi:
            alpha = np.nextafter(alpha, np.float32(np.inf))
        if alpha <= 0:
            alpha = np.float32(1e-6)
        return cls(bits, float(alpha), float(beta))


@dataclass(frozen=True)
class QuantSpec:
    ranges: dict
    strategy: RangeStrategy = RangeStrategy.GLOBAL

    def __post_init__(self):
        missing = [a for a in ATTRIBUTES if a not in self.ranges]
        if missing:
            raise InvalidParameterError(f"quantization ranges missing for {missing}")

    def __getitem__(self, attr: str) -> AttributeRange:
        return self.ranges[attr]

    @property
    def bits_per_primitive(self) -> int:
        return sum(self.ranges[a].bits * COMPONENTS[a] for a in ATTRIBUTES)

    def with_bits(self, bits: int | dict) -> "QuantSpec":
        if isinstance(bits, int):
            bits = {a: bits for a in ATTRIBUTES}
        return QuantSpec({a: AttributeRange(bits.get(a, r.bits), r.alpha, r.beta) for a, r in self.ranges.items()},
                         self.strategy)

    def with_strategy(self, strategy: RangeStrategy) -> "QuantSpec":
        if strategy == self.strategy:
            return self
        return QuantSpec(self.ranges, strategy)


def default_global_base(bits: dict = params.bits) -> QuantSpec:
    return QuantSpec({a: AttributeRange(bits[a], *params.global_base[a]) for a in ATTRIBUTES}, RangeStrategy.GLOBAL)


def attribute_values(gset: GaussianSet, canvas: tuple[int, int]) -> dict:
    """Per attribute an (n, components) array in quantization space."""
    width, height = canvas
    return {
        "mu_x": gset.mu[:, 0:1] / width,
        "mu_y": gset.mu[:, 1:2] / height,
        "log_scale": np.array(gset.log_scale),
        "theta": gset.theta[:, None],
        "color": np.array(gset.color),
    }


def set_from_attributes(values: dict, canvas: tuple[int, int], stage_id=None) -> GaussianSet:
    width, height = canvas
    return GaussianSet(
        mu=np.concatenate([values["mu_x"] * width, values["mu_y"] * height], axis=1),
        log_scale=values["log_scale"],
        theta=values["theta"][:, 0],
        color=values["color"],
        stage_id=stage_id,
    )


def quantize_values(x, rng: AttributeRange) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), rng.beta, rng.top)
    q = np.rint((x - rng.beta) / rng.alpha * rng.levels)
    return np.clip(q, 0, rng.levels).astype(np.uint32)


def dequantize_values(q, rng: AttributeRange) -> np.ndarray:
    return rng.beta + np.asarray(q, dtype=np.float64) / rng.levels * rng.alpha


def quantize(gset: GaussianSet, spec: QuantSpec, canvas: tuple[int, int]) -> dict:
    """Symbols per attribute, (n, components) uint32 arrays."""
    values = attribute_values(gset, canvas)
    return {a: quantize_values(values[a], spec[a]) for a in ATTRIBUTES}


def dequantize(symbols: dict, spec: QuantSpec, canvas: tuple[int, int], stage_id=None) -> GaussianSet:
    values = {a: dequantize_values(symbols[a], spec[a]) for a in ATTRIBUTES}
    return set_from_attributes(values, canvas, stage_id)


def _pooled(values: dict, attr: str) -> np.ndarray:
    return values[attr].reshape(-1)


def dequantization_error(x, rng: AttributeRange) -> float:
    """Sum of squared round-trip errors, clamping included."""
    return float(np.sum((x - dequantize_values(quantize_values(x, rng), rng)) ** 2))


def derive_ranges(gset: GaussianSet, strategy: RangeStrategy, global_base: QuantSpec,
                  canvas: tuple[int, int]) -> QuantSpec:
    """PER_IMAGE: raw min/max of the set. GLOBAL: the base, verbatim.
    ADAPTIVE: base plus per-image offsets, each clamped to half the base width.
    Offsets are read off robust percentiles and off the full extent; the
    candidate with the smallest dequantization error wins, zero offsets included."""
    strategy = RangeStrategy(strategy)
    if strategy == RangeStrategy.GLOBAL:
        return global_base.with_strategy(RangeStrategy.GLOBAL)
    if gset.count == 0:
        raise InvalidParameterError(f"{strategy.value} ranges need a non-empty set")
    values = attribute_values(gset, canvas)
    ranges = {}
    for attr in ATTRIBUTES:
        base = global_base[attr]
        x = _pooled(values, attr)
        if strategy == RangeStrategy.PER_IMAGE:
            ranges[attr] = AttributeRange.covering(base.bits, float(x.min()), float(x.max()))
            continue
        bound = params.adaptive_offset_bound * base.alpha
        candidates = [base]
        for lo, hi in (np.percentile(x, params.adaptive_percentiles), (x.min(), x.max())):
            d_alpha = float(np.clip((hi - lo) - base.alpha, -bound, bound))
            d_beta = float(np.clip(lo - base.beta, -bound, bound))
            candidates.append(AttributeRange(base.bits, base.alpha + d_alpha, base.beta + d_beta))
        # min keeps the first of equals, so ties stay on the base
        ranges[attr] = min(candidates, key=lambda r: dequantization_error(x, r))
        log.debug(f"adaptive {attr}: alpha={ranges[attr].alpha:.4f} beta={ranges[attr].beta:.4f}")
    return QuantSpec(ranges, strategy)


def fit_global_base(sets, canvases, bits: dict = params.bits) -> QuantSpec:
    """Learned global range: robust percentiles pooled over a corpus of sets."""
    pooled = {a: [] for a in ATTRIBUTES}
    for gset, canvas in zip(sets, canvases):
        if gset.count == 0:
            continue
        values = attribute_values(gset, canvas)
        for a in ATTRIBUTES:
            pooled[a].append(_pooled(values, a))
    if not pooled["mu_x"]:
        raise EmptyCorpusError("no primitives to fit a global range on")
    ranges = {}
    for a in ATTRIBUTES:
        lo, hi = np.percentile(np.concatenate(pooled[a]), params.adaptive_percentiles)
        ranges[a] = AttributeRange.covering(bits[a], float(lo), float(hi))
    return QuantSpec(ranges, RangeStrategy.GLOBAL)


@dataclass(frozen=True)
class SteResult:
    gaussians: GaussianSet  # dequantize(quantize(x))
    passes: dict            # per attribute, True where x was in range


def ste_quantize(gset: GaussianSet, spec: QuantSpec, canvas: tuple[int, int]) -> SteResult:
    """Forward of the straight-through quantizer. The backward rule is
    ste_backward: gradient 1 for in-range values, 0 where clamped."""
    values = attribute_values(gset, canvas)
    passes = {a: (values[a] >= spec[a].beta) & (values[a] <= spec[a].top) for a in ATTRIBUTES}
    quantized = dequantize(quantize(gset, spec, canvas), spec, canvas, gset.stage_id)
    return SteResult(quantized, passes)


def ste_backward(grads: GaussianGrads, passes: dict) -> GaussianGrads:
    return GaussianGrads(
        d_mu=grads.d_mu * np.concatenate([passes["mu_x"], passes["mu_y"]], axis=1),
        d_log_scale=grads.d_log_scale * passes["log_scale"],
        d_theta=grads.d_theta * passes["theta"][:, 0],
        d_color=grads.d_color * passes["color"],
    )


@dataclass(frozen=True)
class QuantLoss:
    render: LossBreakdown
    err: float
    total: float


def loss_q(final_set: GaussianSet, spec: QuantSpec, target: ImageBuffer, gamma: float = params.quant_gamma,
           render_cfg: RenderConfig = DEFAULT_RENDER,
           with_grad: bool = False) -> QuantLoss | tuple[QuantLoss, GaussianGrads]:
    """L_render(R(Q(G_S)), I_gt) + gamma * L_err.

    L_err is the mean squared quantization error in units of each attribute's
    range width (mu canvas-normalized). Its gradient treats the quantized
    value as a constant; the render term goes through the straight-through rule.
    """
    height, width = target.shape[:2]
    canvas = (width, height)
    ste = ste_quantize(final_set, spec, canvas)
    pred = render(ste.gaussians, width, height, render_cfg)
    loss, d_img = loss_render_with_grad(pred, target)

    values = attribute_values(final_set, canvas)
    quantized = attribute_values(ste.gaussians, canvas)
    n_terms = sum(values[a].size for a in ATTRIBUTES)
    err, d_err = 0.0, {}
    for a in ATTRIBUTES:
        # theta wraps at pi; compare on the same branch
        diff = values[a] - quantized[a]
        if a == "theta":
            diff = (diff + math.pi / 2) % math.pi - math.pi / 2
        diff = diff / spec[a].alpha
        err += float(np.sum(diff * diff))
        d_err[a] = 2.0 * diff / spec[a].alpha / max(n_terms, 1)
    err = err / n_terms if n_terms else 0.0
    result = QuantLoss(render=loss, err=err, total=loss.total + gamma * err)
    if not with_grad:
        return result

    grads = ste_backward(render_backward(ste.gaussians, d_img, render_cfg), ste.passes)
    grads = grads + GaussianGrads(
        d_mu=gamma * np.concatenate([d_err["mu_x"] / width, d_err["mu_y"] / height], axis=1),
        d_log_scale=gamma * d_err["log_scale"],
        d_theta=gamma * d_err["theta"][:, 0],
        d_color=gamma * d_err["color"],
    )
    return result, grads
