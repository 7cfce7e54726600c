"""Residual-to-Gaussian predictors. Each patch token yields one candidate; the
stage mask decides which candidates become primitives.

HEURISTIC reads the candidate off the residual's energy moments.
TINY_LINEAR is one linear map per stage from the zero-padded patch residual
(plus a bias) to 9 raw outputs:

    0-1  mu offset, sigmoid(.) * p inside the token's patch
    2-3  log-scales
    4-5  theta = 1/2 atan2(o4, o5), canonicalized
    6-8  signed color
"""

import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from gsir import params
from gsir.core import GaussianSet, ImageBuffer, canonicalize_theta
from gsir.errors import BitstreamError, BadMagicError, ShapeMismatchError, TruncatedPayloadError, UnsupportedVersionError
from gsir.metrics import grid_shape
from gsir.stagewise.control import StageMask, token_origins

log = logging.getLogger(__name__)

N_OUT = 9


def patch_tokens(residual: ImageBuffer, patch_size: int) -> np.ndarray:
    """gh x gw x p x p x 3; partial edge patches are zero-padded."""
    h, w = residual.shape[:2]
    gh, gw = grid_shape(h, w, patch_size)
    padded = np.zeros((gh * patch_size, gw * patch_size, 3))
    padded[:h, :w] = residual
    return padded.reshape(gh, patch_size, gw, patch_size, 3).transpose(0, 2, 1, 3, 4)


def untoken(tokens: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of patch_tokens (padding dropped)."""
    gh, gw, p = tokens.shape[:3]
    return tokens.transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, 3)[:height, :width]


class PredictorModel(Protocol):
    kind: str
    patch_size: int

    def predict(self, residual: ImageBuffer, mask: StageMask) -> GaussianSet: ...


def predict_increment(model: PredictorModel, residual: ImageBuffer, mask: StageMask) -> GaussianSet:
    """dG_i: one primitive per active token, tagged with the mask's stage."""
    h, w = residual.shape[:2]
    p = model.patch_size
    if mask.shape != grid_shape(h, w, p):
        raise ShapeMismatchError(f"mask grid {mask.shape} does not match residual {residual.shape} at p={p}")
    if mask.count == 0:
        return GaussianSet.empty()
    return model.predict(residual, mask).with_stage(mask.stage)


class HeuristicPredictor:
    kind = "heuristic"

    def __init__(self, patch_size: int):
        self.patch_size = patch_size

    def predict(self, residual: ImageBuffer, mask: StageMask) -> GaussianSet:
        p = self.patch_size
        h, w = residual.shape[:2]
        active = mask.grid.reshape(-1)
        tokens = patch_tokens(residual, p).reshape(-1, p, p, 3)[active]
        origins = token_origins(mask.shape, p)[active]
        n = tokens.shape[0]

        energy = np.abs(tokens).sum(axis=3)
        total = energy.sum(axis=(1, 2))
        has_energy = total > 0
        safe_total = np.where(has_energy, total, 1.0)
        local = np.arange(p) + 0.5
        wx = energy.sum(axis=1)  # mass per column
        wy = energy.sum(axis=2)  # mass per row
        cx = (wx * local).sum(axis=1) / safe_total
        cy = (wy * local).sum(axis=1) / safe_total
        dx = local[None, None, :] - cx[:, None, None]
        dy = local[None, :, None] - cy[:, None, None]
        # energy-weighted second moments plus the variance of a unit pixel
        sxx = (energy * dx * dx).sum(axis=(1, 2)) / safe_total + 1.0 / 12.0
        syy = (energy * dy * dy).sum(axis=(1, 2)) / safe_total + 1.0 / 12.0
        sxy = (energy * dx * dy).sum(axis=(1, 2)) / safe_total

        half = np.sqrt(0.25 * (sxx - syy) ** 2 + sxy * sxy)
        lam1 = 0.5 * (sxx + syy) + half
        lam2 = np.maximum(0.5 * (sxx + syy) - half, 1e-12)
        theta = 0.5 * np.arctan2(2.0 * sxy, sxx - syy)
        lo, hi = math.log(params.heuristic_min_scale), math.log(params.heuristic_max_scale_patches * p)
        log_scale = np.clip(0.5 * np.log(np.stack([lam1, lam2], axis=1)), lo, hi)

        # mean color under the energy weights, rescaled so the Gaussian's
        # integral best matches the patch's residual mass
        mean_color = (energy[..., None] * tokens).sum(axis=(1, 2)) / safe_total[:, None]
        mass = tokens.sum(axis=(1, 2))
        integral = 2.0 * math.pi * np.exp(log_scale).prod(axis=1)
        norm = (mean_color * mean_color).sum(axis=1)
        k = np.where(norm > 0, (mass * mean_color).sum(axis=1) / (integral * np.where(norm > 0, norm, 1.0)), 0.0)
        color = mean_color * k[:, None]

        # empty patches: centered in the visible part of the patch, no color
        vis_w = np.minimum(p, w - origins[:, 0])
        vis_h = np.minimum(p, h - origins[:, 1])
        cx = np.where(has_energy, cx, 0.5 * vis_w)
        cy = np.where(has_energy, cy, 0.5 * vis_h)
        theta = np.where(has_energy, theta, 0.0)
        color = np.where(has_energy[:, None], color, 0.0)
        log.debug(f"heuristic {n=} empty={int((~has_energy).sum())}")
        return GaussianSet(
            mu=origins + np.stack([cx, cy], axis=1),
            log_scale=log_scale,
            theta=canonicalize_theta(theta) if n else theta,
            color=color,
        )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class TokenBatch:
    """Active tokens of one stage: features (with bias column) and geometry."""

    features: np.ndarray   # n x (3 p^2 + 1)
    origins: np.ndarray    # n x 2
    active: np.ndarray     # flat token indices
    grid: tuple[int, int]


def token_batch(residual: ImageBuffer, mask: StageMask, patch_size: int) -> TokenBatch:
    active = np.nonzero(mask.grid.reshape(-1))[0]
    tokens = patch_tokens(residual, patch_size).reshape(-1, 3 * patch_size * patch_size)[active]
    features = np.concatenate([tokens, np.ones((active.size, 1))], axis=1)
    return TokenBatch(features, token_origins(mask.shape, patch_size)[active], active, mask.shape)


class TinyLinearPredictor:
    kind = "tiny"

    def __init__(self, weights: list[np.ndarray], patch_size: int):
        n_in = 3 * patch_size * patch_size + 1
        for w in weights:
            if w.shape != (N_OUT, n_in):
                raise ShapeMismatchError(f"stage weights must be {(N_OUT, n_in)}, got {w.shape}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.patch_size = patch_size

    @classmethod
    def initialize(cls, patch_size: int, n_stages: int, rng: np.random.Generator) -> "TinyLinearPredictor":
        p = patch_size
        n_in = 3 * p * p + 1
        s0 = p / 3.0
        base = rng.normal(0.0, 1e-3, size=(N_OUT, n_in))
        base[:, -1] = 0.0
        base[2:4, -1] = math.log(s0)
        base[5, -1] = 1.0  # theta = 0
        # color starts as the patch mean spread over a Gaussian of scale s0
        for ch in range(3):
            base[6 + ch, ch:3 * p * p:3] += 1.0 / (2.0 * math.pi * s0 * s0)
        return cls([base.copy() for _ in range(n_stages)], p)

    @property
    def n_stages(self) -> int:
        return len(self.weights)

    def raw(self, batch: TokenBatch, stage: int) -> np.ndarray:
        return batch.features @ self.weights[stage - 1].T

    def decode(self, raw: np.ndarray, batch: TokenBatch, stage: int) -> GaussianSet:
        p = self.patch_size
        n = raw.shape[0]
        if n == 0:
            return GaussianSet.empty()
        return GaussianSet(
            mu=batch.origins + _sigmoid(raw[:, 0:2]) * p,
            log_scale=raw[:, 2:4],
            theta=canonicalize_theta(0.5 * np.arctan2(raw[:, 4], raw[:, 5])),
            color=raw[:, 6:9],
            stage_id=np.full(n, stage, dtype=np.int64),
        )

    def decode_backward(self, raw: np.ndarray, d_mu, d_log_scale, d_theta, d_color) -> np.ndarray:
        """d(loss)/d(raw outputs) from gradients on the decoded attributes."""
        p = self.patch_size
        sig = _sigmoid(raw[:, 0:2])
        r2 = raw[:, 4] ** 2 + raw[:, 5] ** 2
        r2 = np.where(r2 > 0, r2, 1.0)
        d_raw = np.empty_like(raw)
        d_raw[:, 0:2] = d_mu * p * sig * (1.0 - sig)
        d_raw[:, 2:4] = d_log_scale
        d_raw[:, 4] = d_theta * 0.5 * raw[:, 5] / r2
        d_raw[:, 5] = -d_theta * 0.5 * raw[:, 4] / r2
        d_raw[:, 6:9] = d_color
        return d_raw

    def predict(self, residual: ImageBuffer, mask: StageMask) -> GaussianSet:
        if mask.stage > self.n_stages:
            raise ShapeMismatchError(f"model has {self.n_stages} stages, asked for stage {mask.stage}")
        batch = token_batch(residual, mask, self.patch_size)
        return self.decode(self.raw(batch, mask.stage), batch, mask.stage)


# weights container: little-endian header, then float64 weights stage-major
_HEADER_LEN = 4 + 2 + 2 + 2 + 2 + 4


def weights_to_bytes(model: TinyLinearPredictor) -> bytes:
    n_in = model.weights[0].shape[1]
    header = params.weights_magic + params.weights_version.to_bytes(2, "little") + \
        model.n_stages.to_bytes(2, "little") + model.patch_size.to_bytes(2, "little") + \
        N_OUT.to_bytes(2, "little") + n_in.to_bytes(4, "little")
    body = b"".join(np.asarray(w, dtype="<f8").tobytes() for w in model.weights)
    return header + body


def weights_from_bytes(data: bytes) -> TinyLinearPredictor:
    if len(data) < _HEADER_LEN:
        raise TruncatedPayloadError(f"weights header needs {_HEADER_LEN} bytes, got {len(data)}")
    if data[:4] != params.weights_magic:
        raise BadMagicError(f"bad weights magic {data[:4]!r}")
    version = int.from_bytes(data[4:6], "little")
    if version != params.weights_version:
        raise UnsupportedVersionError(f"unsupported weights version {version}")
    n_stages = int.from_bytes(data[6:8], "little")
    patch_size = int.from_bytes(data[8:10], "little")
    n_out = int.from_bytes(data[10:12], "little")
    n_in = int.from_bytes(data[12:16], "little")
    if n_out != N_OUT or n_in != 3 * patch_size * patch_size + 1:
        raise BitstreamError(f"inconsistent weights header {n_out=} {n_in=} {patch_size=}")
    need = _HEADER_LEN + n_stages * n_out * n_in * 8
    if len(data) < need:
        raise TruncatedPayloadError(f"weights payload needs {need} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", count=n_stages * n_out * n_in, offset=_HEADER_LEN)
    weights = [w.astype(np.float64) for w in flat.reshape(n_stages, n_out, n_in)]
    return TinyLinearPredictor(weights, patch_size)


def save_weights(path, model: TinyLinearPredictor) -> None:
    with open(path, "wb") as f:
        f.write(weights_to_bytes(model))


def load_weights(path) -> TinyLinearPredictor:
    with open(path, "rb") as f:
        return weights_from_bytes(f.read())
