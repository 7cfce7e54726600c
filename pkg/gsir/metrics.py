"""Render loss, PSNR / SSIM / MS-SSIM, and patch-wise quality maps.

SSIM uses an 11-tap Gaussian window (sigma 1.5), K1=0.01, K2=0.03 on [0, 1]
data, zero padding at the borders, per channel, averaged over channels. With a
symmetric window and zero padding the filter is self-adjoint, which the
analytic SSIM gradient relies on.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from gsir import params
from gsir.core import ImageBuffer, check_image, check_same_shape
from gsir.errors import InvalidParameterError

C1 = params.ssim_k1 ** 2
C2 = params.ssim_k2 ** 2


def gaussian_window(size: int = params.ssim_window, sigma: float = params.ssim_sigma) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


_WINDOW = gaussian_window()


def _blur(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


@dataclass
class _SsimTerms:
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    index: np.ndarray


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> _SsimTerms:
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x * mu_x
    syy = _blur(y * y) - mu_y * mu_y
    sxy = _blur(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * sxy + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = sxx + syy + C2
    return _SsimTerms(mu_x, mu_y, a1, a2, b1, b2, (a1 * a2) / (b1 * b2))


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    ssim_term: float
    total: float


@dataclass(frozen=True)
class QualityMaps:
    psnr_map: np.ndarray
    ssim_map: np.ndarray
    patch_size: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.psnr_map.shape


def ssim_map(pred: ImageBuffer, target: ImageBuffer) -> np.ndarray:
    """Dense SSIM index, H x W x 3."""
    pred, target = check_image(pred, "pred"), check_image(target, "target")
    check_same_shape(pred, target)
    return _ssim_terms(pred, target).index


def ssim(pred: ImageBuffer, target: ImageBuffer) -> float:
    return float(np.mean(ssim_map(pred, target)))


def ssim_with_grad(pred: ImageBuffer, target: ImageBuffer) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient w.r.t. pred."""
    pred, target = check_image(pred, "pred"), check_image(target, "target")
    check_same_shape(pred, target)
    t = _ssim_terms(pred, target)
    denom = t.b1 * t.b2
    d_mu_x = 2.0 * t.mu_y * t.a2 / denom - 2.0 * t.mu_x * t.index / t.b1
    d_sxx = -t.index / t.b2
    d_sxy = 2.0 * t.a1 / denom
    # sxx = F(x^2) - mu_x^2, sxy = F(xy) - mu_x mu_y
    grad = (_blur(d_mu_x - 2.0 * t.mu_x * d_sxx - t.mu_y * d_sxy)
            + 2.0 * pred * _blur(d_sxx)
            + target * _blur(d_sxy))
    return float(np.mean(t.index)), grad / t.index.size


def l1_with_grad(pred: ImageBuffer, target: ImageBuffer) -> tuple[float, np.ndarray]:
    diff = pred - target
    # subgradient 0 at ties, rounding noise included
    sign = np.where(np.abs(diff) > params.l1_tie_tolerance, np.sign(diff), 0.0)
    return float(np.mean(np.abs(diff))), sign / diff.size


def loss_render(pred: ImageBuffer, target: ImageBuffer) -> LossBreakdown:
    """0.7 * L1 + 0.3 * (1 - SSIM)."""
    pred, target = check_image(pred, "pred"), check_image(target, "target")
    check_same_shape(pred, target)
    l1 = float(np.mean(np.abs(pred - target)))
    ssim_term = 1.0 - ssim(pred, target)
    return LossBreakdown(l1, ssim_term, params.l1_weight * l1 + params.ssim_weight * ssim_term)


def loss_render_with_grad(pred: ImageBuffer, target: ImageBuffer) -> tuple[LossBreakdown, np.ndarray]:
    pred, target = check_image(pred, "pred"), check_image(target, "target")
    check_same_shape(pred, target)
    l1, g_l1 = l1_with_grad(pred, target)
    s, g_s = ssim_with_grad(pred, target)
    loss = LossBreakdown(l1, 1.0 - s, params.l1_weight * l1 + params.ssim_weight * (1.0 - s))
    return loss, params.l1_weight * g_l1 - params.ssim_weight * g_s


def psnr_from_mse(mse):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), params.psnr_cap)
    db = np.minimum(db, params.psnr_cap)
    return float(db) if db.ndim == 0 else db


def psnr(pred: ImageBuffer, target: ImageBuffer) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 100 dB."""
    pred, target = check_image(pred, "pred"), check_image(target, "target")
    check_same_shape(pred, target)
    return psnr_from_mse(np.mean((pred - target) ** 2))


def ms_ssim_scales(height: int, width: int) -> int:
    side = min(height, width)
    n = len(params.ms_ssim_weights)
    while n > 1 and side < params.ssim_window * 2 ** (n - 1):
        n -= 1
    return n


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(pred: ImageBuffer, target: ImageBuffer) -> float:
    """Multi-scale SSIM with the standard 5-scale weights; fewer scales (weights
    renormalized) when the image is smaller than 176 px on its short side."""
    pred, target = check_image(pred, "pred"), check_image(target, "target")
    check_same_shape(pred, target)
    n = ms_ssim_scales(*pred.shape[:2])
    weights = np.asarray(params.ms_ssim_weights[:n])
    weights = weights / weights.sum()
    x, y = pred, target
    value = np.ones(3)
    for i in range(n):
        t = _ssim_terms(x, y)
        if i == n - 1:
            term = t.index.mean(axis=(0, 1))
        else:
            term = (t.a2 / t.b2).mean(axis=(0, 1))
            x, y = _downsample(x), _downsample(y)
        value *= np.maximum(term, 0.0) ** weights[i]
    return float(value.mean())


def _pool(values: np.ndarray, p: int) -> np.ndarray:
    h, w, ch = values.shape
    gh, gw = -(-h // p), -(-w // p)
    padded = np.full((gh * p, gw * p, ch), np.nan)
    padded[:h, :w] = values
    return np.nanmean(padded.reshape(gh, p, gw, p, ch), axis=(1, 3, 4))


def quality_maps(target: ImageBuffer, recon: ImageBuffer, patch_size: int) -> QualityMaps:
    """Per-patch PSNR (MSE over the patch's pixels, all channels jointly) and
    per-patch SSIM pooled from the image-wide dense SSIM map."""
    if patch_size < 2:
        raise InvalidParameterError(f"patch size must be >= 2, got {patch_size}")
    target, recon = check_image(target, "target"), check_image(recon, "recon")
    check_same_shape(target, recon)
    mse = _pool((recon - target) ** 2, patch_size)
    return QualityMaps(
        psnr_map=psnr_from_mse(mse),
        ssim_map=_pool(ssim_map(recon, target), patch_size),
        patch_size=patch_size,
    )


def grid_shape(height: int, width: int, patch_size: int) -> tuple[int, int]:
    return (math.ceil(height / patch_size), math.ceil(width / patch_size))
