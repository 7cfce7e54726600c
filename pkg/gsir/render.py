"""Tiled forward splatting and its analytic backward pass.

C_p = sum_n c_n * exp(-1/2 d^T Sigma_n^-1 d),  d = p_center - mu_n

Each Gaussian only touches pixels inside its cutoff ellipse (cutoff_sigmas
standard deviations). Culling is identical in forward and backward, so the
backward pass is the exact derivative of the truncated renderer. Tiles are
independent; within a tile every pixel sums its Gaussians in index order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from gsir import params
from gsir.core import GaussianSet, ImageBuffer, check_image, merge_sets, zeros_image
from gsir.settings import get_settings


class RenderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    cutoff_sigmas: float = Field(default=params.cutoff_sigmas, ge=1.0)
    tile_size: int = Field(default=params.tile_size, ge=4)
    min_sigma: float = Field(default=params.min_render_sigma, gt=0.0)
    threads: int | None = Field(default=None, ge=1)


DEFAULT_RENDER = RenderConfig()


@dataclass(frozen=True)
class GaussianGrads:
    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_theta: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)))

    @property
    def count(self) -> int:
        return self.d_mu.shape[0]

    def __add__(self, other: "GaussianGrads") -> "GaussianGrads":
        return GaussianGrads(self.d_mu + other.d_mu, self.d_log_scale + other.d_log_scale,
                             self.d_theta + other.d_theta, self.d_color + other.d_color)

    def scaled(self, k: float) -> "GaussianGrads":
        return GaussianGrads(k * self.d_mu, k * self.d_log_scale, k * self.d_theta, k * self.d_color)

    def slice(self, start: int, stop: int) -> "GaussianGrads":
        return GaussianGrads(self.d_mu[start:stop], self.d_log_scale[start:stop],
                             self.d_theta[start:stop], self.d_color[start:stop])

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_mu)) and np.all(np.isfinite(self.d_log_scale))
                    and np.all(np.isfinite(self.d_theta)) and np.all(np.isfinite(self.d_color)))


@dataclass
class _Prepared:
    mu: np.ndarray
    color: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    k1: np.ndarray          # 1 / s1_eff^2
    k2: np.ndarray
    live1: np.ndarray       # 1.0 where s1 is above the render floor
    live2: np.ndarray
    a: np.ndarray           # Sigma^-1 = [[a, b], [b, c]]
    b: np.ndarray
    c: np.ndarray
    tx0: np.ndarray
    tx1: np.ndarray
    ty0: np.ndarray
    ty1: np.ndarray
    visible: np.ndarray


def _prepare(gset: GaussianSet, width: int, height: int, cfg: RenderConfig) -> _Prepared:
    scale = np.exp(gset.log_scale)
    eff = np.maximum(scale, cfg.min_sigma)
    cos, sin = np.cos(gset.theta), np.sin(gset.theta)
    k1, k2 = 1.0 / eff[:, 0] ** 2, 1.0 / eff[:, 1] ** 2
    a = cos * cos * k1 + sin * sin * k2
    b = cos * sin * (k1 - k2)
    c = sin * sin * k1 + cos * cos * k2

    # axis-aligned extent of the cutoff ellipse
    var_x = cos * cos * eff[:, 0] ** 2 + sin * sin * eff[:, 1] ** 2
    var_y = sin * sin * eff[:, 0] ** 2 + cos * cos * eff[:, 1] ** 2
    rx = cfg.cutoff_sigmas * np.sqrt(var_x)
    ry = cfg.cutoff_sigmas * np.sqrt(var_y)
    mx, my = gset.mu[:, 0], gset.mu[:, 1]
    col0 = np.maximum(np.ceil(mx - rx - 0.5), 0)
    col1 = np.minimum(np.floor(mx + rx - 0.5), width - 1)
    row0 = np.maximum(np.ceil(my - ry - 0.5), 0)
    row1 = np.minimum(np.floor(my + ry - 0.5), height - 1)
    visible = (col0 <= col1) & (row0 <= row1)
    t = cfg.tile_size
    return _Prepared(
        mu=gset.mu, color=gset.color, cos=cos, sin=sin, k1=k1, k2=k2,
        live1=(scale[:, 0] > cfg.min_sigma).astype(np.float64),
        live2=(scale[:, 1] > cfg.min_sigma).astype(np.float64),
        a=a, b=b, c=c,
        tx0=np.where(visible, col0 // t, 0).astype(np.int64),
        tx1=np.where(visible, col1 // t, -1).astype(np.int64),
        ty0=np.where(visible, row0 // t, 0).astype(np.int64),
        ty1=np.where(visible, row1 // t, -1).astype(np.int64),
        visible=visible,
    )


def _tiles(width: int, height: int, prep: _Prepared, tile: int):
    """Yield (y0, y1, x0, x1, ids) per non-empty tile, row-major; ids ascending."""
    for ty in range(-(-height // tile)):
        in_row = prep.visible & (prep.ty0 <= ty) & (prep.ty1 >= ty)
        if not in_row.any():
            continue
        for tx in range(-(-width // tile)):
            ids = np.nonzero(in_row & (prep.tx0 <= tx) & (prep.tx1 >= tx))[0]
            if ids.size:
                y0, x0 = ty * tile, tx * tile
                yield y0, min(y0 + tile, height), x0, min(x0 + tile, width), ids


def _tile_alpha(prep: _Prepared, ids, y0, y1, x0, x1, cutoff):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.reshape(-1) + 0.5
    py = ys.reshape(-1) + 0.5
    dx = px[None, :] - prep.mu[ids, 0][:, None]
    dy = py[None, :] - prep.mu[ids, 1][:, None]
    a, b, c = prep.a[ids][:, None], prep.b[ids][:, None], prep.c[ids][:, None]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    alpha = np.where(q <= cutoff * cutoff, np.exp(-0.5 * q), 0.0)
    return dx, dy, alpha


def _map_tiles(fn, tiles, threads):
    if threads <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map keeps tile order, so merging below is deterministic
        return list(pool.map(fn, tiles))


def _threads(cfg: RenderConfig) -> int:
    return cfg.threads if cfg.threads is not None else get_settings().threads


def render(gset: GaussianSet, width: int, height: int, cfg: RenderConfig = DEFAULT_RENDER) -> ImageBuffer:
    out = zeros_image(width, height)
    if gset.count == 0:
        return out
    prep = _prepare(gset, width, height, cfg)
    tiles = list(_tiles(width, height, prep, cfg.tile_size))

    def forward(tile):
        y0, y1, x0, x1, ids = tile
        _, _, alpha = _tile_alpha(prep, ids, y0, y1, x0, x1, cfg.cutoff_sigmas)
        return (alpha[:, :, None] * prep.color[ids][:, None, :]).sum(axis=0)

    for (y0, y1, x0, x1, _), block in zip(tiles, _map_tiles(forward, tiles, _threads(cfg))):
        out[y0:y1, x0:x1] = block.reshape(y1 - y0, x1 - x0, 3)
    return out


def render_additive_check(a: GaussianSet, b: GaussianSet, width: int, height: int,
                          cfg: RenderConfig = DEFAULT_RENDER) -> float:
    """max |R(a U b) - R(a) - R(b)|."""
    joint = render(merge_sets(a, b), width, height, cfg)
    split = render(a, width, height, cfg) + render(b, width, height, cfg)
    return float(np.max(np.abs(joint - split))) if joint.size else 0.0


def render_backward(gset: GaussianSet, d_output: ImageBuffer, cfg: RenderConfig = DEFAULT_RENDER) -> GaussianGrads:
    """Gradients of L = sum_p <d_output_p, C_p> w.r.t. every attribute.

    Accumulates dL/dSigma^-1 per Gaussian, then chains to (log-scale, theta).
    """
    d_output = check_image(d_output, "d_output")
    height, width = d_output.shape[:2]
    n = gset.count
    if n == 0:
        return GaussianGrads.zeros(0)
    prep = _prepare(gset, width, height, cfg)
    tiles = list(_tiles(width, height, prep, cfg.tile_size))

    def backward(tile):
        y0, y1, x0, x1, ids = tile
        g = d_output[y0:y1, x0:x1].reshape(-1, 3)
        dx, dy, alpha = _tile_alpha(prep, ids, y0, y1, x0, x1, cfg.cutoff_sigmas)
        color = prep.color[ids]
        d_alpha = (color[:, None, :] * g[None, :, :]).sum(axis=2)
        d_q = -0.5 * alpha * d_alpha
        a, b, c = prep.a[ids][:, None], prep.b[ids][:, None], prep.c[ids][:, None]
        part = np.empty((ids.size, 8))
        part[:, 0] = -2.0 * (d_q * (a * dx + b * dy)).sum(axis=1)
        part[:, 1] = -2.0 * (d_q * (b * dx + c * dy)).sum(axis=1)
        part[:, 2] = (d_q * dx * dx).sum(axis=1)
        part[:, 3] = (d_q * 2.0 * dx * dy).sum(axis=1)
        part[:, 4] = (d_q * dy * dy).sum(axis=1)
        part[:, 5:8] = (alpha[:, :, None] * g[None, :, :]).sum(axis=1)
        return ids, part

    acc = np.zeros((n, 8))
    for ids, part in _map_tiles(backward, tiles, _threads(cfg)):
        acc[ids] += part  # ids are unique within a tile

    d_a, d_b, d_c = acc[:, 2], acc[:, 3], acc[:, 4]
    cos, sin, k1, k2 = prep.cos, prep.sin, prep.k1, prep.k2
    dk1 = -2.0 * k1 * prep.live1
    dk2 = -2.0 * k2 * prep.live2
    d_l1 = (d_a * cos * cos + d_b * cos * sin + d_c * sin * sin) * dk1
    d_l2 = (d_a * sin * sin - d_b * cos * sin + d_c * cos * cos) * dk2
    d_theta = (d_a * 2.0 * cos * sin * (k2 - k1)
               + d_b * (cos * cos - sin * sin) * (k1 - k2)
               + d_c * 2.0 * cos * sin * (k1 - k2))
    grads = GaussianGrads(
        d_mu=acc[:, 0:2].copy(),
        d_log_scale=np.stack([d_l1, d_l2], axis=1),
        d_theta=d_theta,
        d_color=acc[:, 5:8].copy(),
    )
    return grads
