"""Adam over Gaussian parameter arrays, the short-horizon refinement of a
detached increment, and the from-scratch fitting baseline."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import map_coordinates
from tqdm import tqdm

from gsir import params
from gsir.core import GaussianSet, ImageBuffer, check_image, check_same_shape
from gsir.errors import InvalidParameterError, NumericalError, ShapeMismatchError
from gsir.metrics import l1_with_grad, loss_render_with_grad, psnr, ssim_with_grad
from gsir.render import DEFAULT_RENDER, GaussianGrads, RenderConfig, render, render_backward
from gsir.rng import named_rng

log = logging.getLogger(__name__)

ATTRS = ("mu", "log_scale", "theta", "color")
CURVE_COLUMNS = ["iteration", "l1", "ssim_term", "total", "psnr"]


class LearningRates(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: float = Field(default=params.lr_mu, ge=0.0)
    log_scale: float = Field(default=params.lr_log_scale, ge=0.0)
    theta: float = Field(default=params.lr_theta, ge=0.0)
    color: float = Field(default=params.lr_color, ge=0.0)


class RefineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=params.refine_steps, ge=0)
    method: Literal["adam", "gd"] = "adam"
    lr: LearningRates = LearningRates()
    gd_lr: float = Field(default=params.gd_lr, gt=0.0)
    render: RenderConfig = DEFAULT_RENDER


@dataclass
class AdamState:
    """Moments per attribute. mu is stepped in canvas-normalized units
    (mu / (W, H)) so one learning rate suits every resolution."""

    lr: dict
    m: dict
    v: dict
    mu_scale: np.ndarray
    step: int = 0
    method: str = "adam"
    beta1: float = params.adam_beta1
    beta2: float = params.adam_beta2
    eps: float = params.adam_eps
    gd_lr: float = params.gd_lr

    @classmethod
    def for_set(cls, gset: GaussianSet, canvas: tuple[int, int], lr: LearningRates = LearningRates(),
                method: str = "adam", gd_lr: float = params.gd_lr) -> "AdamState":
        arrays = {a: getattr(gset, a) for a in ATTRS}
        return cls(
            lr=lr.model_dump(),
            m={a: np.zeros_like(x) for a, x in arrays.items()},
            v={a: np.zeros_like(x) for a, x in arrays.items()},
            mu_scale=np.asarray(canvas, dtype=np.float64),
            method=method,
            gd_lr=gd_lr,
        )

    @property
    def count(self) -> int:
        return self.m["mu"].shape[0]


def adam_step(gset: GaussianSet, grads: GaussianGrads, state: AdamState) -> tuple[GaussianSet, AdamState]:
    """One bias-corrected Adam update (or plain gradient descent when the state
    says so), per attribute with its own learning rate. Returns new objects."""
    if grads.count != gset.count or state.count != gset.count:
        raise ShapeMismatchError(f"set has {gset.count} primitives, grads {grads.count}, state {state.count}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    g_all = {"mu": grads.d_mu * state.mu_scale, "log_scale": grads.d_log_scale,
             "theta": grads.d_theta, "color": grads.d_color}
    m, v, updated = {}, {}, {}
    for attr in ATTRS:
        g = g_all[attr]
        if state.method == "gd":
            delta = state.gd_lr * g
            m[attr], v[attr] = state.m[attr], state.v[attr]
        else:
            m[attr] = state.beta1 * state.m[attr] + (1.0 - state.beta1) * g
            v[attr] = state.beta2 * state.v[attr] + (1.0 - state.beta2) * (g * g)
            delta = state.lr[attr] / bc1 * m[attr] / (np.sqrt(v[attr] / bc2) + state.eps)
        if attr == "mu":
            delta = delta * state.mu_scale
        updated[attr] = getattr(gset, attr) - delta
    return gset.replace(**updated), replace(state, m=m, v=v, step=t)


class Adam:
    """Adam over a dict of named arrays (predictor weights), updated in place.
    weight_decay is decoupled from the moments."""

    def __init__(self, lr: float, weight_decay: float = 0.0, beta1: float = params.adam_beta1,
                 beta2: float = params.adam_beta2, eps: float = params.adam_eps):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, arrays: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        for k in arrays:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(arrays[k])
                self.v[k] = np.zeros_like(arrays[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                arrays[k] -= self.lr * self.weight_decay * arrays[k]
            arrays[k] -= step_size * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)

    def reset(self, key) -> None:
        self.m.pop(key, None)
        self.v.pop(key, None)

    def state_arrays(self) -> dict:
        out = {"adam_t": np.array(self.t)}
        for k in self.m:
            out[f"adam_m_{k}"] = self.m[k]
            out[f"adam_v_{k}"] = self.v[k]
        return out

    def load_state_arrays(self, data) -> None:
        self.t = int(data["adam_t"])
        self.m, self.v = {}, {}
        for name in data:
            if name.startswith("adam_m_"):
                k = name[len("adam_m_"):]
                self.m[k] = np.array(data[name], dtype=np.float64)
                self.v[k] = np.array(data[f"adam_v_{k}"], dtype=np.float64)


@dataclass(frozen=True)
class RefineReport:
    initial_loss: float
    final_loss: float
    steps_taken: int


def residual_objective(pred, residual_target, prev_img, target_image) -> tuple[float, np.ndarray]:
    """0.7 L1(pred, residual) + 0.3 (1 - SSIM(prev + pred, target)) and its
    gradient w.r.t. pred. SSIM is taken on the accumulated render."""
    l1, g_l1 = l1_with_grad(pred, residual_target)
    s, g_s = ssim_with_grad(prev_img + pred, target_image)
    total = params.l1_weight * l1 + params.ssim_weight * (1.0 - s)
    return total, params.l1_weight * g_l1 - params.ssim_weight * g_s


def refine_increment(delta: GaussianSet, residual_target: ImageBuffer, accumulated_prev,
                     target_image: ImageBuffer, K: int,
                     cfg: RefineConfig = RefineConfig()) -> tuple[GaussianSet, RefineReport]:
    """Refine a detached copy of an increment for K steps while previous-stage
    Gaussians stay fixed. Count and order of primitives are preserved."""
    if K < 1:
        raise InvalidParameterError(f"refinement needs K >= 1, got {K}")
    if delta.count == 0:
        raise InvalidParameterError("refinement needs a non-empty increment")
    residual_target = check_image(residual_target, "residual_target")
    target_image = check_image(target_image, "target_image")
    check_same_shape(residual_target, target_image)
    height, width = target_image.shape[:2]
    if isinstance(accumulated_prev, GaussianSet):
        prev_img = render(accumulated_prev, width, height, cfg.render)
    else:
        prev_img = check_image(accumulated_prev, "accumulated_prev").copy()
        check_same_shape(prev_img, target_image)

    copy = delta.replace()
    state = AdamState.for_set(copy, (width, height), cfg.lr, cfg.method, cfg.gd_lr)
    initial = None
    for _ in range(K):
        pred = render(copy, width, height, cfg.render)
        loss, d_img = residual_objective(pred, residual_target, prev_img, target_image)
        if not math.isfinite(loss):
            raise NumericalError(f"refinement loss diverged at step {state.step}")
        if initial is None:
            initial = loss
        copy, state = adam_step(copy, render_backward(copy, d_img, cfg.render), state)
    final, _ = residual_objective(render(copy, width, height, cfg.render), residual_target, prev_img, target_image)
    log.debug(f"refine {delta.count=} {K=} {initial=:.5f} {final=:.5f}")
    return copy, RefineReport(initial_loss=initial, final_loss=final, steps_taken=K)


@dataclass
class FitResult:
    gaussians: GaussianSet
    curve: list = field(default_factory=list)

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.curve, columns=CURVE_COLUMNS)


def init_from_target(target: ImageBuffer, n: int, seed: int = params.default_seed) -> GaussianSet:
    """Random centers, isotropic sigma so n disks tile the canvas, colors
    sampled bilinearly from the target and scaled for the expected overlap."""
    height, width = target.shape[:2]
    rng = named_rng(seed, "fit-init", n)
    mu = rng.uniform(0.0, 1.0, size=(n, 2)) * np.array([width, height])
    sigma = math.sqrt(width * height / (math.pi * n))
    coords = [mu[:, 1] - 0.5, mu[:, 0] - 0.5]
    color = np.stack([map_coordinates(target[:, :, ch], coords, order=1, mode="nearest") for ch in range(3)], axis=1)
    coverage = n * 2.0 * math.pi * sigma * sigma / (width * height)
    return GaussianSet(
        mu=mu,
        log_scale=np.full((n, 2), math.log(sigma)),
        theta=np.zeros(n),
        color=color / coverage,
    )


def fit_from_scratch(target: ImageBuffer, n_gaussians: int, iterations: int,
                     seed: int = params.default_seed, lr: LearningRates = LearningRates(),
                     render_cfg: RenderConfig = DEFAULT_RENDER) -> FitResult:
    """Pure-optimization baseline: Adam on the render loss from a random init."""
    if n_gaussians < 1:
        raise InvalidParameterError(f"need at least one Gaussian, got {n_gaussians}")
    target = check_image(target, "target")
    height, width = target.shape[:2]
    gset = init_from_target(target, n_gaussians, seed)
    result = FitResult(gset)
    state = AdamState.for_set(gset, (width, height), lr)
    for it in tqdm(range(iterations), desc="fit", disable=None, leave=False):
        pred = render(gset, width, height, render_cfg)
        loss, d_img = loss_render_with_grad(pred, target)
        if not math.isfinite(loss.total):
            raise NumericalError(f"fit diverged at iteration {it}")
        result.curve.append({"iteration": it, "l1": loss.l1, "ssim_term": loss.ssim_term,
                             "total": loss.total, "psnr": psnr(pred, target)})
        gset, state = adam_step(gset, render_backward(gset, d_img, render_cfg), state)
    result.gaussians = gset
    if result.curve:
        log.info(f"fit {n_gaussians=} {iterations=} final psnr={psnr(render(gset, width, height, render_cfg), target):.2f}")
    return result


def write_loss_curve(path, rows) -> None:
    pd.DataFrame(rows, columns=CURVE_COLUMNS).to_csv(path, index=False)
