"""Training the TINY_LINEAR predictor.

pod_train      predict, refine a detached copy for K steps, regress the
               prediction onto the refined copy in Gaussian space
finetune_train render loss over every accumulated prefix, back through the
               residual inputs of later stages; optionally quantization-aware
direct_train   the residual render loss on each stage's own increment, the
               unstable baseline POD is compared against

Every step draws its image from named_rng(seed, mode, step), so a run resumed
from a checkpoint replays the exact continuation.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from gsir import params
from gsir.core import GaussianSet, ImageBuffer, check_image, merge_sets, zeros_image
from gsir.errors import EmptyCorpusError, InvalidParameterError, NumericalError, ShapeMismatchError
from gsir.metrics import grid_shape, loss_render, loss_render_with_grad, psnr, quality_maps
from gsir.optim import Adam, refine_increment, residual_objective
from gsir.quant import RangeStrategy, default_global_base, derive_ranges, loss_q
from gsir.render import DEFAULT_RENDER, GaussianGrads, RenderConfig, render, render_backward
from gsir.rng import named_rng
from gsir.stagewise.config import DistillWeights, FinetuneConfig, PODConfig, StageControlConfig, stage_weights
from gsir.stagewise.control import StageMask, compute_stage_mask
from gsir.stagewise.pipeline import run_pipeline
from gsir.stagewise.predictor import TinyLinearPredictor, TokenBatch, token_batch, untoken

log = logging.getLogger(__name__)

POD_COLUMNS = ["step", "stages", "count", "distill_loss", "render_loss", "refine_final", "total"]
DIRECT_COLUMNS = ["step", "stages", "count", "render_loss", "total"]


def finetune_columns(n_stages: int) -> list[str]:
    return (["step", "stages", "count", "ft_loss", "final_render_loss", "quant_loss", "total"]
            + [f"psnr_{i}" for i in range(1, n_stages + 1)])


def angular_distance(a, b):
    """min(|d|, pi - |d|) for canonical angles: ellipses repeat every pi."""
    d = np.abs(np.mod(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), math.pi))
    return np.minimum(d, math.pi - d)


def _wrapped(delta):
    # signed difference on the branch [-pi/2, pi/2)
    return np.mod(delta + math.pi / 2, math.pi) - math.pi / 2


def gaussian_distill_loss(pred: GaussianSet, target: GaussianSet, weights: DistillWeights = DistillWeights(),
                          with_grad: bool = False, reduction: str = params.distill_reduction):
    """Mean (or sum) over index-aligned primitives of the weighted squared
    distances (mu in px, log-scale, theta on the angular metric, color). The
    target is a constant. Returns the loss, or (loss, GaussianGrads w.r.t. pred)."""
    if reduction not in ("mean", "sum"):
        raise InvalidParameterError(f"unknown distill reduction {reduction!r}")
    if pred.count != target.count:
        raise ShapeMismatchError(f"distill needs aligned sets, got {pred.count} and {target.count}")
    n = pred.count
    if n == 0:
        return (0.0, GaussianGrads.zeros(0)) if with_grad else 0.0
    d_mu = pred.mu - target.mu
    d_ls = pred.log_scale - target.log_scale
    d_theta = _wrapped(pred.theta - target.theta)
    d_color = pred.color - target.color
    per = (weights.mu * (d_mu * d_mu).sum(axis=1)
           + weights.log_scale * (d_ls * d_ls).sum(axis=1)
           + weights.theta * d_theta * d_theta
           + weights.color * (d_color * d_color).sum(axis=1))
    norm = n if reduction == "mean" else 1
    loss = float(per.sum() / norm)
    if not with_grad:
        return loss
    k = 2.0 / norm
    return loss, GaussianGrads(
        d_mu=k * weights.mu * d_mu,
        d_log_scale=k * weights.log_scale * d_ls,
        d_theta=k * weights.theta * d_theta,
        d_color=k * weights.color * d_color,
    )


def _weight_grad(model: TinyLinearPredictor, raw, batch: TokenBatch, grads: GaussianGrads) -> tuple[np.ndarray, np.ndarray]:
    """(dL/dW_stage, dL/draw) from gradients on the decoded primitives."""
    d_raw = model.decode_backward(raw, grads.d_mu, grads.d_log_scale, grads.d_theta, grads.d_color)
    return d_raw.T @ batch.features, d_raw


def _decoded(model: TinyLinearPredictor, batch: TokenBatch, stage: int):
    raw = model.raw(batch, stage)
    if not np.all(np.isfinite(raw)):
        raise NumericalError(f"stage {stage} predictor produced non-finite outputs")
    return raw, model.decode(raw, batch, stage)


def _key(stage: int) -> str:
    return f"stage{stage}"


def active_stages(step: int, milestones, n_stages: int) -> int:
    return max(1, sum(1 for m in milestones[:n_stages] if m <= step))


@dataclass
class TrainState:
    optimizer: Adam
    step: int = 0
    active: int = 0


@dataclass
class TrainResult:
    model: TinyLinearPredictor
    state: TrainState
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=list)

    @property
    def log(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)


def _check_inputs(model, corpus, control: StageControlConfig) -> list[ImageBuffer]:
    if not corpus:
        raise EmptyCorpusError("training needs at least one image")
    if not isinstance(model, TinyLinearPredictor):
        raise InvalidParameterError(f"only the tiny linear predictor is trainable, got {type(model).__name__}")
    if model.patch_size != control.patch_size:
        raise ShapeMismatchError(f"model patch size {model.patch_size} != control patch size {control.patch_size}")
    if model.n_stages < control.n_stages:
        raise ShapeMismatchError(f"model has {model.n_stages} stages, control asks for {control.n_stages}")
    return [check_image(img, "corpus image") for img in corpus]


def _activate(model: TinyLinearPredictor, state: TrainState, n_active: int) -> None:
    """New stages start from a copy of the previous stage's weights."""
    while state.active < n_active:
        state.active += 1
        i = state.active
        if i > 1:
            model.weights[i - 1] = model.weights[i - 2].copy()
            state.optimizer.reset(_key(i))
            log.info(f"activated stage {i} at step {state.step}")


def _loop(mode: str, model: TinyLinearPredictor, corpus, steps: int, seed: int, state: TrainState, step_fn,
          columns, checkpoint_path=None, checkpoint_every: int = 0, schedule=None,
          stop_on_divergence: bool = False) -> TrainResult:
    result = TrainResult(model, state, columns=columns)
    for t in tqdm(range(state.step, steps), desc=mode, disable=None, leave=False):
        state.step = t
        if schedule is not None:
            _activate(model, state, schedule(t))
        rng = named_rng(seed, mode, t)
        target = corpus[int(rng.integers(len(corpus)))]
        try:
            row, grads = step_fn(target, state.active)
            if not math.isfinite(row["total"]):
                raise NumericalError(f"{mode} loss is {row['total']} at step {t}")
            state.optimizer.step({_key(i): model.weights[i - 1] for i in grads},
                                 {_key(i): g for i, g in grads.items()})
            if not all(np.all(np.isfinite(model.weights[i - 1])) for i in grads):
                raise NumericalError(f"{mode} weights diverged at step {t}")
        except NumericalError as e:
            if not stop_on_divergence:
                raise
            log.warning(f"{mode} stopped: {e}")
            result.rows.append({"step": t, "stages": state.active, "total": math.nan})
            break
        result.rows.append({"step": t, "stages": state.active, **row})
        state.step = t + 1
        if checkpoint_path is not None and checkpoint_every and state.step % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, state, mode)
        if t % 100 == 0:
            log.debug(f"{mode} step={t} total={row['total']:.5f}")
    else:
        state.step = max(state.step, steps)
    return result


def _mask(target, prev, control: StageControlConfig, stage: int, disabled=()) -> StageMask:
    h, w = target.shape[:2]
    if stage in disabled:
        return StageMask.full(grid_shape(h, w, control.patch_size), stage, False)
    return compute_stage_mask(quality_maps(target, prev, control.patch_size), control, stage=stage)


def pod_step(model: TinyLinearPredictor, target: ImageBuffer, cfg: PODConfig, control: StageControlConfig,
             n_active: int, render_cfg: RenderConfig = DEFAULT_RENDER) -> tuple[dict, dict]:
    """One Predict-Optimize-Distill step on one image. Returns the log row and
    the per-stage weight gradients of L_POD."""
    h, w = target.shape[:2]
    lam = stage_weights(cfg.stage_weights, control.n_stages)
    refine_cfg = cfg.refine.model_copy(update={"render": render_cfg})
    prev = zeros_image(w, h)
    grads, refine_final = {}, []
    distill, weight, total, count = 0.0, 0.0, 0.0, 0
    for i in range(1, n_active + 1):
        residual = target - prev
        batch = token_batch(residual, _mask(target, prev, control, i), control.patch_size)
        grads[i] = np.zeros_like(model.weights[i - 1])
        if batch.active.size == 0:
            continue
        raw, pred = _decoded(model, batch, i)
        if cfg.K > 0:
            refined, report = refine_increment(pred, residual, prev, target, cfg.K, refine_cfg)
            refine_final.append(report.final_loss)
        else:
            refined = pred
        loss_i, d_pred = gaussian_distill_loss(pred, refined, cfg.attr_weights, with_grad=True,
                                               reduction=cfg.distill_reduction)
        scale = cfg.distill_weight * lam[i - 1]
        grads[i], _ = _weight_grad(model, raw, batch, d_pred.scaled(scale))
        distill += lam[i - 1] * loss_i
        weight += lam[i - 1]
        total += scale * loss_i
        count += pred.count
        # the next stage sees the residual left by the prediction
        prev = prev + render(pred, w, h, render_cfg)
    row = {
        "count": count,
        # stage-weighted average, so activating a stage does not step the curve
        "distill_loss": distill / weight if weight else 0.0,
        "render_loss": loss_render(prev, target).total,
        "refine_final": float(np.mean(refine_final)) if refine_final else math.nan,
        "total": total,
    }
    return row, grads


def pod_train(model: TinyLinearPredictor, corpus, cfg: PODConfig, control: StageControlConfig,
              resume: TrainState | None = None, checkpoint_path=None,
              render_cfg: RenderConfig = DEFAULT_RENDER) -> TrainResult:
    corpus = _check_inputs(model, corpus, control)
    state = resume or TrainState(Adam(cfg.lr, cfg.weight_decay))
    log.info(f"pod {cfg.steps=} {cfg.K=} stages={control.n_stages} corpus={len(corpus)} start={state.step}")
    return _loop("pod", model, corpus, cfg.steps, cfg.seed, state,
                 lambda target, n: pod_step(model, target, cfg, control, n, render_cfg),
                 POD_COLUMNS, checkpoint_path, cfg.checkpoint_every,
                 schedule=lambda t: active_stages(t, cfg.milestones, control.n_stages))


@dataclass
class FinetuneStep:
    loss: float
    prefix_losses: list
    prefix_psnr: list
    quant_loss: float
    count: int
    grads: dict


def finetune_gradients(model: TinyLinearPredictor, target: ImageBuffer, cfg: FinetuneConfig,
                       control: StageControlConfig, disabled_stages=(),
                       render_cfg: RenderConfig = DEFAULT_RENDER) -> FinetuneStep:
    """L_ft = sum_i lambda_i L_render(I_i, I_gt) over all S prefixes, plus L_q on
    G_S when quantization-aware, and its gradient for every stage's weights.

    Masks are constants. A stage's primitives receive the gradient of every
    prefix they appear in; with through_residual the chain also runs through
    E_{i-1} = I_gt - I_{i-1}, the input of stage i.
    """
    h, w = target.shape[:2]
    p = control.patch_size
    n_stages = control.n_stages
    lam = stage_weights(cfg.stage_weights, n_stages)

    prev = zeros_image(w, h)
    stages, d_prefix = [], []
    loss, prefix_losses, prefix_psnr = 0.0, [], []
    for i in range(1, n_stages + 1):
        batch = token_batch(target - prev, _mask(target, prev, control, i, disabled_stages), p)
        if batch.active.size:
            raw, pred = _decoded(model, batch, i)
            current = prev + render(pred, w, h, render_cfg)
        else:
            raw, pred, current = None, GaussianSet.empty(), prev
        stages.append((batch, raw, pred))
        breakdown, d_img = loss_render_with_grad(current, target)
        loss += lam[i - 1] * breakdown.total
        d_prefix.append(lam[i - 1] * d_img)
        prefix_losses.append(breakdown.total)
        prefix_psnr.append(psnr(current, target))
        prev = current

    quant_grads = None
    quant_loss = 0.0
    final = GaussianSet.empty()
    for _, _, pred in stages:
        final = merge_sets(final, pred)
    if cfg.quant_aware and final.count:
        base = default_global_base()
        spec = derive_ranges(final, RangeStrategy(cfg.quant_strategy), base, (w, h))
        lq, quant_grads = loss_q(final, spec, target, cfg.gamma, render_cfg, with_grad=True)
        quant_loss = lq.total
        loss += quant_loss

    grads = {}
    offsets = np.cumsum([0] + [pred.count for _, _, pred in stages])
    carry = np.zeros_like(target)
    for i in range(n_stages, 0, -1):
        batch, raw, pred = stages[i - 1]
        adjoint = d_prefix[i - 1] + carry
        grads[i] = np.zeros_like(model.weights[i - 1])
        carry = adjoint
        if pred.count == 0:
            continue
        d_pred = render_backward(pred, adjoint, render_cfg)
        if quant_grads is not None:
            d_pred = d_pred + quant_grads.slice(offsets[i - 1], offsets[i])
        grads[i], d_raw = _weight_grad(model, raw, batch, d_pred)
        if cfg.through_residual:
            carry = adjoint - _residual_grad(model, d_raw, batch, i, target.shape)
    return FinetuneStep(loss, prefix_losses, prefix_psnr, quant_loss, final.count, grads)


def _residual_grad(model: TinyLinearPredictor, d_raw, batch: TokenBatch, stage: int, shape) -> np.ndarray:
    """dL/dE from dL/draw through the linear map (bias column dropped)."""
    p = model.patch_size
    h, w = shape[:2]
    gh, gw = batch.grid
    d_features = d_raw @ model.weights[stage - 1]
    tokens = np.zeros((gh * gw, p * p * 3))
    tokens[batch.active] = d_features[:, :-1]
    return untoken(tokens.reshape(gh, gw, p, p, 3), h, w)


def finetune_train(model: TinyLinearPredictor, corpus, cfg: FinetuneConfig, control: StageControlConfig,
                   resume: TrainState | None = None, checkpoint_path=None,
                   render_cfg: RenderConfig = DEFAULT_RENDER) -> TrainResult:
    corpus = _check_inputs(model, corpus, control)
    state = resume or TrainState(Adam(cfg.lr, cfg.weight_decay), active=control.n_stages)
    state.active = control.n_stages

    def step(target, _):
        out = finetune_gradients(model, target, cfg, control, render_cfg=render_cfg)
        row = {"count": out.count, "ft_loss": out.loss - out.quant_loss,
               "final_render_loss": out.prefix_losses[-1], "quant_loss": out.quant_loss, "total": out.loss}
        row.update({f"psnr_{i}": v for i, v in enumerate(out.prefix_psnr, start=1)})
        return row, out.grads

    log.info(f"finetune {cfg.steps=} quant_aware={cfg.quant_aware} stages={control.n_stages} corpus={len(corpus)}")
    return _loop("finetune", model, corpus, cfg.steps, cfg.seed, state, step,
                 finetune_columns(control.n_stages), checkpoint_path, cfg.checkpoint_every)


def direct_step(model: TinyLinearPredictor, target: ImageBuffer, control: StageControlConfig, n_active: int,
                lam, render_cfg: RenderConfig = DEFAULT_RENDER) -> tuple[dict, dict]:
    h, w = target.shape[:2]
    prev = zeros_image(w, h)
    grads, total, count = {}, 0.0, 0
    for i in range(1, n_active + 1):
        residual = target - prev
        batch = token_batch(residual, _mask(target, prev, control, i), control.patch_size)
        grads[i] = np.zeros_like(model.weights[i - 1])
        if batch.active.size == 0:
            continue
        raw, pred = _decoded(model, batch, i)
        rendered = render(pred, w, h, render_cfg)
        loss_i, d_img = residual_objective(rendered, residual, prev, target)
        d_pred = render_backward(pred, lam[i - 1] * d_img, render_cfg)
        grads[i], _ = _weight_grad(model, raw, batch, d_pred)
        total += lam[i - 1] * loss_i
        count += pred.count
        prev = prev + rendered
    return {"count": count, "render_loss": loss_render(prev, target).total, "total": total}, grads


def direct_train(model: TinyLinearPredictor, corpus, cfg: PODConfig, control: StageControlConfig,
                 render_cfg: RenderConfig = DEFAULT_RENDER) -> TrainResult:
    """Same schedule and optimizer as pod_train, supervised directly by the
    residual render loss. Stops at the first non-finite loss instead of raising."""
    corpus = _check_inputs(model, corpus, control)
    lam = stage_weights(cfg.stage_weights, control.n_stages)
    state = TrainState(Adam(cfg.lr, cfg.weight_decay))
    return _loop("direct", model, corpus, cfg.steps, cfg.seed, state,
                 lambda target, n: direct_step(model, target, control, n, lam, render_cfg),
                 DIRECT_COLUMNS, schedule=lambda t: active_stages(t, cfg.milestones, control.n_stages),
                 stop_on_divergence=True)


def evaluate_prefix_losses(model, corpus, control: StageControlConfig,
                           render_cfg: RenderConfig = DEFAULT_RENDER) -> np.ndarray:
    """images x stages table of L_render(I_i, I_gt), predictions only."""
    out = np.zeros((len(corpus), control.n_stages))
    for k, target in enumerate(corpus):
        state = run_pipeline(target, model, control, render_cfg=render_cfg)
        out[k] = [loss_render(current, state.target).total for current in state.prefix_renders]
    return out


def save_checkpoint(path, model: TinyLinearPredictor, state: TrainState, mode: str) -> None:
    arrays = {f"w{i}": w for i, w in enumerate(model.weights, start=1)}
    with open(path, "wb") as f:
        np.savez(f, mode=np.array(mode), step=np.array(state.step), active=np.array(state.active),
                 patch_size=np.array(model.patch_size), n_stages=np.array(model.n_stages),
                 lr=np.array(state.optimizer.lr), weight_decay=np.array(state.optimizer.weight_decay),
                 **arrays, **state.optimizer.state_arrays())
    log.info(f"checkpoint {path} step={state.step}")


def load_checkpoint(path) -> tuple[TinyLinearPredictor, TrainState, str]:
    with np.load(path) as data:
        n_stages = int(data["n_stages"])
        model = TinyLinearPredictor([np.array(data[f"w{i}"]) for i in range(1, n_stages + 1)],
                                    int(data["patch_size"]))
        optimizer = Adam(float(data["lr"]), float(data["weight_decay"]))
        optimizer.load_state_arrays({k: data[k] for k in data.files if k.startswith("adam_")})
        state = TrainState(optimizer, step=int(data["step"]), active=int(data["active"]))
        return model, state, str(data["mode"])
