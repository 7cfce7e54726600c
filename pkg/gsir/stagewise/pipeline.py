"""Stage-wise residual reconstruction.

Stage i looks at the previous render I_{i-1}, activates the patch tokens that
fail the fidelity target, predicts one primitive per active token from the
residual E_{i-1} = I_gt - I_{i-1}, and accumulates:

    G_i = G_{i-1} U dG_i
    I_i = I_{i-1} + R(dG_i)
    E_i = I_gt - I_i
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from gsir.core import GaussianSet, ImageBuffer, check_image, merge_sets, zeros_image
from gsir.errors import StageBudgetError
from gsir.metrics import QualityMaps, ms_ssim, psnr, quality_maps
from gsir.optim import RefineConfig, refine_increment
from gsir.render import DEFAULT_RENDER, RenderConfig, render
from gsir.stagewise.config import StageControlConfig
from gsir.stagewise.control import compute_stage_mask, utilization
from gsir.stagewise.predictor import PredictorModel, predict_increment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StagePipelineState:
    target: ImageBuffer
    stage: int
    gaussians: GaussianSet
    render: ImageBuffer
    residual: ImageBuffer
    increments: tuple = ()
    maps: tuple = ()
    masks: tuple = ()
    prefix_renders: tuple = ()
    refine_reports: tuple = ()

    @property
    def height(self) -> int:
        return self.target.shape[0]

    @property
    def width(self) -> int:
        return self.target.shape[1]


def init_state(target: ImageBuffer) -> StagePipelineState:
    """Stage 0: G_0 empty, I_0 = 0, E_0 = I_gt."""
    target = check_image(target, "target")
    height, width = target.shape[:2]
    return StagePipelineState(
        target=target,
        stage=0,
        gaussians=GaussianSet.empty(),
        render=zeros_image(width, height),
        residual=target.copy(),
    )


def run_stage(state: StagePipelineState, model: PredictorModel, control: StageControlConfig,
              refine: RefineConfig | None = None,
              render_cfg: RenderConfig = DEFAULT_RENDER) -> StagePipelineState:
    i = state.stage + 1
    if i > control.n_stages:
        raise StageBudgetError(f"stage {i} exceeds the budget of {control.n_stages} stages")
    maps = quality_maps(state.target, state.render, control.patch_size)
    mask = compute_stage_mask(maps, control, stage=i, image_shape=(state.height, state.width))
    delta = predict_increment(model, state.residual, mask)

    report = None
    if refine is not None and refine.steps > 0 and delta.count:
        delta, report = refine_increment(delta, state.residual, state.render, state.target,
                                         refine.steps, refine.model_copy(update={"render": render_cfg}))

    if delta.count:
        current = state.render + render(delta, state.width, state.height, render_cfg)
    else:
        current = state.render.copy()
    log.info(f"stage {i}: activated={mask.count} of {mask.grid.size} tokens, total={state.gaussians.count + delta.count}")
    return replace(
        state,
        stage=i,
        gaussians=merge_sets(state.gaussians, delta),
        render=current,
        residual=state.target - current,
        increments=state.increments + (delta,),
        maps=state.maps + (maps,),
        masks=state.masks + (mask,),
        prefix_renders=state.prefix_renders + (current,),
        refine_reports=state.refine_reports + (report,),
    )


def run_pipeline(target: ImageBuffer, model: PredictorModel, control: StageControlConfig,
                 refine: RefineConfig | None = None,
                 render_cfg: RenderConfig = DEFAULT_RENDER) -> StagePipelineState:
    state = init_state(target)
    for _ in range(control.n_stages):
        state = run_stage(state, model, control, refine, render_cfg)
    return state


def prefix_render(gset: GaussianSet, stage: int, width: int, height: int,
                  render_cfg: RenderConfig = DEFAULT_RENDER) -> ImageBuffer:
    """Full re-render of G_i from stage tags."""
    return render(gset.prefix(stage), width, height, render_cfg)


@dataclass(frozen=True)
class StageStats:
    stage: int
    count: int
    cumulative: int
    utilization: float
    psnr: float
    ms_ssim: float


def stage_stats(state: StagePipelineState, control: StageControlConfig) -> list[StageStats]:
    out = []
    cumulative = 0
    for i, (delta, current) in enumerate(zip(state.increments, state.prefix_renders), start=1):
        cumulative += delta.count
        out.append(StageStats(
            stage=i,
            count=delta.count,
            cumulative=cumulative,
            utilization=utilization(cumulative, state.height, state.width, control),
            psnr=psnr(current, state.target),
            ms_ssim=ms_ssim(current, state.target),
        ))
    return out


def max_prefix_drift(state: StagePipelineState, render_cfg: RenderConfig = DEFAULT_RENDER) -> float:
    """Largest |I_i - R(G_i)| over all stages: incremental vs full re-render."""
    drift = 0.0
    for i, current in enumerate(state.prefix_renders, start=1):
        full = prefix_render(state.gaussians, i, state.width, state.height, render_cfg)
        drift = max(drift, float(np.max(np.abs(current - full))) if current.size else 0.0)
    return drift


def activated_counts(maps: list[QualityMaps], control: StageControlConfig) -> list[int]:
    return [compute_stage_mask(m, control).count for m in maps]
