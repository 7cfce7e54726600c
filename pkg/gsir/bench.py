"""Desk-scale ablation suites. Each suite writes a CSV table and, for curves, a
gnuplot-ready .dat file (whitespace separated, '#' header) plus a PNG plot."""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from gsir import params
from gsir.encoder import quantize_set
from gsir.errors import EmptyCorpusError, InvalidParameterError
from gsir.metrics import ms_ssim, psnr
from gsir.optim import RefineConfig, fit_from_scratch, write_loss_curve
from gsir.quant import RangeStrategy, default_global_base, derive_ranges, fit_global_base
from gsir.render import render
from gsir.reports import BenchReport
from gsir.rng import named_rng
from gsir.stagewise.config import PODConfig, StageControlConfig
from gsir.stagewise.pipeline import activated_counts, run_pipeline, stage_stats
from gsir.stagewise.predictor import HeuristicPredictor, TinyLinearPredictor
from gsir.stagewise.training import direct_train, pod_train

log = logging.getLogger(__name__)

SUITES = ("stagewise-vs-oneshot", "thresholds", "quant-variants", "pod-vs-direct", "fit-baseline")


class BenchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    patch_size: int = Field(default=params.patch_size, ge=2)
    n_stages: int = Field(default=params.n_stages, ge=1, le=params.max_stages)
    refine_steps: int = Field(default=params.refine_steps, ge=0)
    train_steps: int = Field(default=params.pod_steps, ge=0)
    fit_gaussians: int = Field(default=500, ge=1)
    fit_iterations: int = Field(default=2000, ge=0)
    seed: int = params.default_seed

    @property
    def control(self) -> StageControlConfig:
        return StageControlConfig(patch_size=self.patch_size, n_stages=self.n_stages)

    @property
    def refine(self) -> RefineConfig | None:
        return RefineConfig(steps=self.refine_steps) if self.refine_steps else None


def write_dat(frame: pd.DataFrame, path) -> None:
    with open(path, "w") as f:
        f.write("# " + " ".join(frame.columns) + "\n")
        frame.to_csv(f, sep=" ", index=False, header=False, na_rep="nan")


def plot_curves(curves: dict, column: str, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, frame in curves.items():
        ax.plot(frame["step"], frame[column], label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(column)
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def stagewise_vs_oneshot(corpus, cfg: BenchConfig) -> pd.DataFrame:
    """Progressive S-stage reconstruction against a single stage given the same
    total refinement budget."""
    rows = []
    oneshot = cfg.control.model_copy(update={"n_stages": 1})
    oneshot_refine = RefineConfig(steps=cfg.refine_steps * cfg.n_stages) if cfg.refine_steps else None
    for k, target in enumerate(corpus):
        model = HeuristicPredictor(cfg.patch_size)
        for mode, control, refine in (("progressive", cfg.control, cfg.refine), ("one-shot", oneshot, oneshot_refine)):
            state = run_pipeline(target, model, control, refine)
            for s in stage_stats(state, control):
                rows.append({"image": k, "mode": mode, "stage": s.stage, "count": s.count,
                             "cumulative": s.cumulative, "utilization": s.utilization,
                             "psnr": s.psnr, "ms_ssim": s.ms_ssim})
    return pd.DataFrame(rows)


def thresholds(corpus, cfg: BenchConfig) -> pd.DataFrame:
    """Activation under each (tau_psnr, tau_ssim). `activated` is measured on
    the quality maps of one reference run, so it isolates the thresholds;
    the full run under each setting is reported alongside."""
    grid = list(params.bench_tau_grid) + [(0.0, 0.0)]
    rows = []
    for k, target in enumerate(corpus):
        model = HeuristicPredictor(cfg.patch_size)
        reference = run_pipeline(target, model, cfg.control, cfg.refine)
        later_maps = list(reference.maps[1:])
        for tau_psnr, tau_ssim in grid:
            control = cfg.control.model_copy(update={"tau_psnr": tau_psnr, "tau_ssim": tau_ssim})
            state = run_pipeline(target, model, control, cfg.refine)
            stats = stage_stats(state, control)
            rows.append({
                "image": k,
                "tau_psnr": tau_psnr,
                "tau_ssim": tau_ssim,
                "activated": int(sum(activated_counts(later_maps, control))),
                "later_stage_count": int(sum(s.count for s in stats[1:])),
                "count": state.gaussians.count,
                "utilization": stats[-1].utilization,
                "psnr": stats[-1].psnr,
            })
    return pd.DataFrame(rows)


def quant_variants(corpus, cfg: BenchConfig) -> pd.DataFrame:
    """The same final sets under no quantization, per-image ranges, a global
    range learned over the corpus, and adaptive ranges on that base."""
    states = [run_pipeline(t, HeuristicPredictor(cfg.patch_size), cfg.control, cfg.refine) for t in corpus]
    canvases = [(s.width, s.height) for s in states]
    learned = fit_global_base([s.gaussians for s in states], canvases)
    base16 = default_global_base().with_bits(16)
    rows = []
    for k, (state, canvas) in enumerate(zip(states, canvases)):
        final = state.gaussians
        variants = {
            "raw": None,
            "per_image": derive_ranges(final, RangeStrategy.PER_IMAGE, learned, canvas),
            "global": derive_ranges(final, RangeStrategy.GLOBAL, learned, canvas),
            "adaptive": derive_ranges(final, RangeStrategy.ADAPTIVE, learned, canvas),
            "per_image_16bit": derive_ranges(final, RangeStrategy.PER_IMAGE, base16, canvas),
        } if final.count else {"raw": None}
        for name, spec in variants.items():
            gset = final if spec is None else quantize_set(final, spec, canvas)
            recon = render(gset, state.width, state.height)
            rows.append({
                "image": k,
                "variant": name,
                "count": final.count,
                "bits_per_primitive": 8 * 64 if spec is None else spec.bits_per_primitive,
                "psnr": psnr(recon, state.target),
                "ms_ssim": ms_ssim(recon, state.target),
            })
    return pd.DataFrame(rows)


def pod_vs_direct(corpus, cfg: BenchConfig, steps: int | None = None) -> dict:
    """Train the tiny predictor twice from the same initialization: with POD
    and with the direct residual render loss."""
    steps = cfg.train_steps if steps is None else steps
    control = StageControlConfig(patch_size=cfg.patch_size, n_stages=min(cfg.n_stages, 2))
    pod = PODConfig(steps=steps, K=cfg.refine_steps, seed=cfg.seed,
                    milestones=(0, steps // 2))
    curves = {}
    for mode, train in (("pod", pod_train), ("direct", direct_train)):
        model = TinyLinearPredictor.initialize(cfg.patch_size, control.n_stages, named_rng(cfg.seed, "tiny-init"))
        curves[mode] = train(model, corpus, pod, control).log
    return curves


def fit_baseline(corpus, cfg: BenchConfig) -> tuple[pd.DataFrame, dict]:
    rows, curves = [], {}
    for k, target in enumerate(corpus):
        result = fit_from_scratch(target, cfg.fit_gaussians, cfg.fit_iterations, seed=cfg.seed)
        final = render(result.gaussians, target.shape[1], target.shape[0])
        rows.append({"image": k, "n_gaussians": cfg.fit_gaussians, "iterations": cfg.fit_iterations,
                     "psnr": psnr(final, target), "ms_ssim": ms_ssim(final, target)})
        curves[k] = result.curve
    return pd.DataFrame(rows), curves


def run_suite(suite: str, corpus, out_dir, cfg: BenchConfig = BenchConfig()) -> BenchReport:
    if suite not in SUITES:
        raise InvalidParameterError(f"unknown suite {suite!r}, expected one of {SUITES}")
    if not corpus:
        raise EmptyCorpusError(f"suite {suite} needs a non-empty corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = suite.replace("-", "_")
    tables, extra = [], []

    if suite == "pod-vs-direct":
        curves = pod_vs_direct(corpus, cfg)
        for mode, frame in curves.items():
            path = out_dir / f"{stem}_{mode}.csv"
            frame.to_csv(path, index=False)
            write_dat(frame, path.with_suffix(".dat"))
            tables.append(str(path))
            extra.append(str(path.with_suffix(".dat")))
        plot = out_dir / f"{stem}.png"
        plot_curves({m: f[np.isfinite(f["total"])] for m, f in curves.items()}, "total", plot)
        extra.append(str(plot))
    elif suite == "fit-baseline":
        table, curves = fit_baseline(corpus, cfg)
        for k, rows in curves.items():
            path = out_dir / f"{stem}_curve_{k:03d}.csv"
            write_loss_curve(path, rows)
            extra.append(str(path))
        path = out_dir / f"{stem}.csv"
        table.to_csv(path, index=False)
        tables.append(str(path))
    else:
        table = {"stagewise-vs-oneshot": stagewise_vs_oneshot,
                 "thresholds": thresholds,
                 "quant-variants": quant_variants}[suite](corpus, cfg)
        path = out_dir / f"{stem}.csv"
        table.to_csv(path, index=False)
        write_dat(table.select_dtypes(include="number"), path.with_suffix(".dat"))
        tables.append(str(path))
        extra.append(str(path.with_suffix(".dat")))
    log.info(f"bench {suite} on {len(corpus)} images -> {out_dir}")
    return BenchReport(suite=suite, images=len(corpus), tables=tables, curves=extra)
