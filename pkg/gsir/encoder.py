"""Encode an image into a .gsir stream and back: the stage-wise pipeline,
range derivation, quantization and the container, end to end."""

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator

from gsir import params
from gsir.bitstream import StreamMeta, decode_bitstream, encode_bitstream
from gsir.core import GaussianSet, ImageBuffer
from gsir.errors import InvalidParameterError
from gsir.imageio import read_image, write_pgm, write_png
from gsir.metrics import ms_ssim, psnr
from gsir.optim import RefineConfig
from gsir.quant import QuantSpec, RangeStrategy, default_global_base, derive_ranges, dequantize, quantize
from gsir.render import DEFAULT_RENDER, RenderConfig, render
from gsir.reports import DecodeReport, EncodeReport, StageReport
from gsir.stagewise.config import StageControlConfig
from gsir.stagewise.control import candidate_capacity
from gsir.stagewise.density import density_frame, density_map
from gsir.stagewise.pipeline import StagePipelineState, prefix_render, run_pipeline, stage_stats
from gsir.stagewise.predictor import HeuristicPredictor, load_weights

log = logging.getLogger(__name__)


class EncodeJob(BaseModel):
    model_config = ConfigDict(frozen=True)

    input: Path
    output: Path
    patch_size: int = Field(default=params.patch_size, ge=2)
    n_stages: int = Field(default=params.n_stages, ge=1, le=params.max_stages)
    tau_psnr: float = params.tau_psnr
    tau_ssim: float = params.tau_ssim
    predictor: str = "heuristic"  # or tiny:<weights path>
    refine_steps: int = Field(default=0, ge=0)
    strategy: RangeStrategy = RangeStrategy.ADAPTIVE
    bits: int | None = Field(default=None, ge=1, le=16)  # one width for every attribute

    @field_validator("predictor")
    @classmethod
    def known_predictor(cls, v):
        if v != "heuristic" and not (v.startswith("tiny:") and len(v) > len("tiny:")):
            raise ValueError(f"predictor must be 'heuristic' or 'tiny:<weights path>', got {v!r}")
        return v

    @property
    def control(self) -> StageControlConfig:
        return StageControlConfig(tau_psnr=self.tau_psnr, tau_ssim=self.tau_ssim,
                                  patch_size=self.patch_size, n_stages=self.n_stages)

    @property
    def refine(self) -> RefineConfig | None:
        return RefineConfig(steps=self.refine_steps) if self.refine_steps else None

    def global_base(self) -> QuantSpec:
        base = default_global_base()
        return base.with_bits(self.bits) if self.bits is not None else base


def load_predictor(spec: str, patch_size: int, n_stages: int):
    if spec == "heuristic":
        return HeuristicPredictor(patch_size)
    model = load_weights(spec[len("tiny:"):])
    if model.patch_size != patch_size:
        raise InvalidParameterError(f"weights were trained for p={model.patch_size}, job asks for p={patch_size}")
    if model.n_stages < n_stages:
        raise InvalidParameterError(f"weights cover {model.n_stages} stages, job asks for {n_stages}")
    return model


@dataclass(frozen=True)
class Encoded:
    stream: bytes
    state: StagePipelineState
    spec: QuantSpec
    quantized: GaussianSet
    report: EncodeReport


def quantize_set(gset: GaussianSet, spec: QuantSpec, canvas: tuple[int, int]) -> GaussianSet:
    """dequantize(quantize(set)): what a decoder will see."""
    if gset.count == 0:
        return gset
    return dequantize(quantize(gset, spec, canvas), spec, canvas, gset.stage_id)


def encode_image(target: ImageBuffer, job: EncodeJob, render_cfg: RenderConfig = DEFAULT_RENDER) -> Encoded:
    height, width = target.shape[:2]
    if job.patch_size > min(width, height):
        raise InvalidParameterError(f"patch size {job.patch_size} exceeds the image ({width}x{height})")
    started = time.perf_counter()
    control = job.control
    model = load_predictor(job.predictor, job.patch_size, job.n_stages)
    state = run_pipeline(target, model, control, job.refine, render_cfg)
    final = state.gaussians
    if final.count == 0 and job.strategy != RangeStrategy.GLOBAL:
        spec = job.global_base().with_strategy(job.strategy)
    else:
        spec = derive_ranges(final, job.strategy, job.global_base(), (width, height))
    meta = StreamMeta(width, height, job.n_stages)
    stream = encode_bitstream(final, spec, meta)
    quantized = quantize_set(final, spec, (width, height))
    recon = render(quantized, width, height, render_cfg)
    elapsed = time.perf_counter() - started

    stats = stage_stats(state, control)
    capacity = candidate_capacity(height, width, control)
    report = EncodeReport(
        input=str(job.input),
        output=str(job.output),
        width=width,
        height=height,
        patch_size=job.patch_size,
        n_stages=job.n_stages,
        tau_psnr=job.tau_psnr,
        tau_ssim=job.tau_ssim,
        predictor=job.predictor,
        strategy=spec.strategy.value,
        stages=[StageReport(**asdict(s)) for s in stats],
        count=final.count,
        capacity=capacity,
        utilization=final.count / capacity,
        psnr=psnr(state.render, target),
        quantized_psnr=psnr(recon, target),
        quantized_ms_ssim=ms_ssim(recon, target),
        bits_per_primitive=spec.bits_per_primitive,
        size_bytes=len(stream),
        bpp=8.0 * len(stream) / (width * height),
        wall_time_s=elapsed,
    )
    log.info(f"encoded {width}x{height} count={final.count} bytes={len(stream)} {elapsed=:.2f}s")
    return Encoded(stream, state, spec, quantized, report)


def encode_file(job: EncodeJob, render_cfg: RenderConfig = DEFAULT_RENDER) -> EncodeReport:
    target = read_image(job.input)
    encoded = encode_image(target, job, render_cfg)
    Path(job.output).write_bytes(encoded.stream)
    return encoded.report


def decode_file(path, output, prefix_dir=None, density_path=None, cell: int = 8,
                render_cfg: RenderConfig = DEFAULT_RENDER) -> DecodeReport:
    gset, _, meta = decode_bitstream(Path(path).read_bytes())
    write_png(output, render(gset, meta.width, meta.height, render_cfg))
    prefixes = []
    if prefix_dir is not None:
        prefix_dir = Path(prefix_dir)
        prefix_dir.mkdir(parents=True, exist_ok=True)
        for i in range(1, meta.n_stages + 1):
            out = prefix_dir / f"{Path(output).stem}_stage{i}.png"
            write_png(out, prefix_render(gset, i, meta.width, meta.height, render_cfg))
            prefixes.append(str(out))
    if density_path is not None:
        grid = density_map(gset, cell, meta.width, meta.height)
        write_pgm(density_path, grid)
        density_frame(grid, cell).to_csv(Path(density_path).with_suffix(".csv"), index=False)
    return DecodeReport(
        input=str(path),
        output=str(output),
        width=meta.width,
        height=meta.height,
        count=gset.count,
        stage_counts=list(meta.stage_counts),
        prefixes=prefixes,
        density=str(density_path) if density_path is not None else None,
    )
