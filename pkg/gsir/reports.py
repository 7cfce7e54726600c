"""JSON reports printed by the command line. The pydantic models are the
schema (`python -m gsir schema <name>`)."""

from pydantic import BaseModel


class StageReport(BaseModel):
    stage: int
    count: int
    cumulative: int
    utilization: float
    psnr: float
    ms_ssim: float


class EncodeReport(BaseModel):
    input: str
    output: str
    width: int
    height: int
    patch_size: int
    n_stages: int
    tau_psnr: float
    tau_ssim: float
    predictor: str
    strategy: str
    stages: list[StageReport]
    count: int
    capacity: int
    utilization: float
    psnr: float
    quantized_psnr: float
    quantized_ms_ssim: float
    bits_per_primitive: int
    size_bytes: int
    bpp: float
    wall_time_s: float


class DecodeReport(BaseModel):
    input: str
    output: str
    width: int
    height: int
    count: int
    stage_counts: list[int]
    prefixes: list[str] = []
    density: str | None = None


class EvalReport(BaseModel):
    psnr: float
    ssim: float
    ms_ssim: float
    patch_size: int
    maps: str | None = None
    psnr_map: str | None = None
    ssim_map: str | None = None


class TrainReport(BaseModel):
    mode: str
    steps: int
    start_step: int
    images: int
    weights: str
    log: str
    final_total: float | None = None


class BenchReport(BaseModel):
    suite: str
    images: int
    tables: list[str]
    curves: list[str] = []


REPORTS = {
    "encode": EncodeReport,
    "decode": DecodeReport,
    "eval": EvalReport,
    "train": TrainReport,
    "bench": BenchReport,
}
