"""Stage Control: activate new primitives only on patch tokens that fail the
fidelity target."""

from dataclasses import dataclass

import numpy as np

from gsir.errors import ShapeMismatchError
from gsir.metrics import QualityMaps, grid_shape
from gsir.stagewise.config import StageControlConfig


@dataclass(frozen=True)
class StageMask:
    grid: np.ndarray  # bool, one flag per patch token
    stage: int

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.grid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @classmethod
    def full(cls, shape, stage: int, value: bool = True) -> "StageMask":
        return cls(np.full(shape, value, dtype=bool), stage)


def compute_stage_mask(maps: QualityMaps, cfg: StageControlConfig, stage: int = 1,
                       image_shape: tuple[int, int] | None = None) -> StageMask:
    """M(u) = [psnr(u) < tau_psnr or ssim(u) < tau_ssim]."""
    if maps.patch_size != cfg.patch_size:
        raise ShapeMismatchError(f"maps use p={maps.patch_size}, control expects p={cfg.patch_size}")
    if image_shape is not None and maps.shape != grid_shape(*image_shape, cfg.patch_size):
        raise ShapeMismatchError(f"map grid {maps.shape} does not match image {image_shape} at p={cfg.patch_size}")
    grid = (maps.psnr_map < cfg.tau_psnr) | (maps.ssim_map < cfg.tau_ssim)
    return StageMask(grid, stage)


def token_origins(grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """(x0, y0) of every token, row-major."""
    rows, cols = np.mgrid[0:grid[0], 0:grid[1]]
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1).astype(np.float64) * patch_size


def candidate_capacity(height: int, width: int, cfg: StageControlConfig) -> int:
    """S * ceil(H/p) * ceil(W/p): one candidate per token per stage."""
    gh, gw = grid_shape(height, width, cfg.patch_size)
    return cfg.n_stages * gh * gw


def utilization(activated: int, height: int, width: int, cfg: StageControlConfig) -> float:
    return activated / candidate_capacity(height, width, cfg)
