import math

import numpy as np
import pandas as pd

from gsir.core import GaussianSet
from gsir.errors import InvalidParameterError


def density_map(gset: GaussianSet, cell: int, width: int, height: int) -> np.ndarray:
    """Count of Gaussian centers per cell x cell block of the canvas.

    Centers outside the canvas are counted in the nearest border cell, so the
    grid total always equals the set's count.
    """
    if cell < 1:
        raise InvalidParameterError(f"density cell must be >= 1 px, got {cell}")
    gh, gw = math.ceil(height / cell), math.ceil(width / cell)
    grid = np.zeros((gh, gw), dtype=np.int64)
    if gset.count == 0:
        return grid
    col = np.clip(np.floor(gset.mu[:, 0] / cell).astype(np.int64), 0, gw - 1)
    row = np.clip(np.floor(gset.mu[:, 1] / cell).astype(np.int64), 0, gh - 1)
    np.add.at(grid, (row, col), 1)
    return grid


def density_profile(grid: np.ndarray, row: int) -> np.ndarray:
    """1-D count profile along one row of a density map."""
    if not 0 <= row < grid.shape[0]:
        raise InvalidParameterError(f"row {row} outside a grid of {grid.shape[0]} rows")
    return grid[row].copy()


def density_frame(grid: np.ndarray, cell: int) -> pd.DataFrame:
    """Long-form table (row, col, x0, y0, count), one line per cell."""
    rows, cols = np.mgrid[0:grid.shape[0], 0:grid.shape[1]]
    return pd.DataFrame({
        "row": rows.ravel(),
        "col": cols.ravel(),
        "x0": cols.ravel() * cell,
        "y0": rows.ravel() * cell,
        "count": grid.ravel(),
    })
