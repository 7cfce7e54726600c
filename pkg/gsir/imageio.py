"""PNG / binary PPM / PGM in and out. Images come in as float64 H x W x 3 in
[0, 1]: 8-bit samples / 255, 16-bit samples / 65535."""

import logging

import numpy as np
from PIL import Image, UnidentifiedImageError

from gsir.core import ImageBuffer, check_image
from gsir.errors import ImageFormatError

log = logging.getLogger(__name__)

FORMATS = ("PNG", "PPM")

_SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I")


def read_image(path) -> ImageBuffer:
    try:
        with Image.open(path) as im:
            if im.format not in FORMATS:
                raise ImageFormatError(f"{path}: unsupported format {im.format}, expected PNG or PPM/PGM")
            im.load()
            if im.mode in _SIXTEEN_BIT_MODES:
                data = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode in ("L", "RGB", "RGBA", "LA", "P"):
                data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            else:
                raise ImageFormatError(f"{path}: unsupported pixel mode {im.mode}")
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: not a readable image") from e
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    log.debug(f"read {path} {data.shape=}")
    return np.clip(data, 0.0, 1.0)


def to_uint8(img: ImageBuffer) -> np.ndarray:
    return np.rint(np.clip(check_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: ImageBuffer) -> None:
    """Clamp to [0, 1] and round to 8 bits."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def write_ppm(path, img: ImageBuffer) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PPM")


def heatmap(grid, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Scalar grid to 8-bit gray, linear between lo and hi (data range when
    unset). NaN maps to 0."""
    grid = np.asarray(grid, dtype=np.float64)
    finite = grid[np.isfinite(grid)]
    if lo is None:
        lo = float(finite.min()) if finite.size else 0.0
    if hi is None:
        hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((np.nan_to_num(grid, nan=lo) - lo) / span, 0.0, 1.0)
    return np.rint(scaled * 255.0).astype(np.uint8)


def write_pgm(path, grid, lo: float | None = None, hi: float | None = None) -> None:
    Image.fromarray(heatmap(grid, lo, hi), mode="L").save(path, format="PPM")
