"""Deterministic image corpora: natural-looking crops for the desk-scale
benchmarks, two-Gaussian toy scenes for predictor training, and on-disk
corpus directories."""

import logging
import math
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from gsir import params
from gsir.core import GaussianSet, ImageBuffer
from gsir.errors import EmptyCorpusError
from gsir.imageio import read_image, write_png
from gsir.render import render
from gsir.rng import named_rng

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")
N_CROPS = 5
CROP_SIZE = 64
TOY_SIZE = 16


def _octave_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    out = np.zeros((size, size))
    for o in range(octaves):
        cells = 2 ** (o + 2)
        coarse = rng.normal(size=(cells, cells))
        out += 0.5 ** o * zoom(coarse, size / cells, order=3, mode="reflect")[:size, :size]
    return out


def natural_crop(index: int, size: int = CROP_SIZE, seed: int = params.default_seed,
                 shadow: bool = False) -> ImageBuffer:
    """Smooth multi-octave texture with a tinted luminance, a color gradient
    and one slightly blurred edge, stretched into [0.05, 0.95]. With shadow,
    one corner falls off into black."""
    rng = named_rng(seed, "crop", index)
    lum = _octave_noise(rng, size)
    tint = rng.uniform(0.4, 1.0, size=3)
    img = lum[:, :, None] * tint + 0.35 * np.stack([_octave_noise(rng, size, 3) for _ in range(3)], axis=2)

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    img += ramp[:, :, None] * rng.uniform(-1.0, 1.0, size=3)

    normal = rng.uniform(0, 2 * math.pi)
    offset = rng.uniform(0.3, 0.7) * size
    side = (np.cos(normal) * (xx - size / 2) + np.sin(normal) * (yy - size / 2) + size / 2) > offset
    edge = gaussian_filter(side.astype(np.float64), 0.7)
    img += edge[:, :, None] * rng.uniform(-1.5, 1.5, size=3)

    lo, hi = img.min(), img.max()
    img = 0.05 + 0.9 * (img - lo) / (hi - lo)
    if shadow:
        corner = rng.integers(2, size=2) * size
        radius = rng.uniform(*params.shadow_radius) * size
        dark = np.hypot(xx - corner[0], yy - corner[1]) < radius
        img *= np.clip(1.0 - gaussian_filter(dark.astype(np.float64), 1.0), 0.0, 1.0)[:, :, None]
    return img


def natural_corpus(n: int = N_CROPS, size: int = CROP_SIZE, seed: int = params.default_seed) -> list[ImageBuffer]:
    """The benchmark crops. Each has a shadowed corner that needs no primitives."""
    return [natural_crop(k, size, seed, shadow=True) for k in range(n)]


def toy_scene(rng: np.random.Generator, size: int = TOY_SIZE, n_gaussians: int = 2) -> ImageBuffer:
    gset = GaussianSet(
        mu=rng.uniform(0.2 * size, 0.8 * size, size=(n_gaussians, 2)),
        log_scale=rng.uniform(math.log(1.5), math.log(3.0), size=(n_gaussians, 2)),
        theta=rng.uniform(0.0, math.pi, size=n_gaussians),
        color=rng.uniform(0.2, 0.8, size=(n_gaussians, 3)),
    )
    return np.clip(render(gset, size, size), 0.0, 1.0)


def toy_corpus(n: int = 32, size: int = TOY_SIZE, seed: int = params.default_seed) -> list[ImageBuffer]:
    return [toy_scene(named_rng(seed, "toy", k), size) for k in range(n)]


def corpus_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise NotADirectoryError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_corpus(directory) -> list[ImageBuffer]:
    files = corpus_files(directory)
    if not files:
        raise EmptyCorpusError(f"no PNG/PPM/PGM images in {directory}")
    log.info(f"corpus {directory}: {len(files)} images")
    return [read_image(p) for p in files]


def write_corpus(directory, images, prefix: str = "img") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(images):
        path = directory / f"{prefix}_{k:03d}.png"
        write_png(path, img)
        paths.append(path)
    return paths
