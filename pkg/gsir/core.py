"""Domain types shared by every module: the Gaussian primitive, sets of them,
covariances and image buffers.

Coordinates are continuous pixel coordinates, x right and y down; pixel
(row i, col j) has its center at (j + 0.5, i + 0.5). Scales are stored as
log-scales and colors are signed and unbounded (opacity is absorbed).
"""

import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from gsir.errors import InvalidParameterError, ShapeMismatchError

# H x W x 3 float64; targets in [0, 1], renders and residuals unbounded
ImageBuffer = npt.NDArray[np.float64]

PI = math.pi


def canonicalize_theta(theta):
    """Map an angle (scalar or array) to [0, pi). A 2D Gaussian ellipse has period pi."""
    t = np.mod(np.asarray(theta, dtype=np.float64), PI)
    # np.mod may round a tiny negative up to exactly pi
    t = np.where(t >= PI, 0.0, t)
    if t.ndim == 0:
        return float(t)
    return t


def zeros_image(width: int, height: int) -> ImageBuffer:
    return np.zeros((height, width, 3), dtype=np.float64)


def check_image(img, name="image") -> ImageBuffer:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatchError(f"{name} must be H x W x 3, got {img.shape}")
    return img


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"dimension mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class Covariance2D:
    sigma: np.ndarray
    sigma_inv: np.ndarray
    det: float


def build_covariance(log_scale, theta) -> Covariance2D:
    """Sigma = (R S)(R S)^T with R the rotation by theta and S = diag(exp(log_scale))."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if log_scale.shape != (2,) or not np.all(np.isfinite(log_scale)) or not math.isfinite(theta):
        raise InvalidParameterError(f"non-finite or malformed covariance input {log_scale=} {theta=}")
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    var = np.exp(2.0 * log_scale)
    sigma = rot @ np.diag(var) @ rot.T
    sigma_inv = rot @ np.diag(1.0 / var) @ rot.T
    # exact symmetry
    sigma[1, 0] = sigma[0, 1]
    sigma_inv[1, 0] = sigma_inv[0, 1]
    return Covariance2D(sigma=sigma, sigma_inv=sigma_inv, det=float(np.exp(2.0 * log_scale.sum())))


@dataclass(frozen=True)
class Gaussian2D:
    mu: tuple[float, float]
    log_scale: tuple[float, float]
    theta: float
    color: tuple[float, float, float]

    def __post_init__(self):
        values = [*self.mu, *self.log_scale, self.theta, *self.color]
        if len(values) != 8 or not all(math.isfinite(v) for v in values):
            raise InvalidParameterError(f"invalid Gaussian parameters {values}")
        object.__setattr__(self, "theta", canonicalize_theta(self.theta))

    @classmethod
    def from_scale(cls, mu, scale, theta, color) -> "Gaussian2D":
        if min(scale) <= 0:
            raise InvalidParameterError(f"scales must be positive, got {scale}")
        return cls(tuple(mu), (math.log(scale[0]), math.log(scale[1])), theta, tuple(color))

    @property
    def scale(self) -> tuple[float, float]:
        return (math.exp(self.log_scale[0]), math.exp(self.log_scale[1]))

    def covariance(self) -> Covariance2D:
        return build_covariance(self.log_scale, self.theta)


def _frozen(a):
    a = np.array(a, dtype=a.dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianSet:
    """Structure-of-arrays collection of primitives with a stage tag each."""

    mu: np.ndarray          # (n, 2)
    log_scale: np.ndarray   # (n, 2)
    theta: np.ndarray       # (n,)
    color: np.ndarray       # (n, 3)
    stage_id: np.ndarray = field(default=None)  # (n,) int, 1-based

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 2)
        n = mu.shape[0]
        log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(-1, 2)
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        stage_id = self.stage_id
        stage_id = np.ones(n, dtype=np.int64) if stage_id is None else np.asarray(stage_id, dtype=np.int64).reshape(-1)
        if not (log_scale.shape[0] == theta.shape[0] == color.shape[0] == stage_id.shape[0] == n):
            raise ShapeMismatchError(
                f"attribute lengths differ: mu={n} log_scale={log_scale.shape[0]} "
                f"theta={theta.shape[0]} color={color.shape[0]} stage_id={stage_id.shape[0]}")
        if n and not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_scale))
                      and np.all(np.isfinite(theta)) and np.all(np.isfinite(color))):
            raise InvalidParameterError("Gaussian parameters must be finite")
        if n and stage_id.min() < 1:
            raise InvalidParameterError(f"stage ids are 1-based, got {stage_id.min()}")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "log_scale", _frozen(log_scale))
        object.__setattr__(self, "theta", _frozen(canonicalize_theta(theta) if n else theta))
        object.__setattr__(self, "color", _frozen(color))
        object.__setattr__(self, "stage_id", _frozen(stage_id))

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_gaussians(cls, gaussians, stage: int = 1) -> "GaussianSet":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            mu=[g.mu for g in gaussians],
            log_scale=[g.log_scale for g in gaussians],
            theta=[g.theta for g in gaussians],
            color=[g.color for g in gaussians],
            stage_id=np.full(len(gaussians), stage, dtype=np.int64),
        )

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def __len__(self):
        return self.count

    def __getitem__(self, i) -> Gaussian2D:
        return Gaussian2D(tuple(self.mu[i]), tuple(self.log_scale[i]), float(self.theta[i]), tuple(self.color[i]))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def replace(self, **changes) -> "GaussianSet":
        fields = {"mu": self.mu, "log_scale": self.log_scale, "theta": self.theta,
                  "color": self.color, "stage_id": self.stage_id}
        fields.update(changes)
        return GaussianSet(**fields)

    def with_stage(self, stage: int) -> "GaussianSet":
        return self.replace(stage_id=np.full(self.count, stage, dtype=np.int64))

    def subset(self, index) -> "GaussianSet":
        index = np.asarray(index)
        return GaussianSet(self.mu[index], self.log_scale[index], self.theta[index],
                           self.color[index], self.stage_id[index])

    def stage(self, i: int) -> "GaussianSet":
        return self.subset(np.nonzero(self.stage_id == i)[0])

    def prefix(self, i: int) -> "GaussianSet":
        """The accumulated set G_i: every primitive tagged with a stage <= i."""
        return self.subset(np.nonzero(self.stage_id <= i)[0])

    def stage_counts(self, n_stages: int) -> list[int]:
        return [int(np.count_nonzero(self.stage_id == i)) for i in range(1, n_stages + 1)]

    def equals(self, other: "GaussianSet") -> bool:
        return (self.count == other.count
                and np.array_equal(self.mu, other.mu)
                and np.array_equal(self.log_scale, other.log_scale)
                and np.array_equal(self.theta, other.theta)
                and np.array_equal(self.color, other.color)
                and np.array_equal(self.stage_id, other.stage_id))


def merge_sets(a: GaussianSet, b: GaussianSet) -> GaussianSet:
    """G_i = G_{i-1} U dG_i: concatenation, a first, stage tags preserved."""
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    return GaussianSet(
        mu=np.concatenate([a.mu, b.mu]),
        log_scale=np.concatenate([a.log_scale, b.log_scale]),
        theta=np.concatenate([a.theta, b.theta]),
        color=np.concatenate([a.color, b.color]),
        stage_id=np.concatenate([a.stage_id, b.stage_id]),
    )
