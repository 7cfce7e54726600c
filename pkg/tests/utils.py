import math

import numpy as np

from gsir.core import GaussianSet, merge_sets
from gsir.render import GaussianGrads

import params


def random_set(rng, n, width, height, min_scale=0.6, max_scale=3.0, stage=1):
    return GaussianSet(
        mu=rng.uniform(0.1, 0.9, size=(n, 2)) * np.array([width, height]),
        log_scale=rng.uniform(math.log(min_scale), math.log(max_scale), size=(n, 2)),
        theta=rng.uniform(0.0, math.pi, size=n),
        color=rng.normal(0.0, 0.5, size=(n, 3)),
        stage_id=np.full(n, stage, dtype=np.int64),
    )


def staged_set(rng, counts, width, height):
    """Random set whose stage ids are 1..len(counts) in order."""
    out = GaussianSet.empty()
    for i, c in enumerate(counts, start=1):
        out = merge_sets(out, random_set(rng, c, width, height, stage=i))
    return out


def single_gaussian(x, y, scale=1.0, theta=0.0, color=(1.0, 0.0, 0.0)):
    return GaussianSet(
        mu=[[x, y]],
        log_scale=[[math.log(scale), math.log(scale)]],
        theta=[theta],
        color=[color],
    )


def perturb(rng, gset, mu=2.0, scale=0.2, color=0.2):
    return gset.replace(
        mu=gset.mu + rng.uniform(-mu, mu, size=gset.mu.shape),
        log_scale=gset.log_scale + np.log1p(rng.uniform(-scale, scale, size=gset.log_scale.shape)),
        color=gset.color + rng.uniform(-color, color, size=gset.color.shape),
    )


def set_grad_fd(fn, gset, h=params.fd_step) -> GaussianGrads:
    """Central differences of a scalar fn(GaussianSet) for every attribute."""
    out = {}
    for attr in ("mu", "log_scale", "theta", "color"):
        base = np.array(getattr(gset, attr))
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            grad[idx] = (fn(gset.replace(**{attr: up})) - fn(gset.replace(**{attr: down}))) / (2 * h)
        out[attr] = grad
    return GaussianGrads(out["mu"], out["log_scale"], out["theta"], out["color"])


def array_grad_fd(fn, x, h=params.fd_step):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def assert_grads_close(analytic: GaussianGrads, numeric: GaussianGrads, rtol=params.fd_rtol, atol=params.fd_atol):
    for name in ("d_mu", "d_log_scale", "d_theta", "d_color"):
        np.testing.assert_allclose(getattr(analytic, name), getattr(numeric, name), rtol=rtol, atol=atol, err_msg=name)


def reference_psnr(a, b):
    mse = np.mean((np.asarray(a) - np.asarray(b)) ** 2)
    return 10.0 * math.log10(1.0 / mse)
