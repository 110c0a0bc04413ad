"""Central finite-difference checks for the four loss-kernel gradients."""

from dataclasses import dataclass

import numpy as np

from . import semantic, spatial
from .spatial import OffsetField

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4

KERNELS = ("edl_loss", "kl_regularizer", "gaussian_nll_loss", "energy_score_loss")


def central_difference(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Numeric gradient of scalar f at x, one coordinate at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        grad.ravel()[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over coordinates of |a - n| / max(|a|, |n|, 1)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def _random_mask(rng, shape):
    mask = rng.random(shape) < 0.8
    if not mask.any():
        mask.ravel()[0] = True
    return mask


def check_edl(rng, step=DEFAULT_STEP) -> float:
    shape, c = (3, 4), 4
    alpha = rng.uniform(1.01, 50.0, size=shape + (c,))
    labels = rng.integers(0, c, size=shape)
    mask = _random_mask(rng, shape)
    _, grad = semantic.edl_loss(alpha, labels, mask)
    numeric = central_difference(lambda a: semantic.edl_loss(a, labels, mask)[0], alpha, step)
    return max_relative_error(grad, numeric)


def check_kl(rng, step=DEFAULT_STEP) -> float:
    shape, c = (3, 4), 4
    alpha = rng.uniform(1.01, 50.0, size=shape + (c,))
    labels = rng.integers(0, c, size=shape)
    mask = _random_mask(rng, shape)
    lam = float(rng.uniform(0.01, 0.1))
    _, grad = semantic.kl_regularizer(alpha, labels, lam, mask)
    numeric = central_difference(
        lambda a: semantic.kl_regularizer(a, labels, lam, mask)[0], alpha, step
    )
    return max_relative_error(grad, numeric)


def check_nll(rng, step=DEFAULT_STEP) -> float:
    shape = (3, 4)
    mean = rng.uniform(-3.0, 3.0, size=shape + (2,))
    var = rng.uniform(0.5, 3.0, size=shape + (2,))
    gt = rng.uniform(-3.0, 3.0, size=shape + (2,))
    mask = _random_mask(rng, shape)
    field = OffsetField.gaussian(mean, var)
    _, grad_mean, grad_var = spatial.gaussian_nll_loss(field, gt, mask)
    numeric_mean = central_difference(
        lambda m: spatial.gaussian_nll_loss(OffsetField.gaussian(m, var), gt, mask)[0], mean, step
    )
    numeric_var = central_difference(
        lambda v: spatial.gaussian_nll_loss(OffsetField.gaussian(mean, v), gt, mask)[0], var, step
    )
    return max(
        max_relative_error(grad_mean, numeric_mean), max_relative_error(grad_var, numeric_var)
    )


def check_es(rng, step=DEFAULT_STEP, min_separation=1e-3) -> float:
    shape, m = (2, 3), 4
    gt = rng.uniform(-5.0, 5.0, size=shape + (2,))
    while True:  # keep the FD probe away from the norm kinks
        samples = rng.uniform(-5.0, 5.0, size=shape + (m, 2))
        d_gt = np.linalg.norm(samples - gt[:, :, None, :], axis=-1)
        pair = np.linalg.norm(samples[:, :, :, None, :] - samples[:, :, None, :, :], axis=-1)
        pair[:, :, range(m), range(m)] = np.inf
        if d_gt.min() > 10 * min_separation and pair.min() > 10 * min_separation:
            break
    mask = _random_mask(rng, shape)
    _, grad = spatial.energy_score_loss(OffsetField.from_samples(samples), gt, mask)
    numeric = central_difference(
        lambda s: spatial.energy_score_loss(OffsetField.from_samples(s), gt, mask)[0],
        samples,
        step,
    )
    return max_relative_error(grad, numeric)


_CHECKS = {
    "edl_loss": check_edl,
    "kl_regularizer": check_kl,
    "gaussian_nll_loss": check_nll,
    "energy_score_loss": check_es,
}


@dataclass(frozen=True)
class GradcheckResult:
    max_errors: dict  # kernel name -> max relative error over all trials
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_errors.values())


def run_gradcheck(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, trials: int = 100) -> GradcheckResult:
    """Run ``trials`` seeded finite-difference checks per kernel."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    errors = {}
    for name in KERNELS:
        check = _CHECKS[name]
        errors[name] = max(check(rng) for _ in range(trials))
    return GradcheckResult(max_errors=errors, tolerance=tolerance)
