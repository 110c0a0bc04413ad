"""Offset-distribution losses, scalar spatial uncertainty, Gaussian sampling.

Offset convention: channel 0 is the x (column) component, channel 1 the
y (row) component, and ``pixel position + offset = instance center position``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import _kernels
from .errors import EmptyMask, InvariantViolation, KindMismatch, VarianceBelowFloor

NLL_VARIANCE_FLOOR = 1e-6

POINT = "point"
GAUSSIAN = "gaussian"
SAMPLES = "samples"


@dataclass(frozen=True)
class OffsetField:
    """Per-pixel offset prediction: a point estimate, a diagonal Gaussian, or
    a set of samples. Exactly the fields for ``kind`` are populated."""

    kind: str
    mean: np.ndarray | None = None      # (H, W, 2), point and gaussian
    var: np.ndarray | None = None       # (H, W, 2), gaussian only
    samples: np.ndarray | None = None   # (H, W, M, 2), samples only

    @classmethod
    def point(cls, mean: np.ndarray) -> "OffsetField":
        mean = _checked(mean, 3, "point offsets")
        return cls(POINT, mean=mean)

    @classmethod
    def gaussian(cls, mean: np.ndarray, var: np.ndarray) -> "OffsetField":
        mean = _checked(mean, 3, "gaussian offset mean")
        var = _checked(var, 3, "gaussian offset variance")
        if var.shape != mean.shape:
            raise InvariantViolation(
                f"gaussian mean/variance shapes differ: {mean.shape} vs {var.shape}"
            )
        if not np.all(var > 0.0):
            raise InvariantViolation("gaussian offset variances must be positive")
        return cls(GAUSSIAN, mean=mean, var=var)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "OffsetField":
        samples = _checked(samples, 4, "offset samples")
        if samples.shape[2] < 1:
            raise InvariantViolation("samples kind requires M >= 1")
        return cls(SAMPLES, samples=samples)

    @property
    def spatial_shape(self) -> tuple:
        arr = self.samples if self.kind == SAMPLES else self.mean
        return arr.shape[:2]

    @property
    def num_samples(self) -> int:
        if self.kind != SAMPLES:
            raise KindMismatch(f"num_samples undefined for kind {self.kind!r}")
        return self.samples.shape[2]

    def as_samples(self) -> "OffsetField":
        """View a point field as a single-sample field (M=1)."""
        if self.kind == SAMPLES:
            return self
        if self.kind == POINT:
            return OffsetField.from_samples(self.mean[:, :, None, :])
        raise KindMismatch("gaussian fields must be sampled explicitly first")


@dataclass(frozen=True)
class VarianceNormalizer:
    """Scale for mapping total offset variance to [0, 1] uncertainty; in a
    trained system this is the maximum total variance seen on the training set."""

    max_total_variance: float

    def __post_init__(self):
        if not self.max_total_variance > 0.0:
            raise InvariantViolation("max_total_variance must be positive")


def _checked(arr, ndim, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != ndim or arr.shape[-1] != 2:
        raise InvariantViolation(f"{what} must have shape (..., 2) with ndim {ndim}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(f"{what} contains non-finite values")
    return arr


def _resolve_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise InvariantViolation(f"mask shape {mask.shape} does not match field shape {shape}")
    return mask


def _check_gt(gt, shape):
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != shape + (2,):
        raise InvariantViolation(f"ground-truth offsets must have shape {shape + (2,)}, got {gt.shape}")
    return gt


def _reduction_scale(reduction, count):
    if reduction == "mean":
        return 1.0 / count if count else 0.0
    if reduction == "sum":
        return 1.0
    raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def gaussian_nll_loss(field: OffsetField, gt, mask=None, reduction="mean"):
    """Diagonal-Gaussian negative log-likelihood of the ground-truth offsets.

    Per masked pixel and axis: 0.5*ln(var) + (gt - mean)^2 / (2*var), summed
    over the two axes. Returns (loss, grad_mean, grad_var). Variances below
    ``NLL_VARIANCE_FLOOR`` on masked pixels are rejected rather than clamped.
    """
    if field.kind != GAUSSIAN:
        raise KindMismatch(f"gaussian_nll_loss requires a gaussian field, got {field.kind!r}")
    shape = field.spatial_shape
    gt = _check_gt(gt, shape)
    mask = _resolve_mask(mask, shape)
    mean, var = field.mean, field.var
    if np.any(var[mask] < NLL_VARIANCE_FLOOR):
        raise VarianceBelowFloor(f"variance below floor {NLL_VARIANCE_FLOOR} on masked pixels")

    resid = gt - mean
    per_pixel = (0.5 * np.log(var) + resid**2 / (2.0 * var)).sum(axis=-1)
    n = int(mask.sum())
    scale = _reduction_scale(reduction, n)
    loss = _kernels.tree_sum(per_pixel[mask]) * scale

    m3 = mask[..., None]
    grad_mean = np.where(m3, -resid / var, 0.0) * scale
    grad_var = np.where(m3, 0.5 / var - resid**2 / (2.0 * var**2), 0.0) * scale
    return loss, grad_mean, grad_var


def energy_score_loss(field: OffsetField, gt, mask=None, reduction="mean"):
    """Energy score of the sample set against the ground-truth offset.

    Per masked pixel: (1/M) sum_j ||s_j - v|| - (1/2M^2) sum_jk ||s_k - s_j||.
    Returns (loss, grad_samples); the subgradient at coincident points is 0.
    """
    if field.kind != SAMPLES:
        raise KindMismatch(f"energy_score_loss requires a samples field, got {field.kind!r}")
    shape = field.spatial_shape
    gt = _check_gt(gt, shape)
    mask = _resolve_mask(mask, shape)

    flat = np.ascontiguousarray(field.samples[mask])
    gt_flat = np.ascontiguousarray(gt[mask])
    n = flat.shape[0]
    scale = _reduction_scale(reduction, n)
    if n == 0:
        return 0.0, np.zeros_like(field.samples)
    per_pixel = _kernels.es_per_pixel(flat, gt_flat)
    loss = _kernels.tree_sum(per_pixel) * scale

    grad = np.zeros_like(field.samples)
    grad[mask] = _kernels.es_grad(flat, gt_flat) * scale
    return loss, grad


def spatial_uncertainty_from_variance(field: OffsetField, normalizer: VarianceNormalizer) -> np.ndarray:
    """Total predicted variance (x + y) scaled by the normalizer, clamped to [0, 1]."""
    if field.kind != GAUSSIAN:
        raise KindMismatch(f"requires a gaussian field, got {field.kind!r}")
    total = field.var[..., 0] + field.var[..., 1]
    return np.clip(total / normalizer.max_total_variance, 0.0, 1.0)


def spatial_uncertainty_from_samples(field: OffsetField, normalizer: VarianceNormalizer) -> np.ndarray:
    """Total per-pixel sample variance (unbiased, x + y) scaled and clamped to [0, 1].

    A single sample carries no spread information; M=1 yields 0 everywhere.
    """
    if field.kind != SAMPLES:
        raise KindMismatch(f"requires a samples field, got {field.kind!r}")
    s = field.samples
    m = s.shape[2]
    if m < 2:
        return np.zeros(field.spatial_shape, dtype=np.float64)
    dev = s - s.mean(axis=2, keepdims=True)
    total = (dev**2).sum(axis=(2, 3)) / (m - 1)
    return np.clip(total / normalizer.max_total_variance, 0.0, 1.0)


def total_sample_variance(field: OffsetField) -> np.ndarray:
    """Unbiased per-pixel sample variance summed over axes (zeros for M=1)."""
    if field.kind != SAMPLES:
        raise KindMismatch(f"requires a samples field, got {field.kind!r}")
    s = field.samples
    m = s.shape[2]
    if m < 2:
        return np.zeros(field.spatial_shape, dtype=np.float64)
    dev = s - s.mean(axis=2, keepdims=True)
    return (dev**2).sum(axis=(2, 3)) / (m - 1)


def sample_gaussian_offsets(field: OffsetField, num_draws: int, seed: int) -> OffsetField:
    """Draw ``num_draws`` offsets per pixel from the diagonal Gaussian field.

    Uses a counter-based generator (Philox keyed by ``seed``); the value at
    (pixel, draw, axis) is a pure function of the seed and the flat element
    index, so identical inputs and seed give bitwise-identical output and
    slices could be generated independently in parallel.
    """
    if field.kind != GAUSSIAN:
        raise KindMismatch(f"sampling requires a gaussian field, got {field.kind!r}")
    if num_draws < 1:
        raise InvariantViolation("num_draws must be >= 1")
    h, w = field.spatial_shape
    rg = np.random.Generator(np.random.Philox(key=seed))
    u = rg.random(size=(h, w, num_draws, 2), dtype=np.float64)
    u[u == 0.0] = 2.775557561562891e-17  # ndtri(0) is -inf
    z = ndtri(u)
    samples = field.mean[:, :, None, :] + np.sqrt(field.var)[:, :, None, :] * z
    return OffsetField.from_samples(samples)


def mean_energy_score(field: OffsetField, gt, mask) -> float:
    """Mean per-pixel energy score over the masked pixels (metric form).

    Accepts samples fields directly and point fields as M=1; gaussian fields
    must be passed through :func:`sample_gaussian_offsets` first.
    """
    field = field.as_samples()
    shape = field.spatial_shape
    gt = _check_gt(gt, shape)
    mask = _resolve_mask(mask, shape)
    flat = np.ascontiguousarray(field.samples[mask])
    if flat.shape[0] == 0:
        raise EmptyMask("energy score undefined on an empty mask")
    per_pixel = _kernels.es_per_pixel(flat, np.ascontiguousarray(gt[mask]))
    return _kernels.tree_mean(per_pixel)
