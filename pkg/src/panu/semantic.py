"""Temperature-scaled softmax, temperature fitting, and evidential (Dirichlet)
classification kernels with analytic gradients."""

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp, polygamma

from . import _kernels
from .errors import (
    EmptyDataset,
    InvariantViolation,
    LabelOutOfRange,
    ModeInputMismatch,
    NonFiniteInput,
    NonPositiveTemperature,
)

MCP = "mcp"
ENTROPY = "entropy"
EVIDENTIAL = "evidential"

ANNEAL_CAP = 0.1
ANNEAL_RAMP_EPOCHS = 60.0


@dataclass(frozen=True)
class CalibrationConfig:
    epochs: int = 25
    learning_rate: float = 0.001
    initial_temperature: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvariantViolation("epochs must be >= 1")
        if not self.learning_rate > 0.0:
            raise InvariantViolation("learning_rate must be positive")
        if not self.initial_temperature > 0.0:
            raise InvariantViolation("initial_temperature must be positive")


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    initial_loss: float
    final_loss: float
    warning: bool  # set when the final loss did not improve on the initial one


def softmax_with_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Per-pixel softmax of logits / T over the last axis.

    Scaling by a single positive T never changes the per-pixel argmax.
    """
    if not temperature > 0.0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInput("logits contain non-finite values")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean cross-entropy of softmax(logits / T) against integer labels."""
    z = logits / temperature
    lse = logsumexp(z, axis=-1)
    picked = np.take_along_axis(z, labels[:, None], axis=-1)[:, 0]
    return _kernels.tree_mean(lse - picked)


def fit_temperature(logits, labels, config: CalibrationConfig = CalibrationConfig()) -> TemperatureFit:
    """Fit the softmax temperature by full-batch gradient descent on mean
    cross-entropy, with T the only free parameter.

    d/dT of the mean cross-entropy is mean(z_y - sum_c p_c z_c) / T^2.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, np.shape(logits)[-1])
    labels = np.asarray(labels).reshape(-1)
    n, c = logits.shape
    if n == 0:
        raise EmptyDataset("fit_temperature requires at least one sample")
    if labels.shape[0] != n:
        raise InvariantViolation(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteInput("logits contain non-finite values")
    labels = labels.astype(np.int64)

    t = config.initial_temperature
    z_true = np.take_along_axis(logits, labels[:, None], axis=-1)[:, 0]
    initial_loss = cross_entropy(logits, labels, t)
    for _ in range(config.epochs):
        p = softmax_with_temperature(logits, t)
        grad = float(np.mean(z_true - (p * logits).sum(axis=-1))) / (t * t)
        t = max(t - config.learning_rate * grad, 1e-4)
    final_loss = cross_entropy(logits, labels, t)
    return TemperatureFit(t, initial_loss, final_loss, warning=final_loss > initial_loss)


def dirichlet_from_evidence(raw: np.ndarray) -> np.ndarray:
    """Dirichlet parameters from raw head output: alpha = softplus(raw) + 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteInput("evidence contains non-finite values")
    return np.logaddexp(0.0, raw) + 1.0


def _check_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(np.isfinite(alpha)):
        raise NonFiniteInput("alpha contains non-finite values")
    if np.any(alpha < 1.0):
        raise InvariantViolation("Dirichlet parameters must be >= 1")
    return alpha


def dirichlet_quantities(alpha):
    """Strength S = sum_c alpha_c, uncertainty u = C / S, and expected
    probabilities alpha / S. Returns (strength, uncertainty, probs)."""
    alpha = _check_alpha(alpha)
    c = alpha.shape[-1]
    strength = alpha.sum(axis=-1)
    uncertainty = c / strength
    probs = alpha / strength[..., None]
    return strength, uncertainty, probs


def _resolve_labels(labels, shape, num_classes, mask):
    labels = np.asarray(labels)
    if labels.shape == shape + (num_classes,):
        labels = labels.argmax(axis=-1)
    elif labels.shape != shape:
        raise InvariantViolation(
            f"labels must have shape {shape} or {shape + (num_classes,)}, got {labels.shape}"
        )
    labels = labels.astype(np.int64)
    masked = labels[mask]
    if masked.size and (masked.min() < 0 or masked.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes}) on unmasked pixels")
    return labels


def _resolve_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise InvariantViolation(f"mask shape {mask.shape} does not match {shape}")
    return mask


def _reduction_scale(reduction, count):
    if reduction == "mean":
        return 1.0 / count if count else 0.0
    if reduction == "sum":
        return 1.0
    raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def edl_loss(alpha, labels, mask=None, reduction="mean"):
    """Type-II maximum-likelihood evidential loss with its analytic gradient.

    Per masked pixel: log(S) - log(alpha_y). Gradient w.r.t. alpha is
    1/S - y_c / alpha_c. Returns (loss, grad_alpha).
    """
    alpha = _check_alpha(alpha)
    shape = alpha.shape[:-1]
    c = alpha.shape[-1]
    mask = _resolve_mask(mask, shape)
    labels = _resolve_labels(labels, shape, c, mask)

    strength = alpha.sum(axis=-1)
    alpha_true = np.take_along_axis(alpha, labels[..., None], axis=-1)[..., 0]
    per_pixel = np.log(strength) - np.log(alpha_true)
    n = int(mask.sum())
    scale = _reduction_scale(reduction, n)
    loss = _kernels.tree_sum(per_pixel[mask]) * scale

    onehot = np.zeros(alpha.shape, dtype=np.float64)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    grad = (1.0 / strength[..., None] - onehot / alpha) * mask[..., None] * scale
    return loss, grad


def kl_regularizer(alpha, labels, lambda_t, mask=None, reduction="mean"):
    """Annealed KL divergence of the off-class Dirichlet against the uniform one.

    The true-class parameter is replaced by the constant 1 (treated as
    non-differentiable), so the gradient is zero in that coordinate.
    Returns (loss, grad_alpha).
    """
    if lambda_t < 0.0:
        raise InvariantViolation("lambda_t must be >= 0")
    alpha = _check_alpha(alpha)
    shape = alpha.shape[:-1]
    c = alpha.shape[-1]
    mask = _resolve_mask(mask, shape)
    labels = _resolve_labels(labels, shape, c, mask)

    onehot = np.zeros(alpha.shape, dtype=bool)
    np.put_along_axis(onehot, labels[..., None], True, axis=-1)
    alpha_t = np.where(onehot, 1.0, alpha)
    strength_t = alpha_t.sum(axis=-1)

    kl = (
        gammaln(strength_t)
        - gammaln(float(c))
        - gammaln(alpha_t).sum(axis=-1)
        + ((alpha_t - 1.0) * (digamma(alpha_t) - digamma(strength_t)[..., None])).sum(axis=-1)
    )
    n = int(mask.sum())
    scale = _reduction_scale(reduction, n) * lambda_t
    loss = _kernels.tree_sum(kl[mask]) * scale

    grad = (alpha_t - 1.0) * polygamma(1, alpha_t) - (
        (strength_t - c) * polygamma(1, strength_t)
    )[..., None]
    grad = np.where(onehot, 0.0, grad) * mask[..., None] * scale
    return loss, grad


def anneal_coefficient(epoch: int) -> float:
    """KL annealing schedule: min(0.1, epoch / 60)."""
    if epoch < 0:
        raise InvariantViolation("epoch must be >= 0")
    return min(ANNEAL_CAP, epoch / ANNEAL_RAMP_EPOCHS)


def semantic_uncertainty(values, mode: str, kind: str = "probs") -> np.ndarray:
    """Scalar per-pixel semantic uncertainty in [0, 1].

    mode 'mcp': 1 - max_c p_c; 'entropy': Shannon entropy normalized by ln C;
    'evidential': u = C / S, which requires Dirichlet input.
    """
    if kind not in ("probs", "dirichlet"):
        raise ValueError(f"kind must be 'probs' or 'dirichlet', got {kind!r}")
    if mode == EVIDENTIAL:
        if kind != "dirichlet":
            raise ModeInputMismatch("evidential uncertainty requires Dirichlet input")
        _, uncertainty, _ = dirichlet_quantities(values)
        return uncertainty
    if kind == "dirichlet":
        _, _, probs = dirichlet_quantities(values)
    else:
        probs = np.asarray(values, dtype=np.float64)
    if mode == MCP:
        return 1.0 - probs.max(axis=-1)
    if mode == ENTROPY:
        c = probs.shape[-1]
        if c < 2:
            raise InvariantViolation("entropy mode requires at least 2 classes")
        plogp = np.where(probs > 0.0, probs * np.log(np.where(probs > 0.0, probs, 1.0)), 0.0)
        return np.clip(-plogp.sum(axis=-1) / np.log(c), 0.0, 1.0)
    raise ValueError(f"unknown uncertainty mode {mode!r}")
