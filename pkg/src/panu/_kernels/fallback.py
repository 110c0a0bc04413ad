"""Pure numpy implementations of the hot per-pixel kernels.

Mirrors the compiled backend in ``_native.pyx``. Pixel chunking keeps the
temporaries for the pairwise energy-score terms and the center-distance
matrices bounded regardless of image size.
"""

import numpy as np

_CHUNK = 16384


def es_per_pixel(samples: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Energy score per pixel: (1/M) sum_j ||s_j - v|| - (1/2M^2) sum_jk ||s_k - s_j||.

    samples: (N, M, 2) f64, gt: (N, 2) f64. Returns (N,) f64.
    """
    n, m, _ = samples.shape
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        s = samples[lo:hi]
        d1 = s - gt[lo:hi, None, :]
        n1 = np.sqrt(d1[..., 0] ** 2 + d1[..., 1] ** 2)
        dp = s[:, :, None, :] - s[:, None, :, :]
        np_ = np.sqrt(dp[..., 0] ** 2 + dp[..., 1] ** 2)
        out[lo:hi] = n1.sum(axis=1) / m - np_.sum(axis=(1, 2)) / (2.0 * m * m)
    return out


def es_grad(samples: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Gradient of the per-pixel energy score w.r.t. each sample.

    Subgradient 0 is used wherever a pairwise distance vanishes.
    Returns (N, M, 2) f64.
    """
    n, m, _ = samples.shape
    out = np.empty_like(samples)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        s = samples[lo:hi]
        d1 = s - gt[lo:hi, None, :]
        n1 = np.sqrt(d1[..., 0] ** 2 + d1[..., 1] ** 2)
        u1 = np.divide(d1, n1[..., None], out=np.zeros_like(d1), where=n1[..., None] > 0.0)
        dp = s[:, :, None, :] - s[:, None, :, :]
        np_ = np.sqrt(dp[..., 0] ** 2 + dp[..., 1] ** 2)
        up = np.divide(dp, np_[..., None], out=np.zeros_like(dp), where=np_[..., None] > 0.0)
        out[lo:hi] = u1 / m - up.sum(axis=2) / (m * m)
    return out


def nearest_center(targets: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the center with minimal squared distance; ties go to the lower index.

    targets: (N, 2) f64 as (y, x), centers: (K, 2) f64. Returns (N,) i64.
    """
    n = targets.shape[0]
    out = np.empty(n, dtype=np.int64)
    cy = centers[:, 0]
    cx = centers[:, 1]
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        dy = targets[lo:hi, 0:1] - cy[None, :]
        dx = targets[lo:hi, 1:2] - cx[None, :]
        out[lo:hi] = np.argmin(dy * dy + dx * dx, axis=1)
    return out


def mode_votes(votes: np.ndarray, num_candidates: int) -> np.ndarray:
    """Modal value per row; ties broken by the smaller value.

    votes: (N, M) i64 with entries in [0, num_candidates). Returns (N,) i64.
    """
    n, m = votes.shape
    out = np.empty(n, dtype=np.int64)
    k = max(int(num_candidates), 1)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        v = votes[lo:hi]
        counts = (v[:, :, None] == v[:, None, :]).sum(axis=2)
        key = counts * k - v
        best = np.argmax(key, axis=1)
        out[lo:hi] = v[np.arange(hi - lo), best]
    return out


def nms_peaks(heat: np.ndarray, threshold: float, kernel: int) -> np.ndarray:
    """Strict local maxima of a kernel x kernel window, at or above threshold.

    Within-window ties keep only the smaller row-major index.
    heat: (H, W) f64. Returns (H, W) bool.
    """
    h, w = heat.shape
    r = kernel // 2
    padded = np.full((h + 2 * r, w + 2 * r), -np.inf, dtype=np.float64)
    padded[r : r + h, r : r + w] = heat
    keep = heat >= threshold
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            if dy < 0 or (dy == 0 and dx < 0):
                keep &= heat > nb
            else:
                keep &= heat >= nb
    return keep


def bin_stats(conf: np.ndarray, acc: np.ndarray, nbins: int):
    """Per-bin pixel counts and confidence/accuracy sums.

    Bin rule: index = clip(ceil(conf * R) - 1, 0, R - 1), i.e. right-closed
    intervals with 0 folded into the first bin. Accumulation is sequential in
    pixel order so results match the naive reference loop bit for bit.
    """
    idx = np.ceil(conf * nbins).astype(np.int64) - 1
    np.clip(idx, 0, nbins - 1, out=idx)
    counts = np.bincount(idx, minlength=nbins)
    conf_sums = np.bincount(idx, weights=conf, minlength=nbins)
    acc_sums = np.bincount(idx, weights=acc, minlength=nbins)
    return counts.astype(np.int64), conf_sums, acc_sums
