"""Panoptic fusion: center NMS, offset-based pixel grouping (point or
multi-sample), majority-vote classification, and uncertainty fusion.

Every step is deterministic; all ties break toward the smaller row-major
index / lower id so results are reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels, semantic, spatial
from .errors import InvariantViolation, KindMismatch, ShapeMismatch
from .spatial import GAUSSIAN, POINT, SAMPLES, OffsetField
from .tensor_io import PredictionBundle


@dataclass(frozen=True)
class PostprocessConfig:
    heatmap_threshold: float = 0.1
    nms_kernel: int = 7
    top_k: int = 200

    def __post_init__(self):
        if not 0.0 < self.heatmap_threshold < 1.0:
            raise InvariantViolation("heatmap_threshold must lie in (0, 1)")
        if self.nms_kernel < 1 or self.nms_kernel % 2 == 0:
            raise InvariantViolation("nms_kernel must be an odd count >= 1")
        if self.top_k < 1:
            raise InvariantViolation("top_k must be >= 1")


@dataclass(frozen=True)
class CenterList:
    """Detected instance centers, strongest first."""

    ys: np.ndarray  # (K,) i64 row coordinates
    xs: np.ndarray  # (K,) i64 column coordinates
    scores: np.ndarray  # (K,) f64 heatmap values

    def __len__(self) -> int:
        return self.ys.shape[0]


@dataclass(frozen=True)
class PanopticMap:
    class_id: np.ndarray  # (H, W) i32
    instance_id: np.ndarray  # (H, W) i32, 0 on stuff pixels

    @property
    def shape(self) -> tuple:
        return self.class_id.shape


@dataclass(frozen=True)
class PipelineResult:
    panoptic: PanopticMap
    uncertainty_spatial: np.ndarray | None  # None when the offsets carry no spread
    uncertainty_semantic: np.ndarray
    uncertainty_total: np.ndarray
    centers: CenterList
    semantic_argmax: np.ndarray  # per-pixel argmax before majority-vote fusion


def find_centers(heatmap: np.ndarray, config: PostprocessConfig = PostprocessConfig()) -> CenterList:
    """Thresholded strict-maximum NMS over the heatmap.

    A pixel is a center iff its value is >= threshold and it beats every
    other pixel of its nms_kernel window (window ties keep the smaller
    row-major index). At most top_k centers survive, highest score first.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    peaks = _kernels.nms_peaks(heatmap, config.heatmap_threshold, config.nms_kernel)
    ys, xs = np.nonzero(peaks)
    scores = heatmap[ys, xs]
    order = np.lexsort((ys * heatmap.shape[1] + xs, -scores))[: config.top_k]
    return CenterList(ys=ys[order].astype(np.int64), xs=xs[order].astype(np.int64), scores=scores[order])


def _centers_yx(centers: CenterList) -> np.ndarray:
    return np.ascontiguousarray(
        np.stack([centers.ys.astype(np.float64), centers.xs.astype(np.float64)], axis=1)
    )


def _sample_targets(offsets_xy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per masked pixel, the (y, x) position each offset vector points at."""
    ys, xs = np.nonzero(mask)
    ty = ys.astype(np.float64) + offsets_xy[mask][..., 1]
    tx = xs.astype(np.float64) + offsets_xy[mask][..., 0]
    return np.stack([ty, tx], axis=-1)


def assign_pixels(offsets: OffsetField, centers: CenterList, thing_mask: np.ndarray) -> np.ndarray:
    """Group thing pixels by the center nearest to pixel + offset.

    Instance ids are 1-based center indices; 0 marks unassigned pixels.
    Distance ties go to the lower center index.
    """
    if offsets.kind != POINT:
        raise KindMismatch(f"assign_pixels requires point offsets, got {offsets.kind!r}")
    thing_mask = np.asarray(thing_mask, dtype=bool)
    out = np.zeros(thing_mask.shape, dtype=np.int32)
    if len(centers) == 0 or not thing_mask.any():
        return out
    targets = np.ascontiguousarray(_sample_targets(offsets.mean, thing_mask))
    idx = _kernels.nearest_center(targets, _centers_yx(centers))
    out[thing_mask] = idx.astype(np.int32) + 1
    return out


def assign_pixels_multisample(
    offsets: OffsetField, centers: CenterList, thing_mask: np.ndarray
) -> np.ndarray:
    """Multi-sample grouping: every sample votes for its nearest center and
    each pixel takes the modal center (vote ties keep the lower center index)."""
    if offsets.kind != SAMPLES:
        raise KindMismatch(f"assign_pixels_multisample requires samples, got {offsets.kind!r}")
    thing_mask = np.asarray(thing_mask, dtype=bool)
    out = np.zeros(thing_mask.shape, dtype=np.int32)
    if len(centers) == 0 or not thing_mask.any():
        return out
    n = int(thing_mask.sum())
    m = offsets.num_samples
    ys, xs = np.nonzero(thing_mask)
    masked = offsets.samples[thing_mask]  # (n, M, 2) as (x, y)
    ty = ys[:, None].astype(np.float64) + masked[..., 1]
    tx = xs[:, None].astype(np.float64) + masked[..., 0]
    targets = np.ascontiguousarray(np.stack([ty, tx], axis=-1).reshape(n * m, 2))
    votes = _kernels.nearest_center(targets, _centers_yx(centers)).reshape(n, m)
    modal = _kernels.mode_votes(np.ascontiguousarray(votes), len(centers))
    out[thing_mask] = modal.astype(np.int32) + 1
    return out


def majority_vote_classes(
    instance_ids: np.ndarray, semantic_argmax: np.ndarray, thing_ids
) -> PanopticMap:
    """Classify segments by majority vote; stuff pixels keep their own class.

    A segment whose modal class is stuff takes the modal thing class among
    its pixels instead, or dissolves to stuff (instance id 0) when it has
    none. Class ties go to the lower class id.
    """
    instance_ids = np.asarray(instance_ids, dtype=np.int32)
    semantic_argmax = np.asarray(semantic_argmax, dtype=np.int32)
    if instance_ids.shape != semantic_argmax.shape:
        raise ShapeMismatch(
            f"instance ids {instance_ids.shape} vs semantic argmax {semantic_argmax.shape}"
        )
    class_id = semantic_argmax.copy()
    instance_out = instance_ids.copy()
    num_instances = int(instance_ids.max())
    if num_instances == 0:
        return PanopticMap(class_id=class_id, instance_id=instance_out)

    num_classes = int(semantic_argmax.max()) + 1
    thing_ids = sorted(int(t) for t in thing_ids)
    is_thing = np.zeros(num_classes, dtype=bool)
    is_thing[[t for t in thing_ids if t < num_classes]] = True

    hist = np.bincount(
        instance_ids.ravel().astype(np.int64) * num_classes + semantic_argmax.ravel(),
        minlength=(num_instances + 1) * num_classes,
    ).reshape(num_instances + 1, num_classes)

    segment_class = np.zeros(num_instances + 1, dtype=np.int32)
    dissolve = np.zeros(num_instances + 1, dtype=bool)
    for k in range(1, num_instances + 1):
        counts = hist[k]
        if counts.sum() == 0:
            continue
        modal = int(counts.argmax())
        if is_thing[modal]:
            segment_class[k] = modal
            continue
        thing_counts = np.where(is_thing, counts, 0)
        if thing_counts.sum() > 0:
            segment_class[k] = int(thing_counts.argmax())
        else:
            dissolve[k] = True

    assigned = instance_ids > 0
    keep = assigned & ~dissolve[instance_ids]
    class_id[keep] = segment_class[instance_ids[keep]]
    instance_out[assigned & dissolve[instance_ids]] = 0
    return PanopticMap(class_id=class_id, instance_id=instance_out)


def total_uncertainty(unc_spa: np.ndarray | None, unc_sem: np.ndarray) -> np.ndarray:
    """Elementwise max fusion; a missing spatial map counts as all zeros."""
    unc_sem = np.asarray(unc_sem, dtype=np.float64)
    if unc_spa is None:
        return unc_sem.copy()
    unc_spa = np.asarray(unc_spa, dtype=np.float64)
    if unc_spa.shape != unc_sem.shape:
        raise ShapeMismatch(f"uncertainty shapes differ: {unc_spa.shape} vs {unc_sem.shape}")
    return np.maximum(unc_spa, unc_sem)


def run_pipeline(
    bundle: PredictionBundle,
    config: PostprocessConfig = PostprocessConfig(),
    semantic_mode: str | None = None,
    max_total_variance: float | None = None,
) -> PipelineResult:
    """Full fusion for one bundle.

    Semantic uncertainty defaults to MCP for logits and to the evidential
    uncertainty for Dirichlet bundles. Gaussian offsets feed their mean
    forward; sample offsets use majority voting. ``max_total_variance``
    scales spatial uncertainty; when omitted, the bundle's own maximum total
    variance is used.
    """
    if bundle.semantic_kind == "dirichlet":
        _, _, probs = semantic.dirichlet_quantities(bundle.semantic)
        mode = semantic_mode or semantic.EVIDENTIAL
        unc_sem = semantic.semantic_uncertainty(bundle.semantic, mode, kind="dirichlet")
    else:
        probs = semantic.softmax_with_temperature(bundle.semantic, bundle.temperature)
        mode = semantic_mode or semantic.MCP
        unc_sem = semantic.semantic_uncertainty(probs, mode, kind="probs")

    argmax = probs.argmax(axis=-1).astype(np.int32)
    thing_mask = np.isin(argmax, sorted(bundle.thing_class_ids))
    centers = find_centers(bundle.center_heatmap, config)

    offsets = bundle.offsets
    unc_spa = None
    if offsets.kind == SAMPLES:
        instance_ids = assign_pixels_multisample(offsets, centers, thing_mask)
        total_var = spatial.total_sample_variance(offsets)
        unc_spa = _normalized_uncertainty(total_var, max_total_variance)
    elif offsets.kind == GAUSSIAN:
        instance_ids = assign_pixels(OffsetField.point(offsets.mean), centers, thing_mask)
        total_var = offsets.var[..., 0] + offsets.var[..., 1]
        unc_spa = _normalized_uncertainty(total_var, max_total_variance)
    else:
        instance_ids = assign_pixels(offsets, centers, thing_mask)

    panoptic = majority_vote_classes(instance_ids, argmax, bundle.thing_class_ids)
    unc_total = total_uncertainty(unc_spa, unc_sem)
    return PipelineResult(
        panoptic=panoptic,
        uncertainty_spatial=unc_spa,
        uncertainty_semantic=unc_sem,
        uncertainty_total=unc_total,
        centers=centers,
        semantic_argmax=argmax,
    )


def _normalized_uncertainty(total_var: np.ndarray, max_total_variance: float | None) -> np.ndarray:
    if max_total_variance is None:
        max_total_variance = float(total_var.max())
        if max_total_variance <= 0.0:
            max_total_variance = 1.0
    elif max_total_variance <= 0.0:
        raise InvariantViolation("max_total_variance must be positive")
    return np.clip(total_var / max_total_variance, 0.0, 1.0)
