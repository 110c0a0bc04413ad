"""Seeded synthetic scenes with exact ground truth and controllable noise,
plus naive reference implementations used as oracles in the test suite.

Scenes are rectangles and discs placed on a jittered grid (one shape per
cell), which guarantees non-overlap, keeps centers far enough apart for the
default NMS window, and reaches high thing coverage so class areas stay
roughly balanced.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInfeasible, InvariantViolation
from .metrics import gt_offset_field, instance_mass_centers
from .postprocess import PanopticMap
from .spatial import OffsetField
from .tensor_io import GroundTruth, PredictionBundle

_CELL_MARGIN = 4
_MIN_CELL = 16
_MAX_CONFIDENCE = 1.0 - 1e-4

PERFECT = "perfect"
OVERCONFIDENT = "overconfident"
UNDERCONFIDENT = "underconfident"


@dataclass(frozen=True)
class SceneConfig:
    height: int = 96
    width: int = 96
    num_instances: int = 6
    num_classes: int = 5
    num_thing_classes: int = 3
    flip_rate: float = 0.0  # mean semantic error rate
    offset_noise: float = 0.0  # isotropic Gaussian sigma, pixels
    heatmap_blur: float = 0.0  # Gaussian bump sigma, pixels; 0 = impulses
    calibration: str = PERFECT
    calibration_factor: float = 1.0  # logit scale for over/underconfident
    offsets_kind: str = "point"
    num_samples: int = 10
    semantic_kind: str = "logits"
    ignore_label: int = 255
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvariantViolation("scene dimensions must be positive")
        if not 0.0 <= self.flip_rate <= 1.0:
            raise InvariantViolation("flip_rate must lie in [0, 1]")
        if self.offset_noise < 0.0 or self.heatmap_blur < 0.0:
            raise InvariantViolation("noise sigmas must be >= 0")
        if self.num_classes < 2:
            raise InvariantViolation("need at least 2 classes")
        if not 1 <= self.num_thing_classes < self.num_classes:
            raise InvariantViolation("need 1 <= num_thing_classes < num_classes")
        if self.calibration not in (PERFECT, OVERCONFIDENT, UNDERCONFIDENT):
            raise InvariantViolation(f"unknown calibration mode {self.calibration!r}")
        if not self.calibration_factor > 0.0:
            raise InvariantViolation("calibration_factor must be positive")
        if self.offsets_kind not in ("point", "gaussian", "samples"):
            raise InvariantViolation(f"unknown offsets_kind {self.offsets_kind!r}")
        if self.num_samples < 1:
            raise InvariantViolation("num_samples must be >= 1")
        if self.semantic_kind not in ("logits", "dirichlet"):
            raise InvariantViolation(f"unknown semantic_kind {self.semantic_kind!r}")
        if self.num_instances < 0:
            raise InvariantViolation("num_instances must be >= 0")
        if self.ignore_label < self.num_classes:
            raise InvariantViolation("ignore_label must lie outside [0, num_classes)")

    @property
    def thing_ids(self) -> frozenset:
        return frozenset(range(self.num_classes - self.num_thing_classes, self.num_classes))

    @property
    def stuff_ids(self) -> tuple:
        return tuple(range(self.num_classes - self.num_thing_classes))


@dataclass(frozen=True)
class SyntheticScene:
    config: SceneConfig
    gt: GroundTruth
    bundle: PredictionBundle
    true_offset_mean: np.ndarray  # (H, W, 2) ground-truth offsets
    true_offset_sigma: float
    centers: dict  # instance id -> (row, col)
    mean_gt_offset_length: float

    @property
    def gt_panoptic_map(self) -> PanopticMap:
        return PanopticMap(
            class_id=self.gt.semantic.astype(np.int32),
            instance_id=self.gt.instances.astype(np.int32),
        )


def _paint_instances(cfg: SceneConfig, rng) -> tuple:
    classes = np.zeros((cfg.height, cfg.width), dtype=np.int32)
    instances = np.zeros((cfg.height, cfg.width), dtype=np.int32)

    num_stuff = len(cfg.stuff_ids)
    if num_stuff > 1:
        band = max(cfg.height // num_stuff, 1)
        for b, stuff_class in enumerate(cfg.stuff_ids):
            lo = b * band
            hi = cfg.height if b == num_stuff - 1 else (b + 1) * band
            classes[lo:hi, :] = stuff_class

    n = cfg.num_instances
    if n == 0:
        return classes, instances
    g = math.ceil(math.sqrt(n))
    cell_h = cfg.height // g
    cell_w = cfg.width // g
    if min(cell_h, cell_w) < _MIN_CELL:
        raise ConfigInfeasible(
            f"{n} instances need a {g}x{g} grid of >= {_MIN_CELL}px cells; "
            f"image {cfg.height}x{cfg.width} is too small"
        )
    cells = rng.permutation(g * g)[:n]
    thing_ids = sorted(cfg.thing_ids)
    class_perm = rng.permutation(n)
    ys_grid, xs_grid = np.indices((cfg.height, cfg.width))
    for k in range(n):
        cy0 = int(cells[k] // g) * cell_h
        cx0 = int(cells[k] % g) * cell_w
        inner_h = cell_h - 2 * _CELL_MARGIN
        inner_w = cell_w - 2 * _CELL_MARGIN
        cls = thing_ids[int(class_perm[k]) % len(thing_ids)]
        if rng.random() < 0.5:  # rectangle
            h = int(rng.integers(max(6, inner_h // 3), inner_h + 1))
            w = int(rng.integers(max(6, inner_w // 3), inner_w + 1))
            y = cy0 + _CELL_MARGIN + int(rng.integers(0, inner_h - h + 1))
            x = cx0 + _CELL_MARGIN + int(rng.integers(0, inner_w - w + 1))
            classes[y : y + h, x : x + w] = cls
            instances[y : y + h, x : x + w] = k + 1
        else:  # disc
            rmax = min(inner_h, inner_w) // 2
            radius = int(rng.integers(max(3, rmax // 2), rmax + 1))
            y = cy0 + _CELL_MARGIN + radius + int(rng.integers(0, inner_h - 2 * radius + 1))
            x = cx0 + _CELL_MARGIN + radius + int(rng.integers(0, inner_w - 2 * radius + 1))
            disc = (ys_grid - y) ** 2 + (xs_grid - x) ** 2 <= radius * radius
            classes[disc] = cls
            instances[disc] = k + 1
    return classes, instances


def _flip_targets(cfg: SceneConfig, gt_classes: np.ndarray, rng) -> np.ndarray:
    """Per-pixel wrong class, uniform within the pixel's thing/stuff pool.

    Pool-preserving flips keep the thing mask equal to the ground-truth one
    and, with balanced pool areas, keep the prediction calibrated per
    predicted class, not just marginally. Pools with a single class fall back
    to a uniform draw over all other classes.
    """
    c = cfg.num_classes
    nt = cfg.num_thing_classes
    ns = c - nt
    thing_base = c - nt
    is_thing = gt_classes >= thing_base

    global_r = rng.integers(0, c - 1, size=gt_classes.shape)
    global_other = global_r + (global_r >= gt_classes)
    if nt >= 2:
        r = rng.integers(0, nt - 1, size=gt_classes.shape)
        pos = gt_classes - thing_base
        thing_other = thing_base + r + (r >= pos)
    else:
        thing_other = global_other
    if ns >= 2:
        r = rng.integers(0, ns - 1, size=gt_classes.shape)
        stuff_other = r + (r >= gt_classes)
    else:
        stuff_other = global_other
    return np.where(is_thing, thing_other, stuff_other)


def _semantic_tensor(cfg: SceneConfig, gt_classes: np.ndarray, rng) -> np.ndarray:
    c = cfg.num_classes
    if cfg.flip_rate == 0.0:
        drawn = gt_classes
        onehot = np.eye(c, dtype=np.float64)[drawn]
        logits = np.where(onehot > 0, 50.0, -50.0)
        confidence = None
    else:
        hi = _MAX_CONFIDENCE
        lo = min(max(1.0 - 2.0 * cfg.flip_rate, 1.0 / c + 0.05), hi)
        confidence = rng.uniform(lo, hi, size=gt_classes.shape)
        keep = rng.random(size=gt_classes.shape) < confidence
        other = _flip_targets(cfg, gt_classes, rng)
        drawn = np.where(keep, gt_classes, other).astype(np.int64)
        onehot = np.eye(c, dtype=np.float64)[drawn]
        probs = ((1.0 - confidence) / (c - 1))[..., None] * (1.0 - onehot) + confidence[..., None] * onehot
        logits = np.log(probs)

    if cfg.semantic_kind == "dirichlet":
        if confidence is None:
            alpha = 1.0 + 1e8 * onehot
        else:
            strength = c / (1.0 - confidence)
            alpha_other = np.full_like(onehot, c / (c - 1.0))
            alpha = np.where(onehot > 0, confidence[..., None] * strength[..., None], alpha_other)
        if cfg.calibration == OVERCONFIDENT:
            alpha = 1.0 + (alpha - 1.0) * cfg.calibration_factor
        elif cfg.calibration == UNDERCONFIDENT:
            alpha = 1.0 + (alpha - 1.0) / cfg.calibration_factor
        return alpha

    if cfg.calibration == OVERCONFIDENT:
        logits = logits * cfg.calibration_factor
    elif cfg.calibration == UNDERCONFIDENT:
        logits = logits / cfg.calibration_factor
    return logits


def _heatmap(cfg: SceneConfig, centers: dict) -> np.ndarray:
    heat = np.zeros((cfg.height, cfg.width), dtype=np.float64)
    if not centers:
        return heat
    if cfg.heatmap_blur == 0.0:
        for y, x in centers.values():
            heat[y, x] = 1.0
        return heat
    ys, xs = np.indices(heat.shape)
    s2 = 2.0 * cfg.heatmap_blur**2
    for y, x in centers.values():
        bump = np.exp(-((ys - y) ** 2 + (xs - x) ** 2) / s2)
        np.maximum(heat, bump, out=heat)
    return heat


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    """Build one scene deterministically from cfg.seed.

    With zero noise and perfect calibration the bundle decodes back to the
    ground truth exactly.
    """
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    classes, instances = _paint_instances(cfg, rng)
    gt = GroundTruth(panoptic=np.stack([classes, instances], axis=-1).astype(np.int32))

    centers = instance_mass_centers(gt)
    gt_offsets, thing_mask = gt_offset_field(gt)
    heat = _heatmap(cfg, centers)
    semantic = _semantic_tensor(cfg, classes.astype(np.int64), rng)

    sigma = cfg.offset_noise
    if cfg.offsets_kind == "point":
        offsets = OffsetField.point(gt_offsets + sigma * rng.standard_normal(gt_offsets.shape))
    elif cfg.offsets_kind == "gaussian":
        mean = gt_offsets + sigma * rng.standard_normal(gt_offsets.shape)
        var = np.full_like(mean, max(sigma * sigma, 1e-6))
        offsets = OffsetField.gaussian(mean, var)
    else:
        shape = gt_offsets.shape[:2] + (cfg.num_samples, 2)
        samples = gt_offsets[:, :, None, :] + sigma * rng.standard_normal(shape)
        offsets = OffsetField.from_samples(samples)

    bundle = PredictionBundle(
        semantic_kind=cfg.semantic_kind,
        semantic=semantic,
        center_heatmap=heat,
        offsets=offsets,
        thing_class_ids=cfg.thing_ids,
        ignore_label=cfg.ignore_label,
        temperature=1.0,
    )
    lengths = np.sqrt(gt_offsets[..., 0] ** 2 + gt_offsets[..., 1] ** 2)[thing_mask]
    return SyntheticScene(
        config=cfg,
        gt=gt,
        bundle=bundle,
        true_offset_mean=gt_offsets,
        true_offset_sigma=sigma,
        centers=centers,
        mean_gt_offset_length=float(lengths.mean()) if lengths.size else 0.0,
    )


# -- brute-force oracles --------------------------------------------------------

def brute_force_pq(pred: PanopticMap, gt: GroundTruth, ignore_label: int) -> float:
    """Naive PQ: dict-based pixel counting, exhaustive pred x gt IoU, direct
    formula. Independent of the metrics module; small images only."""
    h, w = gt.shape
    pred_area: dict = {}
    gt_area: dict = {}
    inter: dict = {}
    for y in range(h):
        for x in range(w):
            g_cls = int(gt.semantic[y, x])
            if g_cls == ignore_label:
                continue
            pk = (int(pred.class_id[y, x]), int(pred.instance_id[y, x]))
            gk = (g_cls, int(gt.instances[y, x]))
            pred_area[pk] = pred_area.get(pk, 0) + 1
            gt_area[gk] = gt_area.get(gk, 0) + 1
            inter[(pk, gk)] = inter.get((pk, gk), 0) + 1

    matches = {}
    for (pk, gk), count in inter.items():
        if pk[0] != gk[0]:
            continue
        iou = count / (pred_area[pk] + gt_area[gk] - count)
        if iou > 0.5:
            matches[pk] = (gk, iou)

    iou_sum = 0.0
    for pk in sorted(matches):
        iou_sum += matches[pk][1]
    tp = len(matches)
    fp = len(pred_area) - tp
    fn = len(gt_area) - len({gk for gk, _ in matches.values()})
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return 0.0
    return iou_sum / denom


def brute_force_uece(accuracy, confidence, num_bins: int = 10) -> float:
    """Naive uECE: per-pixel bin assignment and an explicit double loop over
    bins and pixels. Independent of the metrics module."""
    acc = [float(a) for a in np.asarray(accuracy, dtype=np.float64).ravel()]
    conf = [float(c) for c in np.asarray(confidence, dtype=np.float64).ravel()]
    n = len(conf)
    if n == 0:
        raise InvariantViolation("brute_force_uece needs at least one pixel")
    idx = []
    for c in conf:
        i = math.ceil(c * num_bins) - 1
        idx.append(min(max(i, 0), num_bins - 1))
    total = 0.0
    for r in range(num_bins):
        count = 0
        acc_sum = 0.0
        conf_sum = 0.0
        for i in range(n):
            if idx[i] == r:
                count += 1
                acc_sum += acc[i]
                conf_sum += conf[i]
        if count:
            total += (count / n) * abs(acc_sum / count - conf_sum / count)
    return total
