"""Segment matching, Panoptic Quality, the uECE / pECE calibration metrics,
energy-score evaluation, offset statistics, and ground-truth substitution
for oracle studies.

Conventions shared by every metric here: segments are maximal
(class, instance) regions, ignore-label pixels are excluded everywhere, and
matching requires equal class and IoU > 0.5 (which makes it unique).
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import _kernels, spatial
from .errors import EmptyInput, EmptyMask, ShapeMismatch
from .postprocess import PanopticMap
from .spatial import OffsetField
from .tensor_io import GroundTruth, PredictionBundle


@dataclass(frozen=True)
class TruePositive:
    pred: tuple  # (class_id, instance_id)
    gt: tuple
    iou: float
    intersection: int
    pred_area: int
    gt_area: int


@dataclass(frozen=True)
class SegmentMatching:
    true_positives: list
    false_positives: list  # pred (class_id, instance_id) keys
    false_negatives: list  # gt keys


def _encode(class_map: np.ndarray, inst_map: np.ndarray) -> np.ndarray:
    return class_map.astype(np.int64) * (1 << 32) + inst_map.astype(np.int64)


def _key(code: int) -> tuple:
    return int(code) >> 32, int(code) & 0xFFFFFFFF


def match_segments(pred: PanopticMap, gt: GroundTruth, ignore_label: int) -> SegmentMatching:
    """Unique matching between predicted and ground-truth segments.

    Pred segments whose every pixel lies in the ignore region have no valid
    area and are dropped entirely (neither TP nor FP).
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    valid = gt.semantic != ignore_label
    pv = _encode(pred.class_id, pred.instance_id)[valid]
    gv = _encode(gt.semantic, gt.instances)[valid]
    p_keys, p_inv, p_areas = np.unique(pv, return_inverse=True, return_counts=True)
    g_keys, g_inv, g_areas = np.unique(gv, return_inverse=True, return_counts=True)

    tps = []
    matched_p = set()
    matched_g = set()
    if len(p_keys) and len(g_keys):
        pair_counts = np.bincount(
            p_inv.astype(np.int64) * len(g_keys) + g_inv,
            minlength=len(p_keys) * len(g_keys),
        ).reshape(len(p_keys), len(g_keys))
        pi_idx, gi_idx = np.nonzero(pair_counts)
        for pi, gi in zip(pi_idx.tolist(), gi_idx.tolist()):
            pc, p_inst = _key(p_keys[pi])
            gc, g_inst = _key(g_keys[gi])
            if pc != gc:
                continue
            inter = int(pair_counts[pi, gi])
            union = int(p_areas[pi]) + int(g_areas[gi]) - inter
            iou = inter / union
            if iou > 0.5:
                tps.append(
                    TruePositive(
                        pred=(pc, p_inst),
                        gt=(gc, g_inst),
                        iou=iou,
                        intersection=inter,
                        pred_area=int(p_areas[pi]),
                        gt_area=int(g_areas[gi]),
                    )
                )
                matched_p.add((pc, p_inst))
                matched_g.add((gc, g_inst))

    tps.sort(key=lambda t: t.pred)
    fps = sorted(_key(k) for k in p_keys if _key(k) not in matched_p)
    fns = sorted(_key(k) for k in g_keys if _key(k) not in matched_g)
    return SegmentMatching(true_positives=tps, false_positives=fps, false_negatives=fns)


@dataclass(frozen=True)
class PQResult:
    pq: float
    sq: float
    rq: float
    true_positives: int
    false_positives: int
    false_negatives: int
    iou_sum: float
    per_class: dict  # class id -> {"pq", "sq", "rq", "tp", "fp", "fn", "iou_sum"}
    class_averaged_pq: float | None
    no_segments: bool


def _pq_triplet(iou_sum: float, tp: int, fp: int, fn: int) -> tuple:
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return 0.0, 0.0, 0.0
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return iou_sum / denom, sq, rq


def panoptic_quality(matching) -> PQResult:
    """Pooled PQ / SQ / RQ plus per-class and class-averaged variants.

    Accepts one SegmentMatching or a sequence of them (pooled evaluation).
    """
    matchings = [matching] if isinstance(matching, SegmentMatching) else list(matching)
    iou_sum = 0.0
    tp = fp = fn = 0
    by_class: dict = {}
    for m in matchings:
        for t in m.true_positives:
            cls = t.pred[0]
            entry = by_class.setdefault(cls, {"iou_sum": 0.0, "tp": 0, "fp": 0, "fn": 0})
            entry["iou_sum"] += t.iou
            entry["tp"] += 1
            iou_sum += t.iou
            tp += 1
        for cls, _ in m.false_positives:
            by_class.setdefault(cls, {"iou_sum": 0.0, "tp": 0, "fp": 0, "fn": 0})["fp"] += 1
            fp += 1
        for cls, _ in m.false_negatives:
            by_class.setdefault(cls, {"iou_sum": 0.0, "tp": 0, "fp": 0, "fn": 0})["fn"] += 1
            fn += 1

    pq, sq, rq = _pq_triplet(iou_sum, tp, fp, fn)
    per_class = {}
    class_pqs = []
    for cls in sorted(by_class):
        e = by_class[cls]
        cpq, csq, crq = _pq_triplet(e["iou_sum"], e["tp"], e["fp"], e["fn"])
        per_class[cls] = {"pq": cpq, "sq": csq, "rq": crq, **e}
        class_pqs.append(cpq)
    return PQResult(
        pq=pq,
        sq=sq,
        rq=rq,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        iou_sum=iou_sum,
        per_class=per_class,
        class_averaged_pq=sum(class_pqs) / len(class_pqs) if class_pqs else None,
        no_segments=(tp + fp + fn) == 0,
    )


# -- calibration --------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationBins:
    """Reliability-diagram statistics over R equally spaced confidence bins.

    Bins are right-closed; confidence 0 falls into the first bin and 1 into
    the last ([1 - 1/R, 1])."""

    num_bins: int
    counts: np.ndarray  # (R,) i64
    conf_means: np.ndarray  # (R,) f64, 0 for empty bins
    acc_means: np.ndarray  # (R,) f64, 0 for empty bins

    def to_records(self) -> list:
        r = self.num_bins
        return [
            {
                "lo": i / r,
                "hi": (i + 1) / r,
                "count": int(self.counts[i]),
                "conf": float(self.conf_means[i]),
                "acc": float(self.acc_means[i]),
            }
            for i in range(r)
        ]


def _as_conf_acc(accuracy, confidence):
    acc = np.asarray(accuracy, dtype=np.float64).ravel()
    conf = np.ascontiguousarray(np.asarray(confidence, dtype=np.float64).ravel())
    if acc.shape != conf.shape:
        raise ShapeMismatch(f"accuracy {acc.shape} vs confidence {conf.shape}")
    return np.ascontiguousarray(acc), conf


def calibration_bins(accuracy, confidence, num_bins: int = 10) -> CalibrationBins:
    acc, conf = _as_conf_acc(accuracy, confidence)
    counts, conf_sums, acc_sums = _kernels.bin_stats(conf, acc, num_bins)
    nonzero = counts > 0
    conf_means = np.where(nonzero, conf_sums / np.maximum(counts, 1), 0.0)
    acc_means = np.where(nonzero, acc_sums / np.maximum(counts, 1), 0.0)
    return CalibrationBins(num_bins=num_bins, counts=counts, conf_means=conf_means, acc_means=acc_means)


def uece(accuracy, confidence, num_bins: int = 10) -> float:
    """Uncertainty-aware ECE: sum_r |B_r|/N * |acc(B_r) - conf(B_r)|."""
    acc, conf = _as_conf_acc(accuracy, confidence)
    n = conf.shape[0]
    if n == 0:
        raise EmptyInput("uece needs at least one pixel")
    counts, conf_sums, acc_sums = _kernels.bin_stats(conf, acc, num_bins)
    total = 0.0
    for r in range(num_bins):
        c = int(counts[r])
        if c:
            total += (c / n) * abs(acc_sums[r] / c - conf_sums[r] / c)
    return total


def _segment_scores(pred, gt, matching, confidence, ignore_label, num_bins, accuracy_of):
    """Per-segment uECE values, true positives first then false positives,
    both in matching order. ``accuracy_of(seg_mask, tp_or_none)`` returns the
    per-pixel accuracy bits for the segment's pixels."""
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.shape != pred.shape:
        raise ShapeMismatch(f"confidence {confidence.shape} vs map {pred.shape}")
    valid = gt.semantic != ignore_label
    pred_code = _encode(pred.class_id, pred.instance_id)
    scores = []
    for tp in matching.true_positives:
        seg = (pred_code == tp.pred[0] * (1 << 32) + tp.pred[1]) & valid
        scores.append(uece(accuracy_of(seg, tp), confidence[seg], num_bins))
    for key in matching.false_positives:
        seg = (pred_code == key[0] * (1 << 32) + key[1]) & valid
        scores.append(uece(accuracy_of(seg, None), confidence[seg], num_bins))
    return scores


def _mean_or_none(scores):
    if not scores:
        return None
    return sum(scores) / len(scores)


def pece_segment_scores(
    pred: PanopticMap, gt: GroundTruth, unc_total, matching, ignore_label, num_bins: int = 10
) -> list:
    """Segment uECE values for pECE: a TP pixel is accurate iff its class is
    correct and it lies in the matched gt segment; FP pixels are never accurate."""
    gt_code = _encode(gt.semantic, gt.instances)

    def accuracy_of(seg, tp):
        if tp is None:
            return np.zeros(int(seg.sum()), dtype=np.float64)
        in_g = gt_code[seg] == tp.gt[0] * (1 << 32) + tp.gt[1]
        class_ok = gt.semantic[seg] == tp.pred[0]
        return (in_g & class_ok).astype(np.float64)

    return _segment_scores(pred, gt, matching, 1.0 - np.asarray(unc_total), ignore_label, num_bins, accuracy_of)


def pece(pred, gt, unc_total, matching, ignore_label, num_bins: int = 10):
    """Average segment uECE over all predicted segments; None when there are none."""
    return _mean_or_none(pece_segment_scores(pred, gt, unc_total, matching, ignore_label, num_bins))


def pece_spa_segment_scores(
    pred: PanopticMap, gt: GroundTruth, unc_spa, matching, ignore_label, num_bins: int = 10
) -> list:
    """Spatial variant: accuracy is pure segment membership (pixel lies in
    both f and its matched g), regardless of pixel class."""
    gt_code = _encode(gt.semantic, gt.instances)

    def accuracy_of(seg, tp):
        if tp is None:
            return np.zeros(int(seg.sum()), dtype=np.float64)
        in_g = gt_code[seg] == tp.gt[0] * (1 << 32) + tp.gt[1]
        return in_g.astype(np.float64)

    return _segment_scores(pred, gt, matching, 1.0 - np.asarray(unc_spa), ignore_label, num_bins, accuracy_of)


def pece_spa(pred, gt, unc_spa, matching, ignore_label, num_bins: int = 10):
    return _mean_or_none(pece_spa_segment_scores(pred, gt, unc_spa, matching, ignore_label, num_bins))


def pece_sem_segment_scores(
    pred: PanopticMap,
    gt: GroundTruth,
    unc_sem,
    matching,
    ignore_label,
    num_bins: int = 10,
    semantic_labels=None,
) -> list:
    """Semantic variant: a pixel is accurate iff its predicted semantic label
    matches the ground truth, regardless of instance association (so FP
    segments can still contain accurate pixels).

    ``semantic_labels`` is the semantic branch's own per-pixel argmax; it
    decouples this metric from the majority-vote fusion, which rewrites
    classes inside instance segments. When omitted, the fused class map is
    used instead.
    """
    labels = pred.class_id if semantic_labels is None else np.asarray(semantic_labels)
    if labels.shape != pred.shape:
        raise ShapeMismatch(f"semantic labels {labels.shape} vs map {pred.shape}")

    def accuracy_of(seg, tp):
        return (labels[seg] == gt.semantic[seg]).astype(np.float64)

    return _segment_scores(pred, gt, matching, 1.0 - np.asarray(unc_sem), ignore_label, num_bins, accuracy_of)


def pece_sem(pred, gt, unc_sem, matching, ignore_label, num_bins: int = 10, semantic_labels=None):
    return _mean_or_none(
        pece_sem_segment_scores(pred, gt, unc_sem, matching, ignore_label, num_bins, semantic_labels)
    )


# -- offset evaluation ---------------------------------------------------------

def energy_score_metric(offsets: OffsetField, gt_offsets, thing_mask) -> float:
    """Mean per-pixel energy score over the masked pixels.

    Sample fields are used as-is, point fields as a single sample; Gaussian
    fields must be passed through sample_gaussian_offsets first.
    """
    return spatial.mean_energy_score(offsets, gt_offsets, thing_mask)


@dataclass(frozen=True)
class OffsetStats:
    avg_length: float
    rmse: float


def offset_stats(offsets: OffsetField, gt_offsets, thing_mask) -> OffsetStats:
    """Mean predicted offset length and RMS error, over all samples of all
    masked pixels (gaussian fields contribute their mean as one prediction)."""
    if offsets.kind == spatial.GAUSSIAN:
        offsets = OffsetField.point(offsets.mean)
    offsets = offsets.as_samples()
    thing_mask = np.asarray(thing_mask, dtype=bool)
    gt_offsets = np.asarray(gt_offsets, dtype=np.float64)
    preds = offsets.samples[thing_mask]  # (n, M, 2)
    if preds.shape[0] == 0:
        raise EmptyMask("offset_stats needs at least one masked pixel")
    err = preds - gt_offsets[thing_mask][:, None, :]
    lengths = np.sqrt(preds[..., 0] ** 2 + preds[..., 1] ** 2)
    sq_err = err[..., 0] ** 2 + err[..., 1] ** 2
    return OffsetStats(
        avg_length=_kernels.tree_mean(lengths),
        rmse=float(np.sqrt(_kernels.tree_mean(sq_err))),
    )


# -- ground-truth geometry and oracle substitution -----------------------------

def instance_mass_centers(gt: GroundTruth) -> dict:
    """Instance id -> (row, col) center of mass rounded to the nearest pixel."""
    inst = gt.instances
    k = int(inst.max())
    if k == 0:
        return {}
    flat = inst.ravel().astype(np.int64)
    ys, xs = np.indices(gt.shape)
    counts = np.bincount(flat, minlength=k + 1)
    sy = np.bincount(flat, weights=ys.ravel().astype(np.float64), minlength=k + 1)
    sx = np.bincount(flat, weights=xs.ravel().astype(np.float64), minlength=k + 1)
    centers = {}
    for i in range(1, k + 1):
        if counts[i]:
            centers[i] = (
                int(np.floor(sy[i] / counts[i] + 0.5)),
                int(np.floor(sx[i] / counts[i] + 0.5)),
            )
    return centers


def gt_offset_field(gt: GroundTruth) -> tuple:
    """Ground-truth (x, y) offsets pointing at rounded instance mass centers,
    zero on stuff pixels. Returns (offsets (H, W, 2), thing_mask (H, W))."""
    centers = instance_mass_centers(gt)
    h, w = gt.shape
    offsets = np.zeros((h, w, 2), dtype=np.float64)
    thing_mask = gt.instances > 0
    if centers:
        k = max(centers)
        cy = np.zeros(k + 1)
        cx = np.zeros(k + 1)
        for i, (y, x) in centers.items():
            cy[i] = y
            cx[i] = x
        ys, xs = np.indices(gt.shape)
        inst = gt.instances
        offsets[..., 0] = np.where(thing_mask, cx[inst] - xs, 0.0)
        offsets[..., 1] = np.where(thing_mask, cy[inst] - ys, 0.0)
    return offsets, thing_mask


def oracle_substitute(
    bundle: PredictionBundle,
    gt: GroundTruth,
    use_gt_centers: bool = False,
    use_gt_semantics: bool = False,
) -> PredictionBundle:
    """Replace the center heatmap and/or the semantic head output with their
    ground-truth equivalents; offsets are never touched."""
    if bundle.shape != gt.shape:
        raise ShapeMismatch(f"bundle {bundle.shape} vs gt {gt.shape}")
    if not (use_gt_centers or use_gt_semantics):
        return bundle
    replacements = {}
    if use_gt_centers:
        heat = np.zeros(gt.shape, dtype=np.float64)
        for y, x in instance_mass_centers(gt).values():
            heat[y, x] = 1.0
        replacements["center_heatmap"] = heat
    if use_gt_semantics:
        c = bundle.num_classes
        classes = np.where(
            (gt.semantic >= 0) & (gt.semantic < c), gt.semantic, 0
        )  # ignore pixels get an arbitrary class; they are excluded downstream
        onehot = np.eye(c, dtype=np.float64)[classes]
        if bundle.semantic_kind == "dirichlet":
            replacements["semantic"] = 1.0 + 1e6 * onehot
        else:
            replacements["semantic"] = np.where(onehot > 0, 50.0, -50.0) * bundle.temperature
    return dataclasses.replace(bundle, **replacements)


# -- report ---------------------------------------------------------------------

@dataclass
class MetricReport:
    """All evaluation outputs for one image or a pooled set, JSON-serializable
    with stable field names."""

    pq: float
    sq: float
    rq: float
    pece: float | None
    pece_spa: float | None
    pece_sem: float | None
    energy_score: float | None
    avg_offset_length: float | None
    offset_rmse: float | None
    uece: float | None
    bins: list
    num_segments: int
    pq_per_class: dict
    pq_class_averaged: float | None
    no_segments: bool
    config: dict

    def to_dict(self) -> dict:
        return {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "pece": self.pece,
            "pece_spa": self.pece_spa,
            "pece_sem": self.pece_sem,
            "energy_score": self.energy_score,
            "avg_offset_length": self.avg_offset_length,
            "offset_rmse": self.offset_rmse,
            "uece": self.uece,
            "bins": self.bins,
            "num_segments": self.num_segments,
            "pq_per_class": {str(k): v for k, v in self.pq_per_class.items()},
            "pq_class_averaged": self.pq_class_averaged,
            "no_segments": self.no_segments,
            "config": self.config,
        }
