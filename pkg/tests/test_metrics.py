import numpy as np
import pytest

from panu.errors import EmptyInput, EmptyMask, KindMismatch
from panu.metrics import (
    MetricReport,
    calibration_bins,
    energy_score_metric,
    gt_offset_field,
    instance_mass_centers,
    match_segments,
    offset_stats,
    oracle_substitute,
    panoptic_quality,
    pece,
    pece_sem,
    pece_spa,
    uece,
)
from panu.postprocess import PanopticMap, run_pipeline
from panu.spatial import OffsetField
from panu.synth import SceneConfig, brute_force_uece, generate_scene
from panu.tensor_io import GroundTruth

RNG = np.random.default_rng(2718)
IGNORE = 255


def _pan(classes, instances):
    return PanopticMap(
        class_id=np.asarray(classes, dtype=np.int32),
        instance_id=np.asarray(instances, dtype=np.int32),
    )


def _gt(classes, instances):
    return GroundTruth(
        panoptic=np.stack(
            [np.asarray(classes, dtype=np.int32), np.asarray(instances, dtype=np.int32)], axis=-1
        )
    )


# -- matching -----------------------------------------------------------------------

def test_match_identical_maps():
    classes = RNG.integers(0, 3, size=(8, 8))
    instances = np.where(classes == 2, RNG.integers(1, 3, size=(8, 8)), 0)
    pred = _pan(classes, instances)
    gt = _gt(classes, instances)
    m = match_segments(pred, gt, IGNORE)
    assert not m.false_positives and not m.false_negatives
    assert all(t.iou == 1.0 for t in m.true_positives)


def test_match_disjoint_maps():
    pred = _pan(np.full((4, 4), 1), np.zeros((4, 4)))
    gt = _gt(np.full((4, 4), 2), np.zeros((4, 4)))
    m = match_segments(pred, gt, IGNORE)
    assert not m.true_positives
    assert m.false_positives == [(1, 0)]
    assert m.false_negatives == [(2, 0)]


def test_match_partial_overlap_iou():
    # pred covers 60 of 100 gt pixels of class 1, nothing else
    classes_gt = np.zeros((10, 20), dtype=np.int32)
    classes_gt[:, :10] = 1
    inst_gt = np.where(classes_gt == 1, 1, 0)
    classes_pred = np.zeros((10, 20), dtype=np.int32)
    classes_pred[:6, :10] = 1
    inst_pred = np.where(classes_pred == 1, 1, 0)
    m = match_segments(_pan(classes_pred, inst_pred), _gt(classes_gt, inst_gt), IGNORE)
    tp = [t for t in m.true_positives if t.pred[0] == 1]
    assert len(tp) == 1
    assert tp[0].iou == pytest.approx(0.6)


def test_match_ignore_pixels_excluded():
    classes_gt = np.full((4, 4), IGNORE, dtype=np.int32)
    classes_gt[:2, :] = 1
    inst_gt = np.where(classes_gt == 1, 1, 0)
    pred_classes = np.full((4, 4), 1, dtype=np.int32)
    pred_inst = np.ones((4, 4), dtype=np.int32)
    m = match_segments(_pan(pred_classes, pred_inst), _gt(classes_gt, inst_gt), IGNORE)
    # outside the ignore region pred == gt, so IoU is exactly 1
    assert len(m.true_positives) == 1
    assert m.true_positives[0].iou == 1.0


def test_match_pred_segment_entirely_in_ignore_dropped():
    classes_gt = np.zeros((4, 4), dtype=np.int32)
    classes_gt[2:, :] = IGNORE
    pred_classes = np.zeros((4, 4), dtype=np.int32)
    pred_classes[2:, :] = 1
    pred_inst = np.where(pred_classes == 1, 1, 0)
    m = match_segments(_pan(pred_classes, pred_inst), _gt(classes_gt, np.zeros((4, 4))), IGNORE)
    assert m.false_positives == []


# -- panoptic quality ------------------------------------------------------------------

def test_pq_perfect():
    classes = RNG.integers(0, 3, size=(8, 8))
    instances = np.where(classes == 2, 1, 0)
    m = match_segments(_pan(classes, instances), _gt(classes, instances), IGNORE)
    result = panoptic_quality(m)
    assert result.pq == 1.0 and result.sq == 1.0 and result.rq == 1.0


def test_pq_formula_spot():
    # one TP at IoU 0.6 + one FP + one FN: PQ = 0.6 / (1 + 0.5 + 0.5) = 0.3
    classes_gt = np.zeros((10, 30), dtype=np.int32)
    classes_gt[:, :10] = 1  # matched gt
    classes_gt[:, 20:] = 2  # missed gt (FN)
    inst_gt = np.where(classes_gt > 0, 1, 0)
    classes_pred = np.zeros((10, 30), dtype=np.int32)
    classes_pred[:6, :10] = 1  # 60-pixel overlap with the 100-pixel gt
    classes_pred[:, 10:20] = 3  # unmatched pred (FP)
    inst_pred = np.where(classes_pred > 0, 1, 0)
    m = match_segments(_pan(classes_pred, inst_pred), _gt(classes_gt, inst_gt), IGNORE)
    tps = [t for t in m.true_positives if t.pred[0] == 1]
    fps = [k for k in m.false_positives if k[0] != 0]
    fns = [k for k in m.false_negatives if k[0] != 0]
    assert len(tps) == 1 and len(fps) == 1 and len(fns) == 1
    from panu.metrics import SegmentMatching

    sub = SegmentMatching(true_positives=tps, false_positives=fps, false_negatives=fns)
    assert panoptic_quality(sub).pq == pytest.approx(0.3)


def test_pq_empty_prediction():
    classes_gt = np.zeros((4, 4), dtype=np.int32)
    classes_gt[1:3, 1:3] = 1
    inst_gt = np.where(classes_gt == 1, 1, 0)
    pred = _pan(np.full((4, 4), IGNORE - 1), np.zeros((4, 4)))  # classes not in gt
    m = match_segments(pred, _gt(classes_gt, inst_gt), IGNORE)
    assert panoptic_quality(m).pq == 0.0


def test_pq_identity_and_label_invariance():
    for seed in range(10):
        cfg = SceneConfig(height=64, width=64, num_instances=4, flip_rate=0.25, seed=seed)
        scene = generate_scene(cfg)
        res = run_pipeline(scene.bundle)
        m = match_segments(res.panoptic, scene.gt, IGNORE)
        r = panoptic_quality(m)
        assert r.pq == pytest.approx(r.sq * r.rq, abs=1e-12)
        # permute instance ids
        inst = res.panoptic.instance_id
        perm = np.concatenate([[0], RNG.permutation(np.arange(1, inst.max() + 2))])
        permuted = _pan(res.panoptic.class_id, perm[inst])
        m2 = match_segments(permuted, scene.gt, IGNORE)
        assert panoptic_quality(m2).pq == pytest.approx(r.pq, abs=1e-14)


def test_pq_no_segments_flag():
    pred = _pan(np.zeros((2, 2)), np.zeros((2, 2)))
    gt = _gt(np.full((2, 2), IGNORE), np.zeros((2, 2)))
    m = match_segments(pred, gt, IGNORE)
    r = panoptic_quality(m)
    assert r.no_segments and r.pq == 0.0


# -- uECE --------------------------------------------------------------------------------

def test_uece_spot_values():
    n = 50
    assert uece(np.ones(n), np.ones(n)) == 0.0
    assert uece(np.zeros(n), np.ones(n)) == 1.0
    acc = np.zeros(n)
    acc[:40] = 1.0  # exactly 80% correct at conf 0.8
    assert uece(acc, np.full(n, 0.8)) == pytest.approx(0.0, abs=1e-15)


def test_uece_matches_brute_force_exactly():
    for _ in range(30):
        n = int(RNG.integers(1, 400))
        conf = RNG.random(n)
        conf[RNG.random(n) < 0.2] = RNG.choice([0.0, 0.1, 0.5, 0.7, 1.0])
        acc = (RNG.random(n) < conf).astype(float)
        for bins in (1, 5, 10, 15):
            assert uece(acc, conf, bins) == brute_force_uece(acc, conf, bins)


def test_uece_empty_input():
    with pytest.raises(EmptyInput):
        uece(np.zeros(0), np.zeros(0))


def test_calibration_bins_records():
    bins = calibration_bins(np.array([1.0, 0.0]), np.array([0.95, 0.85]), 10)
    records = bins.to_records()
    assert len(records) == 10
    assert records[9]["count"] == 1 and records[8]["count"] == 1
    assert records[9]["acc"] == 1.0 and records[8]["acc"] == 0.0


# -- pECE family --------------------------------------------------------------------------

def _perfect_case():
    classes = np.zeros((6, 6), dtype=np.int32)
    classes[1:4, 1:4] = 2
    inst = np.where(classes == 2, 1, 0)
    return _pan(classes, inst), _gt(classes, inst)


def test_pece_perfect_confident_is_zero():
    pred, gt = _perfect_case()
    m = match_segments(pred, gt, IGNORE)
    unc = np.zeros((6, 6))
    assert pece(pred, gt, unc, m, IGNORE) == 0.0
    assert pece_spa(pred, gt, unc, m, IGNORE) == 0.0
    assert pece_sem(pred, gt, unc, m, IGNORE) == 0.0


def test_pece_fp_with_zero_confidence_is_zero():
    pred, gt_good = _perfect_case()
    gt_classes = np.zeros((6, 6), dtype=np.int32)  # gt has no instance at all
    gt = _gt(gt_classes, np.zeros((6, 6)))
    m = match_segments(pred, gt, IGNORE)
    assert ((2, 1)) in m.false_positives
    unc = np.where(pred.instance_id == 1, 1.0, 0.0)  # conf 0 inside the FP
    from panu.metrics import pece_segment_scores

    values = pece_segment_scores(pred, gt, unc, m, IGNORE)
    fp_index = len(m.true_positives) + m.false_positives.index((2, 1))
    assert values[fp_index] == 0.0


def test_pece_fp_fully_confident_is_one():
    pred, _ = _perfect_case()
    gt = _gt(np.zeros((6, 6), dtype=np.int32), np.zeros((6, 6)))
    m = match_segments(pred, gt, IGNORE)
    from panu.metrics import pece_segment_scores

    values = pece_segment_scores(pred, gt, np.zeros((6, 6)), m, IGNORE)
    fp_index = len(m.true_positives) + m.false_positives.index((2, 1))
    assert values[fp_index] == 1.0


def test_pece_spa_iou_06_conf_06_segment_zero():
    # f has 100 pixels, 60 overlap its g (g subset of f): IoU 0.6, acc rate 0.6
    classes_pred = np.zeros((10, 20), dtype=np.int32)
    classes_pred[:, :10] = 1
    inst_pred = np.where(classes_pred == 1, 1, 0)
    classes_gt = np.zeros((10, 20), dtype=np.int32)
    classes_gt[:6, :10] = 1
    inst_gt = np.where(classes_gt == 1, 1, 0)
    pred, gt = _pan(classes_pred, inst_pred), _gt(classes_gt, inst_gt)
    m = match_segments(pred, gt, IGNORE)
    tp = [t for t in m.true_positives if t.pred == (1, 1)]
    assert tp and tp[0].iou == pytest.approx(0.6)
    unc_spa = np.where(inst_pred == 1, 0.4, 0.0)  # conf 0.6 over f
    from panu.metrics import pece_spa_segment_scores

    values = pece_spa_segment_scores(pred, gt, unc_spa, m, IGNORE)
    tp_index = m.true_positives.index(tp[0])
    assert values[tp_index] == pytest.approx(0.0, abs=1e-12)


def test_pece_sem_all_wrong_fully_confident():
    classes = np.zeros((4, 4), dtype=np.int32)
    pred = _pan(classes + 1, np.zeros((4, 4)))
    gt = _gt(classes, np.zeros((4, 4)))
    m = match_segments(pred, gt, IGNORE)
    assert pece_sem(pred, gt, np.zeros((4, 4)), m, IGNORE) == 1.0


def test_pece_sem_half_correct_conf_half():
    # a single predicted segment with exactly half its pixels correct
    classes_gt = np.zeros((4, 8), dtype=np.int32)
    classes_gt[2:, :] = 1
    pred = _pan(np.zeros((4, 8)), np.zeros((4, 8)))
    gt = _gt(classes_gt, np.zeros((4, 8)))
    m = match_segments(pred, gt, IGNORE)
    unc = np.full((4, 8), 0.5)
    from panu.metrics import pece_sem_segment_scores

    values = pece_sem_segment_scores(pred, gt, unc, m, IGNORE)
    assert len(values) == 1
    assert values[0] == pytest.approx(0.0, abs=1e-12)


def test_pece_sem_instance_reassignment_invariance():
    cfg = SceneConfig(height=64, width=64, num_instances=4, flip_rate=0.2, seed=4)
    scene = generate_scene(cfg)
    res = run_pipeline(scene.bundle)
    m = match_segments(res.panoptic, scene.gt, IGNORE)
    base = pece_sem(
        res.panoptic, scene.gt, res.uncertainty_semantic, m, IGNORE,
        semantic_labels=res.semantic_argmax,
    )
    # relabel instances without moving boundaries or classes; the matching is
    # recomputed but identifies the same pixel sets, so pece_sem cannot move
    inst = res.panoptic.instance_id
    perm = np.concatenate([[0], np.arange(1, inst.max() + 2)[::-1]])
    relabeled = _pan(res.panoptic.class_id, perm[inst])
    m2 = match_segments(relabeled, scene.gt, IGNORE)
    again = pece_sem(
        relabeled, scene.gt, res.uncertainty_semantic, m2, IGNORE,
        semantic_labels=res.semantic_argmax,
    )
    assert again == pytest.approx(base, abs=1e-15)


def test_pece_none_when_no_segments():
    pred = _pan(np.zeros((2, 2)), np.zeros((2, 2)))
    gt = _gt(np.full((2, 2), IGNORE), np.zeros((2, 2)))
    m = match_segments(pred, gt, IGNORE)
    assert pece(pred, gt, np.zeros((2, 2)), m, IGNORE) is None


def test_pece_values_in_unit_interval():
    for seed in range(5):
        cfg = SceneConfig(height=64, width=64, num_instances=4, flip_rate=0.3, seed=seed)
        scene = generate_scene(cfg)
        res = run_pipeline(scene.bundle)
        m = match_segments(res.panoptic, scene.gt, IGNORE)
        for value in (
            pece(res.panoptic, scene.gt, res.uncertainty_total, m, IGNORE),
            pece_spa(res.panoptic, scene.gt, np.zeros((64, 64)), m, IGNORE),
            pece_sem(res.panoptic, scene.gt, res.uncertainty_semantic, m, IGNORE),
        ):
            assert value is None or 0.0 <= value <= 1.0


# -- offset metrics --------------------------------------------------------------------

def test_energy_score_metric_spot():
    samples = np.zeros((1, 1, 2, 2))
    samples[0, 0] = [[0.0, 0.0], [2.0, 0.0]]
    field = OffsetField.from_samples(samples)
    score = energy_score_metric(field, np.zeros((1, 1, 2)), np.ones((1, 1), bool))
    assert score == pytest.approx(0.5, abs=1e-15)


def test_energy_score_metric_point_error_five():
    mean = np.zeros((3, 3, 2))
    gt = np.zeros((3, 3, 2))
    gt[..., 1] = 5.0
    field = OffsetField.point(mean)
    assert energy_score_metric(field, gt, np.ones((3, 3), bool)) == pytest.approx(5.0)


def test_energy_score_metric_gaussian_rejected():
    field = OffsetField.gaussian(np.zeros((1, 1, 2)), np.ones((1, 1, 2)))
    with pytest.raises(KindMismatch):
        energy_score_metric(field, np.zeros((1, 1, 2)), np.ones((1, 1), bool))


def test_offset_stats_exact_prediction():
    gt = RNG.normal(size=(4, 4, 2)) * 3
    field = OffsetField.point(gt.copy())
    stats = offset_stats(field, gt, np.ones((4, 4), bool))
    assert stats.rmse == 0.0
    expected = np.sqrt(gt[..., 0] ** 2 + gt[..., 1] ** 2).mean()
    assert stats.avg_length == pytest.approx(expected, rel=1e-12)


def test_offset_stats_345_triangle():
    gt = np.array([[[3.0, 4.0]]])
    field = OffsetField.point(np.zeros((1, 1, 2)))
    stats = offset_stats(field, gt, np.ones((1, 1), bool))
    assert stats.avg_length == 0.0
    assert stats.rmse == pytest.approx(5.0)


def test_offset_stats_on_synth_scene():
    scene = generate_scene(SceneConfig(seed=9))
    gt_off, mask = gt_offset_field(scene.gt)
    stats = offset_stats(OffsetField.point(gt_off), gt_off, mask)
    assert stats.avg_length == pytest.approx(scene.mean_gt_offset_length, rel=1e-9)
    assert stats.rmse == 0.0


def test_offset_stats_empty_mask():
    with pytest.raises(EmptyMask):
        offset_stats(OffsetField.point(np.zeros((2, 2, 2))), np.zeros((2, 2, 2)), np.zeros((2, 2), bool))


# -- oracle substitution ----------------------------------------------------------------

def test_oracle_substitute_identity():
    scene = generate_scene(SceneConfig(seed=2))
    assert oracle_substitute(scene.bundle, scene.gt) is scene.bundle


def test_oracle_substitute_full_oracle_reaches_pq_one():
    cfg = SceneConfig(flip_rate=0.3, heatmap_blur=2.0, seed=6)
    scene = generate_scene(cfg)
    gt_off, _ = gt_offset_field(scene.gt)
    import dataclasses

    bundle = dataclasses.replace(scene.bundle, offsets=OffsetField.point(gt_off))
    bundle = oracle_substitute(bundle, scene.gt, use_gt_centers=True, use_gt_semantics=True)
    res = run_pipeline(bundle)
    m = match_segments(res.panoptic, scene.gt, IGNORE)
    assert panoptic_quality(m).pq == 1.0


def test_oracle_substitute_semantics_improves_pq():
    wins = 0
    for seed in range(12):
        cfg = SceneConfig(flip_rate=0.3, offset_noise=6.0, seed=seed)
        scene = generate_scene(cfg)
        base = run_pipeline(scene.bundle)
        pq_base = panoptic_quality(match_segments(base.panoptic, scene.gt, IGNORE)).pq
        oracle = run_pipeline(oracle_substitute(scene.bundle, scene.gt, use_gt_semantics=True))
        pq_oracle = panoptic_quality(match_segments(oracle.panoptic, scene.gt, IGNORE)).pq
        assert pq_oracle >= pq_base - 1e-12
        wins += pq_oracle > pq_base
    assert wins >= 10


def test_instance_mass_centers_rounding():
    classes = np.zeros((4, 6), dtype=np.int32)
    classes[1:3, 1:4] = 1  # rows 1..2, cols 1..3 -> com (1.5, 2.0) -> (2, 2)
    inst = np.where(classes == 1, 1, 0)
    centers = instance_mass_centers(_gt(classes, inst))
    assert centers == {1: (2, 2)}


def test_metric_report_round_trip():
    report = MetricReport(
        pq=0.5, sq=0.6, rq=0.7, pece=0.1, pece_spa=None, pece_sem=0.2,
        energy_score=1.5, avg_offset_length=3.0, offset_rmse=2.0, uece=0.05,
        bins=[], num_segments=4, pq_per_class={1: {"pq": 0.5}},
        pq_class_averaged=0.5, no_segments=False, config={"bins": 10},
    )
    d = report.to_dict()
    assert set(d) >= {"pq", "sq", "rq", "pece", "pece_spa", "pece_sem",
                      "energy_score", "avg_offset_length", "offset_rmse", "bins", "config"}
    import json

    json.dumps(d)  # must be JSON-serializable as-is
