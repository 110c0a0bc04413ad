import numpy as np
import pytest

from panu.errors import InvariantViolation, KindMismatch, ShapeMismatch
from panu.postprocess import (
    CenterList,
    PostprocessConfig,
    assign_pixels,
    assign_pixels_multisample,
    find_centers,
    majority_vote_classes,
    run_pipeline,
    total_uncertainty,
)
from panu.spatial import OffsetField

RNG = np.random.default_rng(31)


def _centers(*yx):
    ys = np.array([p[0] for p in yx], dtype=np.int64)
    xs = np.array([p[1] for p in yx], dtype=np.int64)
    return CenterList(ys=ys, xs=xs, scores=np.ones(len(yx)))


def _naive_centers(heat, threshold, kernel, top_k):
    """Reference NMS: explicit window scan with the row-major tie rule."""
    h, w = heat.shape
    r = kernel // 2
    peaks = []
    for y in range(h):
        for x in range(w):
            v = heat[y, x]
            if v < threshold:
                continue
            best = True
            for ny in range(max(0, y - r), min(h, y + r + 1)):
                for nx in range(max(0, x - r), min(w, x + r + 1)):
                    if (ny, nx) == (y, x):
                        continue
                    nv = heat[ny, nx]
                    if nv > v or (nv == v and (ny, nx) < (y, x)):
                        best = False
                        break
                if not best:
                    break
            if best:
                peaks.append((y, x, v))
    peaks.sort(key=lambda p: (-p[2], p[0] * w + p[1]))
    return peaks[:top_k]


def test_find_centers_single_bump():
    heat = np.zeros((24, 24))
    ys, xs = np.indices(heat.shape)
    heat += 0.9 * np.exp(-((ys - 10) ** 2 + (xs - 10) ** 2) / 8.0)
    centers = find_centers(heat)
    assert len(centers) == 1
    assert (centers.ys[0], centers.xs[0]) == (10, 10)


def test_find_centers_all_below_threshold():
    centers = find_centers(np.full((8, 8), 0.05))
    assert len(centers) == 0


def test_find_centers_two_distant_equal_peaks():
    heat = np.zeros((16, 40))
    heat[8, 5] = 0.7
    heat[8, 25] = 0.7
    centers = find_centers(heat, PostprocessConfig(nms_kernel=7))
    assert len(centers) == 2


def test_find_centers_window_tie_keeps_first():
    heat = np.zeros((10, 10))
    heat[4, 4] = 0.5
    heat[4, 6] = 0.5  # same 7x7 window, equal value
    centers = find_centers(heat, PostprocessConfig(nms_kernel=7))
    assert len(centers) == 1
    assert (centers.ys[0], centers.xs[0]) == (4, 4)


def test_find_centers_matches_naive_oracle():
    config = PostprocessConfig(heatmap_threshold=0.2, nms_kernel=5, top_k=50)
    for _ in range(25):
        heat = np.round(RNG.random((20, 20)), 1)  # quantized to force ties
        got = find_centers(heat, config)
        want = _naive_centers(heat, 0.2, 5, 50)
        assert [(y, x) for y, x in zip(got.ys, got.xs)] == [(y, x) for y, x, _ in want]


def test_find_centers_top_k():
    heat = np.zeros((30, 30))
    values = [0.9, 0.8, 0.7, 0.6]
    for i, v in enumerate(values):
        heat[2, 2 + 7 * i] = v
    centers = find_centers(heat, PostprocessConfig(top_k=2))
    assert len(centers) == 2
    assert list(centers.scores) == [0.9, 0.8]


def test_postprocess_config_validation():
    with pytest.raises(InvariantViolation):
        PostprocessConfig(nms_kernel=4)
    with pytest.raises(InvariantViolation):
        PostprocessConfig(heatmap_threshold=0.0)


# -- pixel assignment ---------------------------------------------------------------

def test_assign_zero_offset_center_at_pixel():
    offsets = OffsetField.point(np.zeros((6, 6, 2)))
    mask = np.zeros((6, 6), bool)
    mask[3, 4] = True
    out = assign_pixels(offsets, _centers((3, 4), (0, 0)), mask)
    assert out[3, 4] == 1
    assert out.sum() == 1


def test_assign_offset_points_at_center():
    offsets = np.zeros((10, 10, 2))
    offsets[5, 5] = [3.0, 2.0]  # (x, y): target (7, 8)
    mask = np.zeros((10, 10), bool)
    mask[5, 5] = True
    out = assign_pixels(OffsetField.point(offsets), _centers((7, 8), (0, 0)), mask)
    assert out[5, 5] == 1


def test_assign_no_centers():
    offsets = OffsetField.point(np.zeros((4, 4, 2)))
    out = assign_pixels(offsets, _centers(), np.ones((4, 4), bool))
    assert np.all(out == 0)


def test_assign_distance_tie_prefers_lower_index():
    offsets = OffsetField.point(np.zeros((3, 7, 2)))
    mask = np.zeros((3, 7), bool)
    mask[1, 3] = True  # equidistant from (1, 1) and (1, 5)
    out = assign_pixels(offsets, _centers((1, 1), (1, 5)), mask)
    assert out[1, 3] == 1
    out = assign_pixels(offsets, _centers((1, 5), (1, 1)), mask)
    assert out[1, 3] == 1


def test_assign_kind_mismatch():
    with pytest.raises(KindMismatch):
        assign_pixels(OffsetField.from_samples(np.zeros((2, 2, 1, 2))), _centers((0, 0)), np.ones((2, 2), bool))


def test_multisample_unanimous_and_majority():
    mask = np.zeros((4, 4), bool)
    mask[2, 2] = True
    centers = _centers((0, 0), (3, 3))
    samples = np.zeros((4, 4, 3, 2))
    samples[2, 2] = [[-2.0, -2.0], [-2.0, -2.0], [1.0, 1.0]]  # votes c0, c0, c1
    out = assign_pixels_multisample(OffsetField.from_samples(samples), centers, mask)
    assert out[2, 2] == 1
    samples[2, 2] = [[1.0, 1.0]] * 3  # all vote c1
    out = assign_pixels_multisample(OffsetField.from_samples(samples), centers, mask)
    assert out[2, 2] == 2


def test_multisample_tie_keeps_lower_center():
    mask = np.zeros((4, 4), bool)
    mask[2, 2] = True
    centers = _centers((0, 0), (3, 3))
    samples = np.zeros((4, 4, 2, 2))
    samples[2, 2] = [[-2.0, -2.0], [1.0, 1.0]]  # one vote each
    out = assign_pixels_multisample(OffsetField.from_samples(samples), centers, mask)
    assert out[2, 2] == 1


def test_multisample_m1_equals_point():
    offsets = RNG.normal(size=(8, 8, 2)) * 4
    centers = _centers((2, 2), (6, 5), (1, 7))
    mask = RNG.random((8, 8)) < 0.6
    point = assign_pixels(OffsetField.point(offsets), centers, mask)
    multi = assign_pixels_multisample(OffsetField.from_samples(offsets[:, :, None, :]), centers, mask)
    np.testing.assert_array_equal(point, multi)


def test_assignment_partitions_thing_mask():
    offsets = RNG.normal(size=(12, 12, 2)) * 3
    centers = _centers((3, 3), (9, 9))
    mask = RNG.random((12, 12)) < 0.5
    out = assign_pixels(OffsetField.point(offsets), centers, mask)
    assert np.all(out[mask] >= 1) and np.all(out[mask] <= 2)
    assert np.all(out[~mask] == 0)


# -- majority vote ---------------------------------------------------------------------

def test_majority_vote_70_30():
    inst = np.zeros((1, 10), dtype=np.int32)
    inst[0, :10] = 1
    sem = np.array([[2] * 7 + [3] * 3], dtype=np.int32)
    out = majority_vote_classes(inst, sem, {2, 3})
    assert np.all(out.class_id == 2)
    assert np.all(out.instance_id == 1)


def test_majority_vote_tie_prefers_lower_class():
    inst = np.ones((1, 4), dtype=np.int32)
    sem = np.array([[5, 3, 5, 3]], dtype=np.int32)
    out = majority_vote_classes(inst, sem, {3, 5})
    assert np.all(out.class_id == 3)


def test_majority_vote_stuff_modal_reassigned_to_thing():
    inst = np.ones((1, 5), dtype=np.int32)
    sem = np.array([[0, 0, 0, 2, 2]], dtype=np.int32)  # modal class 0 is stuff
    out = majority_vote_classes(inst, sem, {2})
    assert np.all(out.class_id == 2)
    assert np.all(out.instance_id == 1)


def test_majority_vote_dissolves_all_stuff_segment():
    inst = np.ones((1, 4), dtype=np.int32)
    sem = np.array([[0, 0, 1, 1]], dtype=np.int32)  # no thing pixels at all
    out = majority_vote_classes(inst, sem, {2})
    assert np.all(out.instance_id == 0)
    np.testing.assert_array_equal(out.class_id, sem)


def test_majority_vote_stuff_pixels_copied():
    inst = np.zeros((2, 2), dtype=np.int32)
    sem = np.array([[0, 1], [1, 0]], dtype=np.int32)
    out = majority_vote_classes(inst, sem, {2})
    np.testing.assert_array_equal(out.class_id, sem)


# -- uncertainty fusion ------------------------------------------------------------------

def test_total_uncertainty_max():
    spa = np.array([[0.2]])
    sem = np.array([[0.7]])
    assert total_uncertainty(spa, sem)[0, 0] == 0.7
    assert total_uncertainty(None, np.array([[0.4]]))[0, 0] == 0.4
    assert total_uncertainty(np.array([[0.0]]), np.array([[0.0]]))[0, 0] == 0.0


def test_total_uncertainty_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        total_uncertainty(np.zeros((2, 2)), np.zeros((3, 3)))


def test_total_uncertainty_monotone():
    spa = RNG.random((5, 5))
    sem = RNG.random((5, 5))
    base = total_uncertainty(spa, sem)
    bumped = total_uncertainty(np.clip(spa + 0.1, 0, 1), sem)
    assert np.all(bumped >= base)


# -- pipeline -----------------------------------------------------------------------------

def test_pipeline_zero_heatmap_gives_no_instances(tiny_bundle):
    import dataclasses

    bundle, _ = tiny_bundle
    bundle = dataclasses.replace(bundle, center_heatmap=np.zeros(bundle.shape))
    result = run_pipeline(bundle)
    assert np.all(result.panoptic.instance_id == 0)


def test_pipeline_deterministic(tiny_bundle):
    bundle, _ = tiny_bundle
    a = run_pipeline(bundle)
    b = run_pipeline(bundle)
    assert a.panoptic.class_id.tobytes() == b.panoptic.class_id.tobytes()
    assert a.panoptic.instance_id.tobytes() == b.panoptic.instance_id.tobytes()
    assert a.uncertainty_total.tobytes() == b.uncertainty_total.tobytes()


def test_pipeline_gaussian_feeds_mean_forward(tiny_bundle):
    import dataclasses

    bundle, gt = tiny_bundle
    gauss = OffsetField.gaussian(bundle.offsets.mean, np.full(bundle.offsets.mean.shape, 0.5))
    bundle_g = dataclasses.replace(bundle, offsets=gauss)
    res_point = run_pipeline(bundle)
    res_gauss = run_pipeline(bundle_g)
    np.testing.assert_array_equal(res_point.panoptic.instance_id, res_gauss.panoptic.instance_id)
    assert res_gauss.uncertainty_spatial is not None
    assert res_point.uncertainty_spatial is None
