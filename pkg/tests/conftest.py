import numpy as np
import pytest

from panu.spatial import OffsetField
from panu.tensor_io import GroundTruth, PredictionBundle


@pytest.fixture
def tiny_bundle():
    """4x6 bundle with 3 classes (thing id 2), one 2x2 instance, exact offsets."""
    h, w, c = 4, 6, 3
    classes = np.zeros((h, w), dtype=np.int32)
    instances = np.zeros((h, w), dtype=np.int32)
    classes[1:3, 1:3] = 2
    instances[1:3, 1:3] = 1
    gt = GroundTruth(panoptic=np.stack([classes, instances], axis=-1).astype(np.int32))

    logits = np.where(np.eye(c)[classes] > 0, 8.0, -8.0)
    heat = np.zeros((h, w))
    heat[2, 2] = 1.0  # rounded mass center of the 2x2 block at rows/cols 1..2
    offsets = np.zeros((h, w, 2))
    ys, xs = np.indices((h, w))
    offsets[..., 0] = np.where(instances > 0, 2 - xs, 0)
    offsets[..., 1] = np.where(instances > 0, 2 - ys, 0)
    bundle = PredictionBundle(
        semantic_kind="logits",
        semantic=logits,
        center_heatmap=heat,
        offsets=OffsetField.point(offsets),
        thing_class_ids=frozenset({2}),
        ignore_label=255,
    )
    return bundle, gt
