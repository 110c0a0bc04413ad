"""Numerical core for uncertainty-aware panoptic segmentation.

Loss kernels with analytic gradients, Panoptic-DeepLab style postprocessing
with a multi-sample variant, decoupled calibration metrics, energy-score
evaluation, temperature fitting, and a synthetic-scene oracle harness.
"""

from ._kernels import backend_name, native_available
from .errors import PanuError
from .metrics import (
    MetricReport,
    energy_score_metric,
    match_segments,
    offset_stats,
    oracle_substitute,
    panoptic_quality,
    pece,
    pece_sem,
    pece_spa,
    uece,
)
from .postprocess import (
    CenterList,
    PanopticMap,
    PostprocessConfig,
    assign_pixels,
    assign_pixels_multisample,
    find_centers,
    majority_vote_classes,
    run_pipeline,
    total_uncertainty,
)
from .semantic import (
    CalibrationConfig,
    anneal_coefficient,
    dirichlet_from_evidence,
    dirichlet_quantities,
    edl_loss,
    fit_temperature,
    kl_regularizer,
    semantic_uncertainty,
    softmax_with_temperature,
)
from .spatial import (
    OffsetField,
    VarianceNormalizer,
    energy_score_loss,
    gaussian_nll_loss,
    sample_gaussian_offsets,
    spatial_uncertainty_from_samples,
    spatial_uncertainty_from_variance,
)
from .synth import SceneConfig, SyntheticScene, brute_force_pq, brute_force_uece, generate_scene
from .tensor_io import (
    GroundTruth,
    PredictionBundle,
    load_bundle,
    read_tensor,
    save_bundle,
    write_tensor,
)

__version__ = "0.1.0"
