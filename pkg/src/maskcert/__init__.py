"""Certified detection of adversarial patch attacks.

A small-receptive-field backbone turns an image into a feature map in which a
square pixel patch can only corrupt a bounded block of cells.  Sliding a
window mask over the feature map and checking all masked predictions for
confident disagreement detects any in-model patch attack; an image whose
masked predictions are unanimously correct and confident is certified:
every attack against it is either detected or harmless.
"""

from maskcert.errors import (
    BoundsError,
    ConfigError,
    ContractError,
    ShapeError,
    TensorFormatError,
    TensorValidationError,
)
from maskcert.tensorio import SummedAreaTable, build_sat, load_tensor, save_tensor, window_sum
from maskcert.geometry import (
    ConvLayerSpec,
    ReceptiveField,
    ThreatModel,
    affected_feature_interval,
    compose_receptive_field,
    feature_extent,
    mask_window_size,
)
from maskcert.model import (
    ConvLayer,
    ModelWeights,
    Prediction,
    evidence_map,
    extract_features,
    load_model,
    predict,
    save_model,
)
from maskcert.masking import (
    MaskedPredictionRecord,
    Window,
    enumerate_windows,
    masked_prediction_naive,
    masked_predictions_all,
)
from maskcert.defense import (
    CertificationResult,
    DefenseParams,
    DetectionOutcome,
    certify,
    certify_features,
    detect,
    detect_features,
    soundness_theorem_check,
)
from maskcert.attacks import (
    PatchSpec,
    SoundnessReport,
    apply_patch,
    sweep_feature_attacks,
    sweep_pixel_attacks,
)
from maskcert.harness import EvalConfig, EvalReport, evaluate, attack_eval, rf_info

__version__ = "0.1.0"
