import numpy as np
import pytest

from conftest import random_backbone, random_image
from maskcert.defense import (
    CertificationResult,
    DefenseParams,
    DetectionOutcome,
    certify,
    certify_features,
    detect,
    detect_features,
    soundness_theorem_check,
    sweep_features,
)
from maskcert.errors import ConfigError, ContractError
from maskcert.geometry import compose_receptive_field, mask_window_size
from maskcert.masking import Window, masked_prediction_naive
from maskcert.model import ConvLayer, ModelWeights, extract_features, predict


def speaker_model(head_bias, n_channels=2, head_scale=100.0):
    """Identity 1x1 backbone whose evidence is just head_scale * image."""
    w = np.zeros((n_channels, n_channels, 1, 1), dtype=np.float32)
    for c in range(n_channels):
        w[c, c, 0, 0] = 1.0
    return ModelWeights(
        layers=[ConvLayer(weight=w, bias=np.zeros(n_channels, np.float32), stride=1)],
        head_a=(head_scale * np.eye(len(head_bias), n_channels)).astype(np.float32),
        head_b=np.asarray(head_bias, dtype=np.float32),
    )


def zero_feature_model(rng, head_bias):
    """Random conv with zero bias: a zero image maps to zero features."""
    model = random_backbone(rng, [(3, 1, 4)], n_classes=len(head_bias))
    layers = [
        ConvLayer(weight=l.weight, bias=np.zeros_like(l.bias), stride=l.stride)
        for l in model.layers
    ]
    return ModelWeights(
        layers=layers, head_a=model.head_a, head_b=np.asarray(head_bias, np.float32)
    )


def test_outcome_and_result_variant_invariants():
    with pytest.raises(ContractError):
        DetectionOutcome(label=3, alert=True)
    with pytest.raises(ContractError):
        DetectionOutcome(label=None, alert=False)
    with pytest.raises(ContractError):
        CertificationResult(
            certified=True, failing_window=Window(0, 0, 1), failure_kind="abstained", records=[]
        )


def test_params_validation():
    with pytest.raises(ConfigError):
        DefenseParams(tau=1.0, window_size=2)
    with pytest.raises(ConfigError):
        DefenseParams(tau=-0.1, window_size=2)
    with pytest.raises(ConfigError):
        DefenseParams(tau=0.5, window_size=0)


def test_full_consensus_returns_prediction():
    rng = np.random.default_rng(0)
    model = zero_feature_model(rng, [1.5, 0.0, 0.0])
    x = np.zeros((8, 8, 3), np.float32)
    out = detect(x, model, DefenseParams(tau=0.5, window_size=2))
    assert not out.alert
    assert out.label == 0


def test_unreachable_tau_never_alerts():
    rng = np.random.default_rng(1)
    model = random_backbone(rng, [(3, 1, 4)], n_classes=6, head_scale=0.05)
    x = random_image(rng, 10, 10)
    out = detect(x, model, DefenseParams(tau=0.999, window_size=3))
    assert not out.alert
    assert out.label == predict(extract_features(x, model), model).label


def test_planted_disagreement_alerts():
    # 2-class head; one high-evidence block dominates the unmasked prediction,
    # masking it flips to the other class with high confidence
    model = speaker_model([0.0, 0.0])
    x = np.zeros((4, 4, 2), np.float32)
    x[0:2, 0:2, 0] = 1.0  # class-0 evidence 100 in a 2x2 block
    x[:, :, 1] = 0.04  # class-1 evidence 4 everywhere
    params = DefenseParams(tau=0.5, window_size=2)
    out = detect(x, model, params)
    assert out.alert
    assert out.trigger == Window(0, 0, 2)
    # confirm against the naive path: that window flips with conf > 0.9
    u = extract_features(x, model)
    ref = masked_prediction_naive(u, Window(0, 0, 2), model)
    assert ref.label == 1 != predict(u, model).label
    assert ref.confidence > 0.9


def test_trigger_is_first_alerting_window_in_enumeration_order():
    model = speaker_model([0.0, 0.0])
    x = np.zeros((4, 4, 2), np.float32)
    x[2, 2, 0] = 1.0
    x[:, :, 1] = 0.04
    params = DefenseParams(tau=0.5, window_size=3)
    out = detect(x, model, params, trace=True)
    assert out.alert and out.trigger == Window(0, 0, 3)
    assert len(out.records) == 4
    flips = [r for r in out.records if r.prediction.label == 1]
    assert len(flips) == 4  # every window alerts; the first one is reported


def test_detect_features_matches_detect():
    rng = np.random.default_rng(2)
    model = random_backbone(rng, [(3, 2, 5)], n_classes=4)
    x = random_image(rng, 12, 12)
    params = DefenseParams(tau=0.4, window_size=2)
    a = detect(x, model, params)
    b = detect_features(extract_features(x, model), model, params)
    assert (a.alert, a.label, a.trigger) == (b.alert, b.label, b.trigger)


def test_certify_consensus_instance():
    rng = np.random.default_rng(3)
    # softmax top prob of (ln 4, 0) is 0.8
    model = zero_feature_model(rng, [float(np.log(4.0)), 0.0])
    x = np.zeros((8, 8, 3), np.float32)
    res = certify(x, 0, model, DefenseParams(tau=0.5, window_size=3))
    assert res.certified
    assert res.failing_window is None
    assert len(res.records) == (6 - 3 + 1) ** 2
    for rec in res.records:
        assert rec.prediction.label == 0
        assert abs(rec.prediction.confidence - 0.8) < 1e-6


def test_certify_universal_abstention():
    rng = np.random.default_rng(4)
    model = zero_feature_model(rng, [0.1, 0.0, 0.0])
    x = np.zeros((8, 8, 3), np.float32)
    res = certify(x, 0, model, DefenseParams(tau=0.999, window_size=2))
    assert not res.certified
    assert res.failure_kind == "abstained"
    assert res.failing_window == Window(0, 0, 2)


def test_certify_wrong_label_reports_incorrect_at_first_window():
    rng = np.random.default_rng(5)
    model = zero_feature_model(rng, [2.0, 0.0, 0.0])
    x = np.zeros((8, 8, 3), np.float32)
    res = certify(x, 1, model, DefenseParams(tau=0.5, window_size=2), exhaustive=True)
    assert not res.certified
    assert res.failing_window == Window(0, 0, 2)
    assert res.failure_kind == "incorrect"
    assert len(res.failures) == len(res.records)
    # wrong beats unconfident: with tau above the top prob the kind stays incorrect
    res2 = certify(x, 1, model, DefenseParams(tau=0.95, window_size=2))
    assert res2.failure_kind == "incorrect"


def test_certify_boundary_confidence_counts_as_abstained():
    rng = np.random.default_rng(6)
    model = zero_feature_model(rng, [0.7, 0.0])
    x = np.zeros((8, 8, 3), np.float32)
    sweep = sweep_features(extract_features(x, model), model, 2)
    boundary = float(sweep.confidences[0])  # every window votes identically
    res = certify(x, 0, model, DefenseParams(tau=boundary, window_size=2))
    assert not res.certified
    assert res.failure_kind == "abstained"
    # and the same boundary window cannot alert either
    out = detect(x, model, DefenseParams(tau=boundary, window_size=2))
    assert not out.alert


def test_certify_rejects_bad_label():
    rng = np.random.default_rng(7)
    model = zero_feature_model(rng, [1.0, 0.0])
    with pytest.raises(ConfigError):
        certify(np.zeros((6, 6, 3), np.float32), 5, model, DefenseParams(0.5, 2))


def test_clean_consistency_on_certified_instances():
    rng = np.random.default_rng(8)
    checked = 0
    for _ in range(30):
        n_classes = int(rng.integers(2, 6))
        y = int(rng.integers(0, n_classes))
        model = random_backbone(
            rng, [(3, 1, 4)], n_classes=n_classes, head_scale=0.3,
            favored_class=y, favored_bias=2.5,
        )
        x = random_image(rng, 10, 10)
        params = DefenseParams(tau=0.5, window_size=3)
        res = certify(x, y, model, params)
        if res.certified:
            out = detect(x, model, params)
            assert not out.alert
            assert out.label == y
            checked += 1
    assert checked >= 10


def test_tau_monotonicity_of_certification_and_alerts():
    rng = np.random.default_rng(9)
    taus = [0.2, 0.35, 0.5, 0.65, 0.8]
    instances = []
    for i in range(25):
        n_classes = int(rng.integers(2, 7))
        y = int(rng.integers(0, n_classes))
        model = random_backbone(
            rng, [(3, 2, 5)], n_classes=n_classes, head_scale=0.8,
            favored_class=y, favored_bias=float(rng.uniform(0.0, 2.0)),
        )
        instances.append((random_image(rng, 12, 12), y, model))
    prev_certified = None
    prev_quiet = None
    for t in taus:
        certified = set()
        quiet = set()
        for idx, (x, y, model) in enumerate(instances):
            params = DefenseParams(tau=t, window_size=2)
            if certify(x, y, model, params).certified:
                certified.add(idx)
            if not detect(x, model, params).alert:
                quiet.add(idx)
        if prev_certified is not None:
            assert certified <= prev_certified  # raising tau only shrinks the set
            assert quiet >= prev_quiet  # raising tau only silences alerts
        prev_certified, prev_quiet = certified, quiet


def test_soundness_check_requires_certified_input():
    rng = np.random.default_rng(10)
    model = zero_feature_model(rng, [0.1, 0.0])
    x = np.zeros((8, 8, 3), np.float32)
    rf = compose_receptive_field(model.layer_specs())
    with pytest.raises(ContractError):
        soundness_theorem_check(x, 0, model, DefenseParams(0.9, 2), rf, patch_size=2)


def test_soundness_check_emits_covering_witnesses():
    rng = np.random.default_rng(11)
    model = zero_feature_model(rng, [2.0, 0.0])
    x = np.zeros((12, 12, 3), np.float32)
    rf = compose_receptive_field(model.layer_specs())
    u = extract_features(x, model)
    p = 3
    w = mask_window_size(p, rf, min(u.shape[:2]))
    params = DefenseParams(tau=0.5, window_size=w)
    assert certify_features(u, 0, model, params).certified
    report = soundness_theorem_check(x, 0, model, params, rf, patch_size=p)
    assert report.certified
    assert len(report.witnesses) == (12 - p + 1) ** 2
    for wit in report.witnesses:
        assert wit.prediction.label == 0
        assert wit.prediction.confidence > params.tau
