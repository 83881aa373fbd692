"""Patch threat model and empirical falsification of certificates.

The pixel oracle realizes the threat model literally: a square block of
pixels, placed anywhere, with arbitrary [0, 1] content.  The feature oracle
is strictly stronger: it writes arbitrary finite values directly into every
feature cell the patch location could influence, dominating anything a
pixel patch can induce there.

Both sweeps hammer the detector and record any undetected misclassification.
On a certified image that list must stay empty for every location, content,
seed, and budget; a single entry falsifies the certificate and the build.
Content search is gradient free: fixed extremes, random draws, and a greedy
random refinement of the strongest content found so far.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from maskcert.defense import (
    CertificationResult,
    DefenseParams,
    certify_features,
    detect,
    detect_features,
)
from maskcert.errors import BoundsError, TensorValidationError
from maskcert.geometry import affected_feature_interval, compose_receptive_field
from maskcert.model import ModelWeights, extract_features


@dataclass(frozen=True)
class PatchSpec:
    """Square patch: side in pixels, top-left location, content in [0, 1]."""

    size: int
    location: tuple[int, int]
    content: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        expected = (self.size, self.size)
        if self.content.shape[:2] != expected:
            raise BoundsError(f"content {self.content.shape} does not fill a {expected} patch")
        if self.content.size and (self.content.min() < 0.0 or self.content.max() > 1.0):
            raise TensorValidationError("patch content must lie in [0, 1]")


@dataclass(frozen=True)
class PixelViolation:
    spec: PatchSpec
    predicted_label: int

    def to_json(self) -> dict:
        return {
            "kind": "pixel",
            "size": self.spec.size,
            "location": list(self.spec.location),
            "content": self.spec.content.tolist(),
            "predicted_label": self.predicted_label,
        }


@dataclass(frozen=True)
class FeatureViolation:
    region: tuple[int, int, int, int]  # i_lo, i_hi, j_lo, j_hi inclusive
    values: np.ndarray
    predicted_label: int

    def to_json(self) -> dict:
        return {
            "kind": "feature",
            "region": list(self.region),
            "values": self.values.tolist(),
            "predicted_label": self.predicted_label,
        }


@dataclass
class SoundnessReport:
    """Outcome of one sweep against one image."""

    image_id: str
    mode: str  # "pixel" | "feature"
    certified: bool
    patch_size: int
    stride: int
    locations_tested: int
    attempts_per_location: int
    total_attempts: int
    alerts: int
    violations: list = field(default_factory=list)
    undetected_expected: int = 0  # undetected misclassifications on an uncertified image

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "mode": self.mode,
            "certified": self.certified,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "locations": self.locations_tested,
            "attempts_per_location": self.attempts_per_location,
            "total_attempts": self.total_attempts,
            "alerts": self.alerts,
            "violations": [v.to_json() for v in self.violations],
            "undetected_misclassifications_expected": self.undetected_expected,
        }


def apply_patch(x: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Replace the block at spec.location with spec.content; everything else
    is bit-identical to x."""
    a_i, a_j = spec.location
    p = spec.size
    if a_i < 0 or a_j < 0 or a_i + p > x.shape[0] or a_j + p > x.shape[1]:
        raise BoundsError(f"patch {p}px at {spec.location} outside {x.shape[:2]} image")
    out = x.copy()
    out[a_i : a_i + p, a_j : a_j + p] = np.asarray(spec.content, dtype=x.dtype).reshape(
        (p, p) + x.shape[2:]
    )
    return out


def _wrong_class_margin(logits: np.ndarray, y: int) -> float:
    """max_{z != y} logit_z - logit_y; the content-search objective."""
    rival = np.delete(logits, y).max()
    return float(rival - logits[y])


def _location_rng(seed: int, a_i: int, a_j: int) -> np.random.Generator:
    # one stream per (seed, location): results independent of sweep scheduling
    return np.random.default_rng(np.random.SeedSequence([seed, a_i, a_j]))


def _split_budget(budget: int, n_fixed: int) -> tuple[int, int, int]:
    fixed = min(budget, n_fixed)
    rest = budget - fixed
    n_random = (rest + 1) // 2
    return fixed, n_random, rest - n_random


def sweep_pixel_attacks(
    x: np.ndarray,
    y: int,
    weights: ModelWeights,
    params: DefenseParams,
    budget: int,
    seed: int,
    patch_size: int,
    stride: int = 1,
    certification: CertificationResult | None = None,
    image_id: str = "",
) -> SoundnessReport:
    """Try ``budget`` patch contents at every valid location at the given
    pixel stride and record undetected misclassifications.

    Contents per location: all-zeros and all-ones, uniform random draws, and
    a random-search refinement chain that perturbs the content with the
    highest wrong-class margin of the unmasked prediction seen so far.
    """
    if certification is None:
        certification = certify_features(extract_features(x, weights), y, weights, params)
    report = SoundnessReport(
        image_id=image_id,
        mode="pixel",
        certified=certification.certified,
        patch_size=patch_size,
        stride=stride,
        locations_tested=0,
        attempts_per_location=budget,
        total_attempts=0,
        alerts=0,
    )
    p = patch_size
    shape = (p, p) + x.shape[2:]
    n_fixed, n_random, n_refine = _split_budget(budget, 2)
    for a_i in range(0, x.shape[0] - p + 1, stride):
        for a_j in range(0, x.shape[1] - p + 1, stride):
            report.locations_tested += 1
            if budget == 0:
                continue
            rng = _location_rng(seed, a_i, a_j)
            contents = [np.zeros(shape, np.float32), np.ones(shape, np.float32)][:n_fixed]
            contents += [rng.random(shape, dtype=np.float32) for _ in range(n_random)]
            best = None  # (margin, content)
            for step in range(len(contents) + n_refine):
                if step < len(contents):
                    content = contents[step]
                else:
                    jitter = rng.uniform(-0.5, 0.5, shape) * (rng.random(shape) < 0.3)
                    content = np.clip(best[1] + jitter, 0.0, 1.0).astype(np.float32)
                spec = PatchSpec(size=p, location=(a_i, a_j), content=content)
                outcome = detect(apply_patch(x, spec), weights, params)
                report.total_attempts += 1
                margin = _wrong_class_margin(outcome.base.logits, y)
                if best is None or margin > best[0]:
                    best = (margin, content)
                if outcome.alert:
                    report.alerts += 1
                elif outcome.label != y:
                    if certification.certified:
                        report.violations.append(PixelViolation(spec, outcome.label))
                    else:
                        report.undetected_expected += 1
    return report


def sweep_feature_attacks(
    x: np.ndarray,
    y: int,
    weights: ModelWeights,
    params: DefenseParams,
    budget: int,
    seed: int,
    patch_size: int,
    stride: int = 1,
    certification: CertificationResult | None = None,
    image_id: str = "",
) -> SoundnessReport:
    """Feature-space over-approximation of the pixel sweep.

    For each patch location the affected feature cells (from receptive-field
    arithmetic) are overwritten with arbitrary finite values: +/-1e6 floods,
    scaled gaussian and uniform draws, and a refinement chain.  Any value a
    pixel patch could induce in those cells is reachable here, so a
    certificate that survives this sweep survives every pixel attack a
    fortiori.
    """
    u = extract_features(x, weights)
    if certification is None:
        certification = certify_features(u, y, weights, params)
    rf = compose_receptive_field(weights.layer_specs())
    report = SoundnessReport(
        image_id=image_id,
        mode="feature",
        certified=certification.certified,
        patch_size=patch_size,
        stride=stride,
        locations_tested=0,
        attempts_per_location=budget,
        total_attempts=0,
        alerts=0,
    )
    p = patch_size
    h_cells, w_cells = u.shape[0], u.shape[1]
    flood = 1.0e6
    scale = 10.0 * (1.0 + float(np.abs(u).max()))
    n_fixed, n_random, n_refine = _split_budget(budget, 2)
    for a_i in range(0, x.shape[0] - p + 1, stride):
        iv_i = affected_feature_interval(a_i, p, rf, h_cells, x.shape[0])
        for a_j in range(0, x.shape[1] - p + 1, stride):
            iv_j = affected_feature_interval(a_j, p, rf, w_cells, x.shape[1])
            report.locations_tested += 1
            if budget == 0 or iv_i is None or iv_j is None:
                continue
            region = (iv_i[0], iv_i[1], iv_j[0], iv_j[1])
            shape = (iv_i[1] - iv_i[0] + 1, iv_j[1] - iv_j[0] + 1, u.shape[2])
            rng = _location_rng(seed, a_i, a_j)
            fixed = [np.full(shape, flood), np.full(shape, -flood)][:n_fixed]
            best = None
            for step in range(n_fixed + n_random + n_refine):
                if step < n_fixed:
                    values = fixed[step]
                elif step < n_fixed + n_random:
                    if step % 2 == 0:
                        values = rng.normal(0.0, scale, shape)
                    else:
                        values = rng.uniform(-flood, flood, shape)
                else:
                    values = best[1] + rng.normal(0.0, scale, shape)
                corrupted = u.copy()
                corrupted[iv_i[0] : iv_i[1] + 1, iv_j[0] : iv_j[1] + 1, :] = values
                outcome = detect_features(corrupted, weights, params)
                report.total_attempts += 1
                margin = _wrong_class_margin(outcome.base.logits, y)
                if best is None or margin > best[0]:
                    best = (margin, values)
                if outcome.alert:
                    report.alerts += 1
                elif outcome.label != y:
                    if certification.certified:
                        report.violations.append(FeatureViolation(region, values, outcome.label))
                    else:
                        report.undetected_expected += 1
    return report
