"""Attack detection and per-image robustness certification.

Detection: predict once without masks, then slide the window mask over the
feature map.  Any masked prediction that is confident (strictly above tau)
and disagrees with the unmasked label raises an alert; otherwise the
unmasked prediction is returned.

Certification: an image is certified for label y when every masked
prediction is correct and confident.  A patch in the threat model corrupts
feature cells that some window covers entirely, and a fully covering mask
reproduces the clean masked prediction bit for bit, so on any attacked
variant that window still votes (y, conf > tau): the detector must either
alert or return y.

Confidence exactly equal to tau counts as abstained on both sides: an
abstaining window can never alert, so letting it certify would break the
guarantee at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from maskcert.errors import ConfigError, ContractError
from maskcert.geometry import ReceptiveField, affected_feature_interval, mask_window_size
from maskcert.masking import (
    MaskedPredictionRecord,
    Window,
    enumerate_windows,
    masked_logits_grid,
    window_grid,
)
from maskcert.model import (
    ModelWeights,
    Prediction,
    aggregate_logits,
    evidence_map,
    extract_features,
    score_rows,
)
from maskcert.tensorio import build_sat


@dataclass(frozen=True)
class DefenseParams:
    """Confidence threshold tau in [0, 1) and the mask window size in cells."""

    tau: float
    window_size: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must be in [0, 1), got {self.tau}")
        if self.window_size < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window_size}")


@dataclass(frozen=True)
class DetectionOutcome:
    """Either a returned class label or an alert, never both.

    ``base`` is the unmasked prediction that produced the label; ``trigger``
    is the first alerting window in enumeration order.  ``records`` holds
    the full masked sweep when tracing.
    """

    label: int | None
    alert: bool
    base: Prediction = field(repr=False, default=None)
    trigger: Window | None = None
    records: list[MaskedPredictionRecord] | None = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.alert == (self.label is not None):
            raise ContractError("outcome must be exactly one of: label, alert")


@dataclass(frozen=True)
class CertificationResult:
    """Verdict of the all-windows analysis for one (image, label) pair."""

    certified: bool
    failing_window: Window | None
    failure_kind: str | None  # "incorrect" | "abstained"
    records: list[MaskedPredictionRecord]
    failures: list[tuple[Window, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.certified != (self.failing_window is None):
            raise ContractError("certified iff no failing window")


@dataclass(frozen=True)
class WindowSweep:
    """Shared per-image masked sweep: unmasked prediction + per-window votes."""

    base: Prediction
    extent: tuple[int, int]
    size: int
    logits: np.ndarray  # (n_windows, n_classes) float64
    labels: np.ndarray  # (n_windows,) int
    confidences: np.ndarray  # (n_windows,) float64

    def window_at(self, k: int) -> Window:
        per_row = self.extent[1] - self.size + 1
        return Window(k // per_row, k % per_row, self.size)

    @property
    def windows(self) -> list[Window]:
        return enumerate_windows(self.extent[0], self.extent[1], self.size)

    def records(self) -> list[MaskedPredictionRecord]:
        return [
            MaskedPredictionRecord(
                window=win, prediction=Prediction(label=label, confidence=conf, logits=row)
            )
            for win, label, conf, row in zip(
                self.windows, self.labels.tolist(), self.confidences.tolist(), self.logits
            )
        ]


def sweep_features(u: np.ndarray, weights: ModelWeights, window_size: int) -> WindowSweep:
    """Evaluate the unmasked prediction and every masked prediction once.

    The window size is clamped to the feature extent; when it equals the
    extent the window set degenerates to a single all-covering position.
    """
    h, w = u.shape[0], u.shape[1]
    size = min(window_size, h, w)
    i1, j1 = window_grid(h, w, size)
    e = evidence_map(u, weights)
    sat = build_sat(e)
    logits = masked_logits_grid(sat, i1, j1, size, h * w, weights.head_b)
    labels, confs = score_rows(logits)
    return WindowSweep(
        base=Prediction.from_logits(aggregate_logits(e, weights.head_b)),
        extent=(h, w),
        size=size,
        logits=logits,
        labels=labels,
        confidences=confs,
    )


def detect_features(
    u: np.ndarray, weights: ModelWeights, params: DefenseParams, trace: bool = False
) -> DetectionOutcome:
    """Detection on a precomputed feature map (shared by the feature oracle)."""
    sweep = sweep_features(u, weights, params.window_size)
    return _outcome_from_sweep(sweep, params, trace)


def _outcome_from_sweep(sweep: WindowSweep, params: DefenseParams, trace: bool) -> DetectionOutcome:
    disagree = (sweep.confidences > params.tau) & (sweep.labels != sweep.base.label)
    records = sweep.records() if trace else None
    hits = np.flatnonzero(disagree)
    if hits.size:
        return DetectionOutcome(
            label=None,
            alert=True,
            base=sweep.base,
            trigger=sweep.window_at(int(hits[0])),
            records=records,
        )
    return DetectionOutcome(
        label=sweep.base.label, alert=False, base=sweep.base, trigger=None, records=records
    )


def detect(
    x: np.ndarray, weights: ModelWeights, params: DefenseParams, trace: bool = False
) -> DetectionOutcome:
    """Alert on confident masked disagreement, else return the unmasked label.

    Windows are checked in enumeration order but the outcome is order
    independent: it alerts iff any window disagrees confidently.
    """
    return detect_features(extract_features(x, weights), weights, params, trace)


def certify_features(
    u: np.ndarray,
    y: int,
    weights: ModelWeights,
    params: DefenseParams,
    exhaustive: bool = False,
) -> CertificationResult:
    """Certification on a precomputed feature map."""
    if not 0 <= y < weights.num_classes:
        raise ConfigError(f"label {y} outside {weights.num_classes} classes")
    sweep = sweep_features(u, weights, params.window_size)
    failing = np.flatnonzero((sweep.confidences <= params.tau) | (sweep.labels != y))
    records = sweep.records()
    if failing.size == 0:
        return CertificationResult(
            certified=True, failing_window=None, failure_kind=None, records=records
        )

    def kind(k: int) -> str:
        # a window that is both wrong and unconfident reports as incorrect
        return "incorrect" if sweep.labels[k] != y else "abstained"

    first = int(failing[0])
    failures = [(sweep.window_at(int(k)), kind(int(k))) for k in failing] if exhaustive else []
    return CertificationResult(
        certified=False,
        failing_window=sweep.window_at(first),
        failure_kind=kind(first),
        records=records,
        failures=failures,
    )


def certify(
    x: np.ndarray,
    y: int,
    weights: ModelWeights,
    params: DefenseParams,
    exhaustive: bool = False,
) -> CertificationResult:
    """Certified iff every masked prediction is confident (conf > tau) and == y.

    On failure, reports the first failing window in enumeration order;
    ``exhaustive=True`` additionally collects every failing window.
    """
    return certify_features(extract_features(x, weights), y, weights, params, exhaustive)


@dataclass(frozen=True)
class CoverageWitness:
    """For one patch location: a window whose span contains every feature
    cell the patch can touch, plus that window's clean masked vote."""

    location: tuple[int, int]
    window: Window
    prediction: Prediction


@dataclass(frozen=True)
class SoundnessCheckReport:
    certified: bool
    witnesses: list[CoverageWitness]


def covering_window_origin(
    interval: tuple[int, int] | None, window_size: int, n_cells: int
) -> int:
    """Smallest valid window origin whose span contains the interval.

    Exists for every reachable interval because the interval is at most
    ``window_size`` cells long and windows slide at stride 1.
    """
    if interval is None:
        return 0
    lo, hi = interval
    origin = max(0, hi - window_size + 1)
    if origin > min(lo, n_cells - window_size):
        raise ContractError(
            f"no window of {window_size} covers [{lo}, {hi}] in {n_cells} cells"
        )
    return origin


def soundness_theorem_check(
    x: np.ndarray,
    y: int,
    weights: ModelWeights,
    params: DefenseParams,
    rf: ReceptiveField,
    patch_size: int,
    stride: int = 1,
) -> SoundnessCheckReport:
    """Materialize the certificate's proof obligations for every patch location.

    Requires a certified (x, y).  For each location the returned witness
    window covers all feature cells the patch can corrupt, and its clean
    masked prediction already votes (y, conf > tau); masked-out independence
    then forces the same vote on any attacked variant, so detection can only
    alert or return y.
    """
    u = extract_features(x, weights)
    result = certify_features(u, y, weights, params)
    if not result.certified:
        raise ContractError("soundness check requires a certified input")
    h_cells, w_cells = u.shape[0], u.shape[1]
    size = min(params.window_size, h_cells, w_cells)
    by_pos = {(r.window.i, r.window.j): r.prediction for r in result.records}
    expected = mask_window_size(patch_size, rf)
    witnesses = []
    for a_i in range(0, x.shape[0] - patch_size + 1, stride):
        iv_i = affected_feature_interval(a_i, patch_size, rf, h_cells, x.shape[0])
        if iv_i is not None and iv_i[1] - iv_i[0] + 1 > expected:
            raise ContractError(f"interval {iv_i} wider than the mask bound {expected}")
        wi = covering_window_origin(iv_i, size, h_cells)
        for a_j in range(0, x.shape[1] - patch_size + 1, stride):
            iv_j = affected_feature_interval(a_j, patch_size, rf, w_cells, x.shape[1])
            wj = covering_window_origin(iv_j, size, w_cells)
            pred = by_pos[(wi, wj)]
            if pred.label != y or pred.confidence <= params.tau:
                raise ContractError("certified sweep lost its covering vote")
            witnesses.append(
                CoverageWitness(location=(a_i, a_j), window=Window(wi, wj, size), prediction=pred)
            )
    return SoundnessCheckReport(certified=True, witnesses=witnesses)
