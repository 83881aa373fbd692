"""Sliding-window feature masks and all-windows masked prediction.

Two routes produce a masked prediction.  The naive route zeroes the window
in the feature map and reruns the head; it is the reference.  The fast
route reuses one evidence summed-area table: the logits of a masked map are
the mean of the evidence lying outside the window plus the head bias, so
each window costs a handful of table lookups regardless of window size.

The out-of-window sum is assembled from four disjoint strips (above, below,
left, right of the window) instead of total-minus-window.  Each strip reads
only table entries whose accumulation never includes in-window cells, so
two feature maps that differ only inside the window produce bit-identical
masked predictions.  That exactness is what certification leans on: a mask
covering every corrupted cell yields the same prediction the clean image
produced, not merely a nearby one.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from maskcert.errors import BoundsError, ConfigError
from maskcert.model import ModelWeights, Prediction, predict, score_rows
from maskcert.tensorio import SummedAreaTable


class Window(NamedTuple):
    """Square w x w block of feature cells anchored at top-left (i, j)."""

    i: int
    j: int
    size: int


class MaskedPredictionRecord(NamedTuple):
    window: Window
    prediction: Prediction


@lru_cache(maxsize=128)
def window_grid(extent_i: int, extent_j: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Cached row-major (i, j) origin arrays for the full window set.

    The exhaustive sweeps re-enumerate the same geometry for every attempt;
    caching the origin arrays keeps the per-prediction cost pure array work.
    """
    if extent_i < 1 or extent_j < 1:
        raise ConfigError(f"feature extents must be positive, got {extent_i}x{extent_j}")
    if size < 1 or size > min(extent_i, extent_j):
        raise ConfigError(f"window size {size} invalid for a {extent_i}x{extent_j} map")
    ii, jj = np.meshgrid(
        np.arange(extent_i - size + 1, dtype=np.intp),
        np.arange(extent_j - size + 1, dtype=np.intp),
        indexing="ij",
    )
    i1, j1 = ii.reshape(-1), jj.reshape(-1)
    i1.flags.writeable = False
    j1.flags.writeable = False
    return i1, j1


def enumerate_windows(extent_i: int, extent_j: int, size: int) -> list[Window]:
    """All in-bounds window positions at feature-space stride 1, row-major."""
    i1, j1 = window_grid(extent_i, extent_j, size)
    return [Window(i, j, size) for i, j in zip(i1.tolist(), j1.tolist())]


def masked_prediction_naive(u: np.ndarray, window: Window, weights: ModelWeights) -> Prediction:
    """Reference route: zero the window in the feature map, rerun the head."""
    h, w = u.shape[0], u.shape[1]
    if window.i < 0 or window.j < 0 or window.i + window.size > h or window.j + window.size > w:
        raise BoundsError(f"{window} outside {h}x{w} feature map")
    masked = u.copy()
    masked[window.i : window.i + window.size, window.j : window.j + window.size, :] = 0.0
    return predict(masked, weights)


def masked_logits_grid(
    sat: SummedAreaTable,
    i1: np.ndarray,
    j1: np.ndarray,
    size: int,
    n_cells: int,
    head_bias: np.ndarray,
) -> np.ndarray:
    """Masked logits for windows at origins (i1, j1), one row per window.

    Assembles sum-outside-window as top strip + bottom strip + left strip +
    right strip.  Top and left strips come from the prefix table, bottom and
    right from the suffix table; none of the six entries read for a window
    accumulates any in-window cell, which is what makes masked predictions
    exactly independent of in-window values.
    """
    h, w, _ = sat.source_shape
    i2 = i1 + size
    j2 = j1 + size
    p, q = sat.prefix, sat.suffix
    top = p[i1, w]
    bottom = q[i2, 0]
    left = p[i2, j1] - p[i1, j1]
    right = q[i1, j2] - q[i2, j2]
    outside = (top + bottom) + (left + right)
    return outside / n_cells + head_bias.astype(np.float64, copy=False)


def masked_window_logits(
    sat: SummedAreaTable,
    windows: list[Window],
    n_cells: int,
    head_bias: np.ndarray,
) -> np.ndarray:
    """Masked logits for an explicit window list, one row per window."""
    if not windows:
        return np.zeros((0, head_bias.shape[0]), dtype=np.float64)
    sizes = {win.size for win in windows}
    if len(sizes) != 1:
        raise ConfigError("windows in one sweep must share a size")
    i1 = np.array([win.i for win in windows], dtype=np.intp)
    j1 = np.array([win.j for win in windows], dtype=np.intp)
    return masked_logits_grid(sat, i1, j1, sizes.pop(), n_cells, head_bias)


def masked_predictions_all(
    e_sat: SummedAreaTable,
    totals: np.ndarray | None,
    n_cells: int,
    head_bias: np.ndarray,
    windows: list[Window],
) -> list[MaskedPredictionRecord]:
    """Fast route: one record per window, in enumeration order.

    ``totals``, when given, is cross-checked against the table (it is
    implied by it); a mismatch means the table was built from a different
    map than the caller thinks.
    """
    if totals is not None:
        drift = np.max(np.abs(np.asarray(totals, dtype=np.float64) - e_sat.totals))
        scale = 1.0 + float(np.max(np.abs(e_sat.totals)))
        if drift > 1e-6 * scale:
            raise ConfigError("per-class totals disagree with the summed-area table")
    logits = masked_window_logits(e_sat, windows, n_cells, head_bias)
    labels, confs = score_rows(logits)
    return [
        MaskedPredictionRecord(
            window=win, prediction=Prediction(label=label, confidence=conf, logits=row)
        )
        for win, label, conf, row in zip(windows, labels.tolist(), confs.tolist(), logits)
    ]
