"""Receptive-field arithmetic for stacked valid convolutions.

Every feature cell of the backbone sees a fixed pixel interval: cell ``i``
covers ``[offset + i*s, offset + i*s + r)`` where ``r`` is the composed
receptive-field size and ``s`` the composed stride.  With valid (unpadded)
convolutions the offset is zero and the mapping from a pixel patch to the
feature cells it can corrupt is exact, which is what the mask-size bound
``w = ceil((p + r - 1) / s)`` relies on: a patch of ``p`` pixels per axis
touches at most ``w`` consecutive cells, so some w-sized window contains
them all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from maskcert.errors import BoundsError, ConfigError


@dataclass(frozen=True)
class ConvLayerSpec:
    """Square kernel size and stride of one convolution layer, in pixels."""

    kernel: int
    stride: int

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"kernel and stride must be >= 1, got {self}")


@dataclass(frozen=True)
class ReceptiveField:
    """Composed receptive field: size ``r``, stride ``s``, left-edge offset."""

    size: int
    stride: int
    offset: int = 0

    def __post_init__(self) -> None:
        if self.size < 1 or self.stride < 1:
            raise ConfigError(f"receptive field must have size, stride >= 1, got {self}")

    def cell_span(self, i: int) -> tuple[int, int]:
        """Half-open pixel interval covered by feature cell ``i``."""
        lo = self.offset + i * self.stride
        return lo, lo + self.size


@dataclass(frozen=True)
class ThreatModel:
    """Square patch size: pixels if int, fraction of image pixels if float."""

    patch_size: int | float

    def resolve(self, height: int, width: int) -> int:
        """Patch side in pixels; fractions resolve as ceil(sqrt(f * H * W))."""
        p = self.patch_size
        if isinstance(p, float) and not p.is_integer():
            if not 0.0 < p < 1.0:
                raise ConfigError(f"patch fraction must be in (0, 1), got {p}")
            area = p * height * width
            side = 1
            while side * side < area:
                side += 1
        else:
            side = int(p)
        if not 1 <= side <= min(height, width):
            raise ConfigError(f"patch of {side}px does not fit a {height}x{width} image")
        return side


def compose_receptive_field(layers: Sequence[ConvLayerSpec]) -> ReceptiveField:
    """Fold layer kernels/strides into the whole-backbone receptive field.

    r = 1 + sum_i (k_i - 1) * prod_{j<i} s_j and s = prod_i s_i; valid
    convolutions keep the offset at zero.
    """
    if not layers:
        raise ConfigError("cannot compose an empty layer list")
    r, s = 1, 1
    for layer in layers:
        r += (layer.kernel - 1) * s
        s *= layer.stride
    return ReceptiveField(size=r, stride=s, offset=0)


def feature_extent(image_extent: int, layers: Sequence[ConvLayerSpec]) -> int:
    """Feature cells per axis after all layers, folding (n - k)//s + 1."""
    n = image_extent
    for layer in layers:
        if n < layer.kernel:
            raise ConfigError(
                f"extent {n} smaller than kernel {layer.kernel}; image too small for backbone"
            )
        n = (n - layer.kernel) // layer.stride + 1
    return n


def mask_window_size(p: int, rf: ReceptiveField, n_cells: int | None = None) -> int:
    """Window side (in feature cells) needed to cover any p-pixel patch.

    ceil((p + r - 1) / s), clamped to the feature extent when given.
    """
    if p < 1:
        raise ConfigError(f"patch size must be >= 1, got {p}")
    w = -(-(p + rf.size - 1) // rf.stride)
    if n_cells is not None:
        w = min(w, n_cells)
    return w


def affected_feature_interval(
    a: int,
    p: int,
    rf: ReceptiveField,
    n_cells: int,
    image_extent: int | None = None,
) -> tuple[int, int] | None:
    """Inclusive feature-index interval whose cells see pixels [a, a+p).

    Exactly the cells i with [offset + i*s, offset + i*s + r) intersecting
    the patch, clamped to [0, n_cells - 1].  Returns None when no cell sees
    the patch (patch entirely in the uncovered trailing margin).
    """
    if a < 0 or p < 1:
        raise BoundsError(f"patch start {a}, size {p} invalid")
    if image_extent is not None and a + p > image_extent:
        raise BoundsError(f"patch [{a}, {a + p}) outside image extent {image_extent}")
    s, r, o = rf.stride, rf.size, rf.offset
    # i*s + o + r > a  and  i*s + o < a + p
    lo = (a - r - o) // s + 1
    hi = (a + p - o - 1) // s
    lo, hi = max(lo, 0), min(hi, n_cells - 1)
    if lo > hi:
        return None
    return lo, hi
