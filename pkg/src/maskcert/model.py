"""Forward-pass backbone: stacked valid convolutions + ReLU, GAP-linear head.

The head is kept in a linearized form: ``evidence_map`` applies the class
matrix to every feature cell, so spatially aggregating evidence and then
adding the bias equals global-average-pool followed by the linear layer.
That linearity is what lets window masking be done by subtracting window
sums of evidence instead of re-running the head.

The bias is added after aggregation and the average always divides by the
full cell count, so a fully masked feature map yields logits equal to the
head bias exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from maskcert.errors import ConfigError, ShapeError, TensorValidationError
from maskcert.geometry import ConvLayerSpec
from maskcert.tensorio import load_tensor, save_tensor


@dataclass(frozen=True)
class ConvLayer:
    """One valid convolution: weight (out, in, k, k), bias (out,), stride."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ModelWeights:
    """Backbone conv stack plus the linear head (A: classes x features, b)."""

    layers: list[ConvLayer]
    head_a: np.ndarray
    head_b: np.ndarray

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("model needs at least one conv layer")
        for layer in self.layers:
            if layer.weight.ndim != 4 or layer.weight.shape[2] != layer.weight.shape[3]:
                raise ShapeError(f"conv weight must be (out, in, k, k), got {layer.weight.shape}")
            if layer.bias.shape != (layer.out_channels,):
                raise ShapeError(
                    f"conv bias {layer.bias.shape} does not match {layer.out_channels} filters"
                )
            if layer.stride < 1:
                raise ShapeError(f"stride must be >= 1, got {layer.stride}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ShapeError(
                    f"layer chain broken: {prev.out_channels} out vs {nxt.in_channels} in"
                )
        if self.head_a.ndim != 2 or self.head_a.shape[1] != self.layers[-1].out_channels:
            raise ShapeError(
                f"head matrix {self.head_a.shape} does not take {self.layers[-1].out_channels} features"
            )
        if self.head_b.shape != (self.head_a.shape[0],):
            raise ShapeError(f"head bias {self.head_b.shape} vs {self.head_a.shape[0]} classes")
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise TensorValidationError("model weights contain NaN or Inf")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out + [self.head_a, self.head_b]

    @property
    def num_classes(self) -> int:
        return self.head_a.shape[0]

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def layer_specs(self) -> list[ConvLayerSpec]:
        """Geometry view of the conv stack, for receptive-field arithmetic."""
        return [ConvLayerSpec(kernel=l.kernel, stride=l.stride) for l in self.layers]


class Prediction(NamedTuple):
    """Argmax label, its softmax probability, and the raw logits."""

    label: int
    confidence: float
    logits: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        logits = np.asarray(logits, dtype=np.float64)
        label, conf = score_logits(logits)
        return cls(label=label, confidence=conf, logits=logits)


def score_logits(logits: np.ndarray) -> tuple[int, float]:
    """Argmax label (lowest index on ties) and its softmax probability."""
    ex = np.exp(logits - logits.max())
    label = int(np.argmax(logits))
    return label, float(ex[label] / ex.sum())


def score_rows(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise labels and top softmax probabilities for a (k, n) logit matrix."""
    ex = np.exp(logits - logits.max(axis=1, keepdims=True))
    labels = np.argmax(logits, axis=1)
    confs = ex[np.arange(len(labels)), labels] / ex.sum(axis=1)
    return labels, confs


def extract_features(x: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Run the conv+ReLU stack on an (H, W, C) image in [0, 1].

    Output extent per layer is (n - k)//s + 1; each output cell is an
    independent dot product, so pixels outside a cell's receptive field
    cannot change it at all.
    """
    if x.ndim != 3 or x.shape[2] != weights.in_channels:
        raise ShapeError(f"expected (H, W, {weights.in_channels}) image, got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise TensorValidationError("image values must lie in [0, 1]")
    u = np.ascontiguousarray(x, dtype=np.float32)
    for layer in weights.layers:
        k, s = layer.kernel, layer.stride
        if u.shape[0] < k or u.shape[1] < k:
            raise ShapeError(f"map {u.shape[:2]} smaller than {k}x{k} kernel")
        win = sliding_window_view(u, (k, k), axis=(0, 1))[::s, ::s]
        oh, ow = win.shape[0], win.shape[1]
        cols = np.ascontiguousarray(win).reshape(oh * ow, -1)
        # im2col + GEMM: each output cell is one row, a dot product of its
        # own receptive field only
        u = cols @ layer.weight.reshape(layer.out_channels, -1).T + layer.bias
        np.maximum(u, 0.0, out=u)
        u = u.reshape(oh, ow, layer.out_channels)
    return u


def evidence_map(u: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Per-cell class evidence e[i,j,k] = sum_c A[k,c] * u[i,j,c] (bias excluded)."""
    if u.ndim != 3 or u.shape[2] != weights.head_a.shape[1]:
        raise ShapeError(f"feature map {u.shape} does not feed a {weights.head_a.shape} head")
    h, w, c = u.shape
    flat = np.ascontiguousarray(u, dtype=np.float32).reshape(h * w, c)
    return (flat @ weights.head_a.T).reshape(h, w, weights.head_a.shape[0])


def aggregate_logits(e: np.ndarray, head_b: np.ndarray) -> np.ndarray:
    """Mean evidence over all cells plus the head bias, accumulated in float64."""
    n = e.shape[0] * e.shape[1]
    return e.astype(np.float64, copy=False).sum(axis=(0, 1)) / n + head_b


def predict(u: np.ndarray, weights: ModelWeights) -> Prediction:
    """Classify a feature map: GAP over per-cell evidence, bias, softmax."""
    if u.shape[0] < 1 or u.shape[1] < 1:
        raise ShapeError(f"empty feature map {u.shape}")
    e = evidence_map(u, weights)
    return Prediction.from_logits(aggregate_logits(e, weights.head_b))


MANIFEST_NAME = "manifest.json"


def save_model(weights: ModelWeights, bundle_dir: str | Path, metadata: dict | None = None) -> None:
    """Write a weight bundle: conv{i}_w/b, head_A, head_b tensors + manifest."""
    bundle = Path(bundle_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(weights.layers):
        save_tensor(bundle / f"conv{i}_w.npy", layer.weight)
        save_tensor(bundle / f"conv{i}_b.npy", layer.bias)
        layers.append(
            {
                "kernel": layer.kernel,
                "stride": layer.stride,
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
            }
        )
    save_tensor(bundle / "head_A.npy", weights.head_a)
    save_tensor(bundle / "head_b.npy", weights.head_b)
    manifest = {"layers": layers, "num_classes": weights.num_classes}
    if metadata:
        manifest["metadata"] = metadata
    (bundle / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(bundle_dir: str | Path) -> ModelWeights:
    """Load a weight bundle, cross-checking tensor shapes against the manifest."""
    bundle = Path(bundle_dir)
    manifest_path = bundle / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ConfigError(f"no {MANIFEST_NAME} in {bundle}")
    manifest = json.loads(manifest_path.read_text())
    layers = []
    for i, spec in enumerate(manifest["layers"]):
        w = load_tensor(bundle / f"conv{i}_w.npy")
        b = load_tensor(bundle / f"conv{i}_b.npy")
        expected = (spec["out_channels"], spec["in_channels"], spec["kernel"], spec["kernel"])
        if w.shape != expected:
            raise ConfigError(f"conv{i}_w shape {w.shape} does not match manifest {expected}")
        layers.append(ConvLayer(weight=w, bias=b, stride=int(spec["stride"])))
    head_a = load_tensor(bundle / "head_A.npy")
    head_b = load_tensor(bundle / "head_b.npy")
    if head_a.shape[0] != manifest["num_classes"]:
        raise ConfigError(
            f"head_A has {head_a.shape[0]} classes, manifest says {manifest['num_classes']}"
        )
    return ModelWeights(layers=layers, head_a=head_a, head_b=head_b)
