"""Shared builders for toy backbones and images."""

from __future__ import annotations

import numpy as np

from maskcert.model import ConvLayer, ModelWeights


def random_backbone(
    rng: np.random.Generator,
    specs: list[tuple[int, int, int]],
    in_channels: int = 3,
    n_classes: int = 4,
    weight_scale: float = 1.0,
    head_scale: float = 1.0,
    favored_class: int | None = None,
    favored_bias: float = 0.0,
) -> ModelWeights:
    """Random-weight conv stack; ``specs`` is a list of (kernel, stride, out_ch).

    ``favored_class`` adds a head-bias bump, which is how the toy suites
    manufacture instances with confident (certifiable) predictions.
    """
    layers = []
    cin = in_channels
    for k, s, cout in specs:
        fan_in = cin * k * k
        w = rng.normal(0.0, weight_scale / np.sqrt(fan_in), (cout, cin, k, k)).astype(np.float32)
        b = rng.normal(0.0, 0.05, cout).astype(np.float32)
        layers.append(ConvLayer(weight=w, bias=b, stride=s))
        cin = cout
    head_a = rng.normal(0.0, head_scale, (n_classes, cin)).astype(np.float32)
    head_b = rng.normal(0.0, 0.2, n_classes).astype(np.float32)
    if favored_class is not None:
        head_b[favored_class] += favored_bias
    return ModelWeights(layers=layers, head_a=head_a, head_b=head_b)


def random_image(rng: np.random.Generator, h: int, w: int, c: int = 3) -> np.ndarray:
    return rng.random((h, w, c), dtype=np.float32)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Nested-loop valid convolution + ReLU; the oracle for extract_features."""
    h, w, _ = x.shape
    cout, cin, k, _ = weight.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.zeros((oh, ow, cout), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = x[i * stride : i * stride + k, j * stride : j * stride + k, :]
            for o in range(cout):
                acc = bias[o].astype(np.float64)
                for di in range(k):
                    for dj in range(k):
                        for c in range(cin):
                            acc += float(patch[di, dj, c]) * float(weight[o, c, di, dj])
                out[i, j, o] = max(acc, 0.0)
    return out
