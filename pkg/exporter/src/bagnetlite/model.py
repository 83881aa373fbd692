"""BagNet-style torch models: valid small-kernel convs, GAP + linear head.

The architecture vocabulary is exactly what the inference engine speaks:
unpadded square convolutions with ReLU, then global average pooling and one
linear layer.  BatchNorm is allowed during training because export folds it
away (see export.fold_batchnorm).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class ArchPreset:
    name: str
    layers: list[tuple[int, int, int]]  # (kernel, stride, out_channels)
    batchnorm: bool = True
    head_gain: float = 1.0  # post-training logit scale folded into the head


ARCH_PRESETS = {
    # 32 px inputs: r=11, s=2, feature extent 11
    "cifar-lite": ArchPreset(
        name="cifar-lite", layers=[(5, 1, 16), (3, 2, 24), (3, 1, 32)], head_gain=3.0
    ),
    # 16 px inputs: r=5, s=2, feature extent 6
    "tiny": ArchPreset(name="tiny", layers=[(3, 1, 8), (3, 2, 12)], head_gain=2.0),
    # passthrough, for export plumbing tests
    "identity": ArchPreset(name="identity", layers=[(1, 1, 3)], batchnorm=False, head_gain=1.0),
}


class BagnetLite(nn.Module):
    def __init__(self, preset: ArchPreset, n_classes: int, in_channels: int = 3):
        super().__init__()
        blocks = []
        cin = in_channels
        for k, s, cout in preset.layers:
            blocks.append(nn.Conv2d(cin, cout, kernel_size=k, stride=s, padding=0, bias=True))
            if preset.batchnorm:
                blocks.append(nn.BatchNorm2d(cout))
            blocks.append(nn.ReLU(inplace=True))
            cin = cout
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(cin, n_classes)
        self.preset = preset
        self.n_classes = n_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x is (B, C, H, W); returns (B, n_classes) logits."""
        u = self.features(x)
        pooled = u.mean(dim=(2, 3))
        return self.head(pooled)

    def init_identity(self) -> None:
        """Identity passthrough: only valid for the 1x1 identity preset."""
        with torch.no_grad():
            conv = self.features[0]
            conv.weight.zero_()
            for c in range(conv.weight.shape[0]):
                conv.weight[c, c, 0, 0] = 1.0
            conv.bias.zero_()
            self.head.weight.copy_(torch.eye(self.n_classes, conv.weight.shape[0]))
            self.head.bias.zero_()
