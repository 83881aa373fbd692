"""Weight-bundle and dataset writers for the inference engine.

Formats are the engine's external interfaces: NPY v1.0 little-endian
float32 tensors, a manifest.json listing layer specs in order, and dataset
directories of per-image tensors plus labels.csv (header ``filename,label``).
numpy's writer emits exactly that tensor format.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from bagnetlite.data import DATASETS, make_split
from bagnetlite.model import BagnetLite


def fold_batchnorm(model: BagnetLite) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Collapse each conv(+BN) block into one conv; returns (w, b, stride).

    BN(conv(x)) = conv'(x) with w' = w * g/sigma and b' = beta + (b - mu) * g/sigma,
    so the exported stack is plain conv+ReLU while computing the trained function.
    """
    model.eval()
    folded = []
    blocks = list(model.features)
    i = 0
    while i < len(blocks):
        conv = blocks[i]
        assert isinstance(conv, nn.Conv2d)
        w = conv.weight.detach().clone()
        b = conv.bias.detach().clone()
        i += 1
        if i < len(blocks) and isinstance(blocks[i], nn.BatchNorm2d):
            bn = blocks[i]
            sigma = torch.sqrt(bn.running_var.detach() + bn.eps)
            gain = bn.weight.detach() / sigma
            w = w * gain.view(-1, 1, 1, 1)
            b = bn.bias.detach() + (b - bn.running_mean.detach()) * gain
            i += 1
        assert isinstance(blocks[i], nn.ReLU)
        i += 1
        folded.append(
            (
                w.numpy().astype(np.float32),
                b.numpy().astype(np.float32),
                conv.stride[0],
            )
        )
    return folded


def export_bundle(model: BagnetLite, out_dir: str | Path, metadata: dict | None = None) -> Path:
    """Write conv{i}_w/b, head_A, head_b tensors and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gain = model.preset.head_gain
    layers = []
    for i, (w, b, stride) in enumerate(fold_batchnorm(model)):
        np.save(out / f"conv{i}_w.npy", w)
        np.save(out / f"conv{i}_b.npy", b)
        layers.append(
            {
                "kernel": int(w.shape[2]),
                "stride": int(stride),
                "in_channels": int(w.shape[1]),
                "out_channels": int(w.shape[0]),
            }
        )
    head_a = model.head.weight.detach().numpy().astype(np.float32) * gain
    head_b = model.head.bias.detach().numpy().astype(np.float32) * gain
    np.save(out / "head_A.npy", head_a)
    np.save(out / "head_b.npy", head_b)
    manifest = {"layers": layers, "num_classes": int(model.n_classes)}
    if metadata:
        manifest["metadata"] = metadata
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for i, spec in enumerate(layers):
        got = np.load(out / f"conv{i}_w.npy").shape
        want = (spec["out_channels"], spec["in_channels"], spec["kernel"], spec["kernel"])
        if got != want:
            raise RuntimeError(f"export mismatch for conv{i}_w: {got} vs manifest {want}")
    return out


def export_dataset(dataset_id: str, split: str, count: int, out_dir: str | Path, seed: int = 0) -> Path:
    """Write ``count`` images of a split as tensor files plus labels.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = make_split(dataset_id, split, count, seed)
    rows = []
    for i in range(count):
        name = f"{split}_{i:05d}.npy"
        np.save(out / name, images[i])
        rows.append((name, int(labels[i])))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    return out


def engine_config(
    dataset_id: str,
    bundle_dir: str | Path,
    dataset_dir: str | Path,
    out_path: str | Path,
    tau: list[float],
    patch_size: float | int = 0.024,
    seed: int = 0,
    workers: int = 1,
) -> Path:
    """Write an engine eval config pointing at an exported bundle/dataset."""
    spec = DATASETS[dataset_id]
    manifest = json.loads((Path(bundle_dir) / "manifest.json").read_text())
    config = {
        "image_size": [spec.image_size, spec.image_size],
        "architecture": [
            {"kernel": l["kernel"], "stride": l["stride"]} for l in manifest["layers"]
        ],
        "weights": str(Path(bundle_dir).resolve()),
        "dataset": str(Path(dataset_dir).resolve()),
        "patch_size": patch_size,
        "tau": tau,
        "seed": seed,
        "workers": workers,
    }
    out_path = Path(out_path)
    out_path.write_text(json.dumps(config, indent=2) + "\n")
    return out_path
