"""Training loop and the train-and-export entry point."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from bagnetlite.data import DATASETS, make_split
from bagnetlite.export import export_bundle
from bagnetlite.model import ARCH_PRESETS, BagnetLite


def _to_torch(images: np.ndarray) -> torch.Tensor:
    # engine datasets are channels-last; torch wants channels-first
    return torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()


def train_model(
    dataset_id: str,
    arch: str,
    epochs: int,
    seed: int,
    n_train: int = 1200,
    batch_size: int = 64,
    lr: float = 3e-3,
    log=print,
) -> BagnetLite:
    spec = DATASETS[dataset_id]
    preset = ARCH_PRESETS[arch]
    torch.manual_seed(seed)
    model = BagnetLite(preset, n_classes=spec.n_classes)
    if arch == "identity":
        model.init_identity()
        return model
    images, labels = make_split(dataset_id, "train", n_train, seed)
    x = _to_torch(images)
    y = torch.from_numpy(labels)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    order_rng = np.random.default_rng(seed)
    model.train()
    for epoch in range(epochs):
        order = order_rng.permutation(n_train)
        total, hits, loss_sum = 0, 0, 0.0
        for start in range(0, n_train, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            xb, yb = x[idx], y[idx]
            optimizer.zero_grad()
            logits = model(xb)
            loss = loss_fn(logits, yb)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(idx)
            hits += int((logits.argmax(dim=1) == yb).sum())
            total += len(idx)
        log(f"epoch {epoch}: loss {loss_sum / total:.4f}, train acc {hits / total:.3f}")
    model.eval()
    return model


def train_and_export(
    dataset_id: str,
    arch: str,
    epochs: int,
    seed: int,
    out_dir: str | Path,
    n_train: int = 1200,
    log=print,
) -> Path:
    """Train (or identity-init) a model and write the engine weight bundle."""
    start = time.perf_counter()
    model = train_model(dataset_id, arch, epochs, seed, n_train=n_train, log=log)
    bundle = export_bundle(
        model,
        out_dir,
        metadata={
            "dataset": dataset_id,
            "arch": arch,
            "epochs": epochs,
            "seed": seed,
            "n_train": n_train,
            "head_gain": ARCH_PRESETS[arch].head_gain,
        },
    )
    log(f"exported {arch} bundle to {bundle} in {time.perf_counter() - start:.1f}s")
    return bundle


@torch.no_grad()
def model_logits(model: BagnetLite, images: np.ndarray) -> np.ndarray:
    """Trainer-side logits for channels-last float32 images (with head gain)."""
    model.eval()
    out = model(_to_torch(images)).numpy()
    return out * ARCH_PRESETS[model.preset.name].head_gain
