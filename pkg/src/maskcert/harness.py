"""Batch pipeline: config, datasets, accuracy sweeps, and attack evaluation.

A run is described by one JSON config (architecture, weight bundle, dataset,
patch size, tau grid, budgets, seed, workers).  Datasets are directories of
float32 tensor files plus a ``labels.csv`` mapping filename to class index,
which keeps the engine free of any image-decoding stack.

Per image the masked window sweep is computed once; every tau in the grid
is then just a threshold pass over the cached per-window votes, so a grid
costs barely more than a single threshold.  Clean accuracy counts an image
as correct only when the detector returns the correct label with no alert;
the JSON report also carries the alert-blind tally so both conventions are
visible.  Serialized reports contain no timing, so a fixed (config, seed)
reproduces them byte for byte regardless of worker count; wall-clock goes
to stderr.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from maskcert.attacks import sweep_feature_attacks, sweep_pixel_attacks
from maskcert.defense import DefenseParams, certify_features, sweep_features
from maskcert.errors import ConfigError
from maskcert.geometry import (
    ConvLayerSpec,
    ThreatModel,
    compose_receptive_field,
    feature_extent,
    mask_window_size,
)
from maskcert.model import ModelWeights, extract_features, load_model
from maskcert.tensorio import load_tensor


@dataclass(frozen=True)
class EvalConfig:
    image_size: tuple[int, int]
    architecture: list[ConvLayerSpec]
    weights: Path | None
    dataset: Path | None
    patch_size: int | float
    tau: list[float]
    attack_budget: int = 20
    attack_stride: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        for t in self.tau:
            if not 0.0 <= t < 1.0:
                raise ConfigError(f"tau {t} outside [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.attack_budget < 0 or self.attack_stride < 1:
            raise ConfigError("attack budget must be >= 0 and stride >= 1")


def load_config(path: str | Path) -> EvalConfig:
    """Parse a JSON config; relative paths resolve against the config file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = path.parent

    def resolve(key: str) -> Path | None:
        if raw.get(key) is None:
            return None
        p = Path(raw[key])
        return p if p.is_absolute() else base / p

    if "image_size" not in raw:
        raise ConfigError("config needs image_size [height, width]")
    arch = [ConvLayerSpec(int(l["kernel"]), int(l["stride"])) for l in raw.get("architecture", [])]
    weights = resolve("weights")
    if not arch:
        if weights is None:
            raise ConfigError("config needs an architecture or a weight bundle")
        manifest = json.loads((weights / "manifest.json").read_text())
        arch = [ConvLayerSpec(int(l["kernel"]), int(l["stride"])) for l in manifest["layers"]]
    return EvalConfig(
        image_size=(int(raw["image_size"][0]), int(raw["image_size"][1])),
        architecture=arch,
        weights=weights,
        dataset=resolve("dataset"),
        patch_size=raw.get("patch_size", 0.02),
        tau=[float(t) for t in raw.get("tau", [])],
        attack_budget=int(raw.get("attack_budget", 20)),
        attack_stride=int(raw.get("attack_stride", 1)),
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
    )


def apply_overrides(
    config: EvalConfig,
    tau: list[float] | None = None,
    seed: int | None = None,
    workers: int | None = None,
) -> EvalConfig:
    if tau:
        config = replace(config, tau=tau)
    if seed is not None:
        config = replace(config, seed=seed)
    if workers is not None:
        config = replace(config, workers=workers)
    return config


def rf_info(config: EvalConfig) -> dict:
    """Receptive field, feature extents, mask window size, and window count."""
    rf = compose_receptive_field(config.architecture)
    h, w = config.image_size
    fh = feature_extent(h, config.architecture)
    fw = feature_extent(w, config.architecture)
    p = ThreatModel(config.patch_size).resolve(h, w)
    size = mask_window_size(p, rf, min(fh, fw))
    count = (fh - size + 1) * (fw - size + 1)
    return {
        "receptive_field": {"size": rf.size, "stride": rf.stride, "offset": rf.offset},
        "image_size": [h, w],
        "feature_extent": [fh, fw],
        "patch_size_pixels": p,
        "mask_window_size": size,
        "window_count": count,
    }


def render_rf_info(info: dict) -> str:
    rf = info["receptive_field"]
    return "\n".join(
        [
            f"receptive field   : {rf['size']} px, stride {rf['stride']} px, offset {rf['offset']}",
            f"image size        : {info['image_size'][0]} x {info['image_size'][1]}",
            f"feature extent    : {info['feature_extent'][0]} x {info['feature_extent'][1]}",
            f"patch size        : {info['patch_size_pixels']} px",
            f"mask window size  : {info['mask_window_size']} cells",
            f"window count      : {info['window_count']}",
        ]
    )


def load_dataset(dataset_dir: str | Path) -> list[tuple[str, Path, int]]:
    """Read labels.csv (header ``filename,label``) and check files exist."""
    dataset_dir = Path(dataset_dir)
    labels_path = dataset_dir / "labels.csv"
    if not labels_path.is_file():
        raise ConfigError(f"no labels.csv in {dataset_dir}")
    entries = []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise ConfigError(f"labels.csv header must be filename,label, got {header}")
        for row in reader:
            if len(row) != 2:
                raise ConfigError(f"bad labels.csv row: {row}")
            name, label = row[0], int(row[1])
            path = dataset_dir / name
            if not path.is_file():
                raise ConfigError(f"dataset lists missing file {name}")
            entries.append((name, path, label))
    return entries


@dataclass(frozen=True)
class EvalReport:
    n_images: int
    seed: int
    patch_size_pixels: int
    mask_window_size: int
    feature_extent: tuple[int, int]
    top1_accuracy: float
    per_tau: list[dict]
    elapsed_seconds: float = field(compare=False)

    def to_json(self) -> str:
        # timing stays out: reports must be byte-identical for a fixed seed
        payload = {
            "n_images": self.n_images,
            "seed": self.seed,
            "patch_size_pixels": self.patch_size_pixels,
            "mask_window_size": self.mask_window_size,
            "feature_extent": list(self.feature_extent),
            "top1_accuracy": self.top1_accuracy,
            "per_tau": self.per_tau,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def render_table(self) -> str:
        lines = [f"{'tau':>6}  {'clean':>7}  {'robust':>7}"]
        for row in self.per_tau:
            lines.append(
                f"{row['tau']:>6.3f}  {row['clean_accuracy']:>7.4f}  "
                f"{row['provable_robust_accuracy']:>7.4f}"
            )
        return "\n".join(lines)


_STATE: dict = {}


def _init_worker(bundle_dir: str, window_size: int, extras: dict) -> None:
    _STATE["weights"] = load_model(bundle_dir)
    _STATE["window_size"] = window_size
    _STATE.update(extras)


def _consensus_task(item: tuple[str, str, int]) -> tuple[int, int, np.ndarray, np.ndarray]:
    name, path, y = item
    weights: ModelWeights = _STATE["weights"]
    u = extract_features(load_tensor(path), weights)
    sweep = sweep_features(u, weights, _STATE["window_size"])
    return y, sweep.base.label, sweep.labels, sweep.confidences


def _attack_task(item: tuple[str, str, int]) -> dict:
    name, path, y = item
    weights: ModelWeights = _STATE["weights"]
    x = load_tensor(path)
    u = extract_features(x, weights)
    per_tau = []
    for t in _STATE["taus"]:
        params = DefenseParams(tau=t, window_size=_STATE["window_size"])
        certification = certify_features(u, y, weights, params)
        common = dict(
            budget=_STATE["budget"],
            seed=_STATE["seed"],
            patch_size=_STATE["patch"],
            stride=_STATE["stride"],
            certification=certification,
            image_id=name,
        )
        pixel = sweep_pixel_attacks(x, y, weights, params, **common)
        feature = sweep_feature_attacks(x, y, weights, params, **common)
        per_tau.append(
            {
                "tau": t,
                "certified": certification.certified,
                "pixel": pixel.to_json(),
                "feature": feature.to_json(),
            }
        )
    return {"image_id": name, "per_tau": per_tau}


def _run_tasks(task, items, config: EvalConfig, extras: dict) -> list:
    if config.weights is None:
        raise ConfigError("this command needs a weight bundle in the config")
    manifest_arch = load_model(config.weights).layer_specs()
    if manifest_arch != config.architecture:
        raise ConfigError("config architecture disagrees with the weight bundle manifest")
    info = rf_info(config)
    if config.workers == 1:
        _init_worker(str(config.weights), info["mask_window_size"], extras)
        return [task(item) for item in items]
    with ProcessPoolExecutor(
        max_workers=config.workers,
        initializer=_init_worker,
        initargs=(str(config.weights), info["mask_window_size"], extras),
    ) as pool:
        return list(pool.map(task, items, chunksize=1))


def evaluate(config: EvalConfig) -> EvalReport:
    """Clean and provable robust accuracy over the dataset for each tau."""
    if not config.tau:
        raise ConfigError("evaluate needs a non-empty tau list")
    if config.dataset is None:
        raise ConfigError("evaluate needs a dataset path")
    entries = load_dataset(config.dataset)
    if not entries:
        raise ConfigError(f"dataset {config.dataset} is empty")
    start = time.perf_counter()
    items = [(name, str(path), label) for name, path, label in entries]
    results = _run_tasks(_consensus_task, items, config, extras={})
    info = rf_info(config)
    n = len(results)
    top1 = sum(1 for y, label0, _, _ in results if label0 == y)
    per_tau = []
    for t in config.tau:
        clean = certified = alerts = 0
        for y, label0, labels, confs in results:
            alerted = bool(np.any((confs > t) & (labels != label0)))
            alerts += alerted
            clean += (not alerted) and label0 == y
            certified += bool(np.all((confs > t) & (labels == y)))
        per_tau.append(
            {
                "tau": t,
                "clean_accuracy": clean / n,
                "provable_robust_accuracy": certified / n,
                "clean_correct": clean,
                "certified": certified,
                "alerts_on_clean": alerts,
                "correct_ignoring_alerts": top1,
            }
        )
    return EvalReport(
        n_images=n,
        seed=config.seed,
        patch_size_pixels=info["patch_size_pixels"],
        mask_window_size=info["mask_window_size"],
        feature_extent=tuple(info["feature_extent"]),
        top1_accuracy=top1 / n,
        per_tau=per_tau,
        elapsed_seconds=time.perf_counter() - start,
    )


@dataclass(frozen=True)
class AttackEvalReport:
    n_images: int
    seed: int
    budget: int
    stride: int
    images: list[dict]
    total_violations: int
    elapsed_seconds: float = field(compare=False)

    def to_json(self) -> str:
        payload = {
            "n_images": self.n_images,
            "seed": self.seed,
            "budget": self.budget,
            "stride": self.stride,
            "total_violations": self.total_violations,
            "images": self.images,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def attack_eval(config: EvalConfig) -> AttackEvalReport:
    """Run both attack sweeps against every image at every tau.

    Certified images must come through with zero undetected
    misclassifications; any violation falsifies the certificate.
    """
    if not config.tau:
        raise ConfigError("attack-eval needs a non-empty tau list")
    if config.dataset is None:
        raise ConfigError("attack-eval needs a dataset path")
    entries = load_dataset(config.dataset)
    start = time.perf_counter()
    info = rf_info(config)
    extras = {
        "taus": config.tau,
        "budget": config.attack_budget,
        "seed": config.seed,
        "patch": info["patch_size_pixels"],
        "stride": config.attack_stride,
    }
    items = [(name, str(path), label) for name, path, label in entries]
    images = _run_tasks(_attack_task, items, config, extras) if entries else []
    violations = sum(
        len(row[mode]["violations"])
        for image in images
        for row in image["per_tau"]
        for mode in ("pixel", "feature")
    )
    return AttackEvalReport(
        n_images=len(images),
        seed=config.seed,
        budget=config.attack_budget,
        stride=config.attack_stride,
        images=images,
        total_violations=violations,
        elapsed_seconds=time.perf_counter() - start,
    )
