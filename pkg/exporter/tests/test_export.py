import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from bagnetlite.data import DATASETS, generate_image, make_split
from bagnetlite.export import engine_config, export_bundle, export_dataset, fold_batchnorm
from bagnetlite.model import ARCH_PRESETS, BagnetLite
from bagnetlite.train import model_logits, train_and_export, train_model


def run_engine(*args: str) -> subprocess.CompletedProcess:
    cmd = [sys.executable, "-m", "maskcert.cli", *args]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, f"{cmd} failed:\n{proc.stdout}\n{proc.stderr}"
    return proc


def write_engine_config(tmp_path, bundle, image_size, tau=(0.5,), dataset=None, patch=0.024):
    config = {
        "image_size": [image_size, image_size],
        "weights": str(bundle),
        "patch_size": patch,
        "tau": list(tau),
    }
    if dataset is not None:
        config["dataset"] = str(dataset)
    path = tmp_path / "engine.json"
    path.write_text(json.dumps(config))
    return path


def engine_batch_logits(tmp_path, bundle, images, image_size):
    """Unmasked logits from the engine, driven through its CLI."""
    config = write_engine_config(tmp_path, bundle, image_size)
    image_args = []
    for i, img in enumerate(images):
        p = tmp_path / f"in_{i:03d}.npy"
        np.save(p, img.astype(np.float32))
        image_args += ["--image", str(p)]
    out = tmp_path / "detect.json"
    run_engine("detect", "--config", str(config), *image_args, "--out", str(out))
    payload = json.loads(out.read_text())
    if isinstance(payload, dict):
        payload = [payload]
    return np.array([entry["prediction"]["logits"] for entry in payload])


def test_dataset_is_deterministic_and_in_range():
    a, la = make_split("synth10", "val", 16, seed=3)
    b, lb = make_split("synth10", "val", 16, seed=3)
    assert np.array_equal(a, b)
    assert np.array_equal(la, lb)
    assert a.dtype == np.float32
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0
    c, _ = make_split("synth10", "val", 16, seed=4)
    assert not np.array_equal(a, c)


def test_export_dataset_roundtrips_pixel_exact(tmp_path):
    out = export_dataset("synth10", "val", 10, tmp_path / "data", seed=1)
    with open(out / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["filename", "label"]
    assert len(rows) == 11
    spec = DATASETS["synth10"]
    for name, label in rows[1:]:
        idx = int(name.split("_")[1].split(".")[0])
        back = np.load(out / name)
        again = generate_image(spec, "val", idx, int(label), seed=1)
        assert np.array_equal(back, again)


def test_export_dataset_empty_and_bad_split(tmp_path):
    out = export_dataset("synth10", "val", 0, tmp_path / "empty")
    with open(out / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["filename", "label"]]
    with pytest.raises(ValueError):
        export_dataset("synth10", "dev", 4, tmp_path / "bad")
    with pytest.raises(ValueError):
        make_split("imagenet", "val", 4, seed=0)


def test_identity_preset_exports_a_passthrough_bundle(tmp_path):
    bundle = train_and_export("synth4", "identity", epochs=0, seed=0, out_dir=tmp_path / "b")
    w = np.load(bundle / "conv0_w.npy")
    assert w.shape == (3, 3, 1, 1)
    assert np.array_equal(w[:, :, 0, 0], np.eye(3, dtype=np.float32))
    assert np.array_equal(np.load(bundle / "conv0_b.npy"), np.zeros(3, np.float32))
    assert np.array_equal(np.load(bundle / "head_A.npy"), np.eye(4, 3, dtype=np.float32))
    manifest = json.loads((bundle / "manifest.json").read_text())
    assert manifest["num_classes"] == 4
    assert manifest["layers"][0] == {
        "kernel": 1, "stride": 1, "in_channels": 3, "out_channels": 3,
    }
    # with identity weights the engine's logits are the per-channel means of
    # the input, zero for the padded fourth class
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3), dtype=np.float32)
    logits = engine_batch_logits(tmp_path, bundle, [img], image_size=16)[0]
    want = img.reshape(-1, 3).mean(axis=0)
    assert np.max(np.abs(logits[:3] - want)) <= 1e-5
    assert abs(logits[3]) <= 1e-7


def test_fold_batchnorm_matches_torch_forward():
    import torch

    torch.manual_seed(5)
    model = BagnetLite(ARCH_PRESETS["tiny"], n_classes=4)
    # push a couple of batches through so BN stats are not the init values
    images, _ = make_split("synth4", "train", 64, seed=5)
    model.train()
    with torch.no_grad():
        model(torch.from_numpy(images).permute(0, 3, 1, 2))
    model.eval()
    folded = fold_batchnorm(model)
    assert len(folded) == len(ARCH_PRESETS["tiny"].layers)
    for w, b, _ in folded:
        assert np.all(np.isfinite(w)) and np.all(np.isfinite(b))
    # folded conv must equal conv+BN in eval mode on a random input
    x = torch.from_numpy(images[:4]).permute(0, 3, 1, 2)
    with torch.no_grad():
        want = model.features(x).numpy()
    got = x.numpy()
    for w, b, stride in folded:
        out = []
        t = torch.from_numpy(got)
        conv = torch.nn.functional.conv2d(t, torch.from_numpy(w), torch.from_numpy(b), stride)
        got = torch.relu(conv).numpy()
        del out
    assert np.max(np.abs(got - want)) <= 1e-4


def test_cross_stack_agreement_untrained_100_inputs(tmp_path):
    bundle = train_and_export("synth10", "cifar-lite", epochs=0, seed=7, out_dir=tmp_path / "b")
    rng = np.random.default_rng(7)
    images = rng.random((100, 32, 32, 3), dtype=np.float32)
    model = train_model("synth10", "cifar-lite", epochs=0, seed=7)
    ours = model_logits(model, images)
    theirs = engine_batch_logits(tmp_path, bundle, images, image_size=32)
    worst = float(np.max(np.abs(ours - theirs)))
    assert worst <= 1e-3, f"engine/trainer logits disagree by {worst}"


def test_trained_model_meets_loose_accuracy_and_certification_bounds(tmp_path):
    """Short-trained 10-class 32px model: clean accuracy above chance and a
    strictly positive certification rate at tau=0.4 through the engine CLI."""
    bundle = train_and_export(
        "synth10", "cifar-lite", epochs=2, seed=0, out_dir=tmp_path / "bundle", n_train=1200
    )
    data = export_dataset("synth10", "val", 120, tmp_path / "val", seed=0)
    config = engine_config(
        "synth10", bundle, data, tmp_path / "eval.json", tau=[0.4], workers=2
    )
    out = tmp_path / "report.json"
    run_engine("evaluate", "--config", str(config), "--out", str(out))
    report = json.loads(out.read_text())
    row = report["per_tau"][0]
    assert report["n_images"] == 120
    assert row["clean_accuracy"] > 0.3, f"clean accuracy too low: {row}"
    assert row["provable_robust_accuracy"] > 0.0, f"nothing certified: {row}"
    # held-out cross-stack agreement for the trained weights
    images, _ = make_split("synth10", "val", 32, seed=99)
    model = train_model("synth10", "cifar-lite", epochs=2, seed=0, n_train=1200, log=lambda *_: None)
    ours = model_logits(model, images)
    theirs = engine_batch_logits(tmp_path, bundle, images, image_size=32)
    assert float(np.max(np.abs(ours - theirs))) <= 1e-3
    print(
        f"\n[ACCEPTANCE][secondary] trained export: PASS "
        f"(clean {row['clean_accuracy']:.3f}, certified {row['provable_robust_accuracy']:.3f} at tau=0.4)"
    )
