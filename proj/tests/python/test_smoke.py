"""Python smoke tests over the compiled engine bindings."""

import json
import math

import numpy as np
import pytest

import ttabench as tb


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    train = tb.generate_synthshapes(classes=10, per_class=24, seed=1)
    model = tb.build_model("smallcnn-32", 10, seed=7)
    trained, losses = tb.pretrain_source(model, train, epochs=2, lr=0.05, seed=7)
    target = tb.make_target_domain(
        tb.generate_synthshapes(classes=10, per_class=16, seed=2),
        [("gaussian_noise", 4)],
        seed=9,
    )
    storage = tmp_path_factory.mktemp("models")
    return {"train": train, "model": trained, "target": target,
            "losses": losses, "storage": str(storage)}


def test_version():
    assert tb.__version__


def test_dataset_shapes():
    ds = tb.generate_synthshapes(classes=10, per_class=4, seed=3)
    assert ds.size == 40
    imgs = ds.images()
    assert imgs.shape == (40, 3, 32, 32)
    assert imgs.dtype == np.float32
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0
    assert sorted(ds.category_set()) == list(range(10))
    again = tb.generate_synthshapes(classes=10, per_class=4, seed=3)
    assert ds.digest() == again.digest()


def test_corruption_determinism_and_range():
    img = tb.generate_synthshapes(classes=10, per_class=1, seed=5).image(0)
    for tau in tb.corruption_registry():
        a = tb.apply_corruption(img, tau, 5, seed=11)
        b = tb.apply_corruption(img, tau, 5, seed=11)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert tb.psnr(img, a) < tb.psnr(img, tb.apply_corruption(img, tau, 1, seed=11))
    stacked = tb.compose(img, [("brightness", 5), ("zoom_blur", 5)], seed=3)
    assert stacked.shape == (3, 32, 32)
    assert len(tb.default_pairs()) == 5
    assert len(tb.default_triplets()) == 5


def test_pretrain_loss_decreases(tiny_world):
    losses = tiny_world["losses"]
    assert len(losses) == 2
    assert losses[1] < losses[0]


def test_forward_and_accuracy(tiny_world):
    model = tiny_world["model"]
    train = tiny_world["train"]
    logits, emb = tb.forward_eval(model, train.images()[:8])
    assert logits.shape == (8, 10)
    assert emb.shape == (8, model.feature_dim)
    acc = tb.accuracy(model, train)
    assert 0.0 <= acc <= 1.0
    assert tb.relative_gain(0.3705, 0.2689) == pytest.approx(1.3778, abs=1e-3)
    with pytest.raises(tb.GainError):
        tb.relative_gain(0.5, 0.0)


def test_model_file_roundtrip(tiny_world, tmp_path):
    model = tiny_world["model"]
    path = tmp_path / "model.ttbm"
    model.save(path)
    loaded = tb.load_model(path)
    assert loaded.digest() == model.digest()


def test_adapt_tent_update_set(tiny_world):
    model = tiny_world["model"]
    split = tb.scenario1(tiny_world["target"], 64, seed=4)
    adapted, info = tb.adapt(
        "tent", model, split, {"seed": 3, "storage_dir": tiny_world["storage"]}
    )
    assert not info["failed"]
    assert info["batches"] == 1
    # only normalization parameters may differ
    affine = set(model.group_params("norm_affine"))
    stats = set(model.group_params("norm_stats"))
    for name in model.param_names():
        same = np.array_equal(model.param(name), adapted.param(name))
        if not same:
            assert name in affine | stats, name
    # determinism
    again, _ = tb.adapt(
        "tent", model, split, {"seed": 3, "storage_dir": tiny_world["storage"]}
    )
    assert again.digest() == adapted.digest()


def test_scenario2_split(tiny_world):
    split = tb.scenario2(tiny_world["target"], k=3, per_class=10, seed=6)
    assert split.delta_size == 30
    assert split.ood_size > 0
    desc = split.descriptor
    assert desc["id"] == "s2"
    assert len(desc["params"]["categories"]) == 3


def test_batch_trace(tiny_world):
    split = tb.scenario1(tiny_world["target"], 128, seed=8)
    accs, slope = tb.batch_trace(
        "none", tiny_world["model"], split, {"seed": 2}
    )
    assert len(accs) == 2
    assert slope is not None


def test_profile_ordering(tiny_world):
    split = tb.scenario1(tiny_world["target"], 64, seed=8)
    reports = tb.profile_methods(
        ["none", "tent"], tiny_world["model"], split,
        {"seed": 2, "storage_dir": tiny_world["storage"]},
    )
    by_method = {r["method"]: r for r in reports}
    assert by_method["none"]["relative_peak"] == pytest.approx(1.0)
    assert by_method["tent"]["relative_peak"] > 1.0


def test_config_driven_run(tmp_path):
    config = tb.default_run_config()
    config["dataset"]["train_per_class"] = 8
    config["dataset"]["target_per_class"] = 12
    config["model"]["path"] = str(tmp_path / "m.ttbm")
    config["model"]["pretrain"]["epochs"] = 1
    config["scenario"]["sizes"] = [16]
    config["methods"] = ["none"]
    config["seeds"] = 2
    config["output_dir"] = str(tmp_path / "out")
    tb.run_pretrain(config)
    tb.run_experiment(config)
    records = (tmp_path / "out" / "records.jsonl").read_text().splitlines()
    assert len(records) == 2
    rec = json.loads(records[0])
    assert rec["method"] == "none"
    assert rec["xi_d_t"] is not None
    tb.run_report(tmp_path / "out", tmp_path / "charts")
    assert (tmp_path / "charts" / "s1_accuracy_vs_size.svg").exists()
