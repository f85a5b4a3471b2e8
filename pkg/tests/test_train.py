import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnet.checkpoint import Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from bnet.data import (DataFormatError, SynthSpec, load_cifar10, read_cifar10_file, render_object_image,
                       synth_dataset, write_cifar10_file)
from bnet.losses import softmax_cross_entropy
from bnet.train import (ConfigError, DivergenceError, TrainConfig, curves_csv, epoch_order, lr_at,
                        read_metrics, sgd_step, train)
from oracles import scalar_sgd

TINY = dict(depths=(1, 1, 1), base_width=8, synth_size=8, synth_patch=4, batch_size=16)


# --- optimizer and schedule ---------------------------------------------------

def test_sgd_quadratic_matches_scalar_recurrence():
    p = {"w": np.array([1.0])}
    vel: dict = {}
    for _ in range(3):
        sgd_step(p, {"w": 2 * p["w"]}, vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p["w"][0] == pytest.approx(scalar_sgd(1.0, [lambda w: 2 * w] * 3, 0.1, 0.9, 0.0)[-1], abs=1e-15)
    # hand-unrolled: v1=2, w1=.8; v2=3.4, w2=.46; v3=3.98, w3=.062
    assert p["w"][0] == pytest.approx(0.062, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 1), st.floats(0, 0.99), st.floats(0, 0.1), st.integers(1, 6))
def test_sgd_vector_matches_scalar(w0, lr, mom, wd, steps):
    p = {"w": np.full(3, w0)}
    vel: dict = {}
    for _ in range(steps):
        sgd_step(p, {"w": np.sin(p["w"])}, vel, lr, mom, wd)
    want = scalar_sgd(w0, [math.sin] * steps, lr, mom, wd)[-1]
    assert np.allclose(p["w"], want, rtol=1e-12, atol=1e-12)


def test_sgd_zero_lr_is_fixed_point():
    p = {"w": np.arange(4.0)}
    before = p["w"].copy()
    sgd_step(p, {"w": np.ones(4)}, {}, 0.0, 0.9, 1e-4)
    assert np.array_equal(p["w"], before)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, {}, 0.1, 0.9, 0.0)


def test_lr_schedules():
    assert [lr_at("step", e, 90, 0.1, 30, 0.1) for e in (0, 29, 30, 60)] == pytest.approx([0.1, 0.1, 0.01, 0.001])
    assert lr_at("cosine", 0, 20, 0.05) == 0.05
    assert lr_at("cosine", 10, 20, 0.05) == pytest.approx(0.025)
    assert lr_at("cosine", 20, 20, 0.05) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ConfigError):
        lr_at("linear", 0, 1, 1.0)


# --- config ---------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = TrainConfig(norm="bnet3", depths=(1, 2, 3), seed=7, lr0=0.2)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert TrainConfig.from_json(path) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        TrainConfig.from_json(bad)
    for kw in ({"lr0": -1.0}, {"momentum": 1.0}, {"batch_size": 1}, {"schedule": "exp"},
               {"dataset": "cifar10"}, {"epochs": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


# --- checkpoint -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ck = Checkpoint({"a.weight": rng.standard_normal((2, 3, 1, 1)), "b": np.array([1.5, -0.0, np.pi])}, step=42)
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.step == 42 and list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    assert to_bytes(back) == to_bytes(ck)


def test_checkpoint_errors():
    raw = to_bytes(Checkpoint({"w": np.ones(3, np.float32)}, 1))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="offset"):
        from_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="expected"):
        from_bytes(raw, dtype="f64")
    assert from_bytes(raw, dtype="f32").tensors["w"].dtype == np.float32


# --- data -----------------------------------------------------------------------

def test_cifar_two_records(tmp_path):
    imgs = np.zeros((2, 3, 32, 32), np.uint8)
    imgs[0, 0, 0, 0] = 255
    imgs[1, 2, 31, 31] = 51
    path = tmp_path / "b.bin"
    write_cifar10_file(path, imgs, [3, 9])
    assert path.stat().st_size == 2 * 3073
    x, y = read_cifar10_file(path, mean=(0, 0, 0), std=(1, 1, 1), dtype=np.float64)
    assert y.tolist() == [3, 9] and x.shape == (2, 3, 32, 32)
    assert x[0, 0, 0, 0] == 1.0 and x[1, 2, 31, 31] == pytest.approx(0.2) and x.sum() == pytest.approx(1.2)
    x2, _ = read_cifar10_file(path)
    assert np.array_equal(x2, read_cifar10_file(path)[0])


def test_cifar_errors(tmp_path):
    path = tmp_path / "b.bin"
    write_cifar10_file(path, np.zeros((2, 3, 32, 32), np.uint8), [0, 1])
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DataFormatError, match="byte offset 3073"):
        read_cifar10_file(path)
    raw = bytearray(3073 * 2)
    raw[3073] = 10
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="label 10 .* byte offset 3073"):
        read_cifar10_file(path)
    with pytest.raises(DataFormatError):
        load_cifar10(tmp_path / "nothing")


def test_cifar_directory(tmp_path):
    for name, lab in (("data_batch_1.bin", [1, 2]), ("data_batch_2.bin", [3]), ("test_batch.bin", [4])):
        write_cifar10_file(tmp_path / name, np.zeros((len(lab), 3, 32, 32), np.uint8), lab)
    ds = load_cifar10(tmp_path)
    assert ds.y_train.tolist() == [1, 2, 3] and ds.y_test.tolist() == [4] and ds.num_classes == 10


def test_synth_deterministic_and_balanced():
    spec = SynthSpec(n_train=50, n_test=22, num_classes=4, size=8, patch=4)
    a, b = synth_dataset(spec, 3), synth_dataset(spec, 3)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.x_train, synth_dataset(spec, 4).x_train)
    for y in (a.y_train, a.y_test):
        counts = np.bincount(y, minlength=4)
        assert counts.max() - counts.min() <= 1
    assert np.allclose(a.x_train.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    top, left, h, w = a.boxes_train.T
    assert np.all((top + h <= 8) & (left + w <= 8))


def test_synth_linearly_separable():
    """A ridge-regression probe on raw pixels beats chance by a wide margin."""
    ds = synth_dataset(SynthSpec(n_train=400, n_test=200, size=8, patch=4), 0, np.float64)
    X = ds.x_train.reshape(len(ds.x_train), -1)
    Y = np.eye(ds.num_classes)[ds.y_train]
    W = np.linalg.solve(X.T @ X + 10 * np.eye(X.shape[1]), X.T @ Y)
    acc = np.mean((ds.x_test.reshape(len(ds.x_test), -1) @ W).argmax(1) == ds.y_test)
    assert acc > 0.5


def test_render_object_image_matches_box():
    spec = SynthSpec(size=8, patch=4)
    ds = synth_dataset(spec, 1)
    img, box = render_object_image(spec, 1, 2, 99, ds.meta["mean"], ds.meta["std"])
    assert img.shape == (1, 3, 8, 8) and len(box) == 4


# --- loss -----------------------------------------------------------------------

def test_cross_entropy_values():
    loss, g = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(math.log(4))
    assert np.allclose(g.sum(axis=1), 0) and g[0, 0] == pytest.approx((0.25 - 1) / 2)
    big, _ = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert big == pytest.approx(0.0, abs=1e-12)


# --- training loop --------------------------------------------------------------

def test_epoch_order_is_pure():
    assert np.array_equal(epoch_order(1, 2, 50), epoch_order(1, 2, 50))
    assert not np.array_equal(epoch_order(1, 2, 50), epoch_order(1, 3, 50))
    assert sorted(epoch_order(0, 0, 50)) == list(range(50))


def test_train_smoke_writes_outputs(tmp_path):
    cfg = TrainConfig(epochs=1, synth_n_train=64, synth_n_test=32, **TINY)
    res = train(cfg, out_dir=tmp_path)
    assert [r["split"] for r in res.rows] == ["train", "test"]
    assert all(math.isfinite(r["loss"]) and 0 <= r["top1"] <= 100 for r in res.rows)
    assert read_metrics(tmp_path / "metrics.csv") == res.rows
    assert TrainConfig.from_json(tmp_path / "config.json") == cfg
    assert load_checkpoint(tmp_path / "checkpoint.bin").step == res.steps == 4
    assert curves_csv(res.rows).count("\n") == 2


def test_zero_lr_leaves_parameters(tmp_path):
    cfg = TrainConfig(epochs=1, lr0=0.0, synth_n_train=32, synth_n_test=16, norm="bnet3", **TINY)
    res = train(cfg)
    fresh = train(cfg.replace(epochs=1, lr0=0.0))
    for k, v in res.network.parameters().items():
        assert np.array_equal(v, fresh.network.parameters()[k])
    from bnet.train import build_network
    init = build_network(cfg, 4, 8).parameters()
    for k, v in res.network.parameters().items():
        assert np.array_equal(v, init[k]), k


def test_bnconv_trains():
    res = train(TrainConfig(epochs=1, synth_n_train=32, synth_n_test=16, norm="bnconv", **TINY))
    assert "stage1.block1.dwconv.weight" in res.network.parameters()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    with pytest.raises(DivergenceError, match="divergence"):
        train(TrainConfig(epochs=2, lr0=1e6, synth_n_train=32, synth_n_test=16, **TINY))


@pytest.mark.parametrize("norm", ["bn", "bnet3"])
def test_overfit_small_set(norm):
    cfg = TrainConfig(epochs=20, lr0=0.05, norm=norm, synth_n_train=32, synth_n_test=16, **TINY)
    res = train(cfg)
    tr = [r for r in res.rows if r["split"] == "train"]
    assert tr[-1]["top1"] == 100.0 and tr[-1]["loss"] < 0.01
    losses = [r["loss"] for r in tr[:5]]
    assert losses[4] < losses[0]
