"""Momentum SGD training loop, learning-rate schedules, metrics and config."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import CIFAR_MEAN, CIFAR_STD, Dataset, SynthSpec, load_cifar10, synth_dataset
from .losses import softmax_cross_entropy
from .model import LayerGraph, Network, build_mini_resnet, build_resnet_shape_graph, parse_norm_choice
from .tensor import resolve_dtype

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "lr", "loss", "top1"]


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"divergence: non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    arch: str = "mini"
    depths: tuple = (2, 2, 2)
    base_width: int = 16
    norm: str = "bn"
    positions: str = "c"
    bnet_init: str = "identity"
    norm_momentum: float = 0.1
    eps: float = 1e-5
    epochs: int = 20
    batch_size: int = 64
    lr0: float = 0.05
    schedule: str = "cosine"
    step_period: int = 30
    step_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "f32"
    dataset: str = "synthetic"
    data_path: str | None = None
    data_mean: tuple = CIFAR_MEAN
    data_std: tuple = CIFAR_STD
    synth_n_train: int = 512
    synth_n_test: int = 256
    synth_classes: int = 4
    synth_size: int = 16
    synth_patch: int = 6
    augment: bool = False

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.data_mean = tuple(self.data_mean)
        self.data_std = tuple(self.data_std)
        self.validate()

    def validate(self) -> "TrainConfig":
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.schedule not in ("cosine", "step"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar10" and not self.data_path:
            raise ConfigError("cifar10 dataset needs data_path")
        if self.arch != "mini":
            raise ConfigError("only the mini architecture is trainable")
        resolve_dtype(self.dtype)
        parse_norm_choice(self.norm)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("depths", "data_mean", "data_std"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.synth_n_train, self.synth_n_test, self.synth_classes,
                         self.synth_size, self.synth_patch)


def lr_at(schedule: str, epoch: int, total_epochs: int, lr0: float,
          period: int = 30, factor: float = 0.1) -> float:
    if schedule == "step":
        return lr0 * factor ** (epoch // period)
    if schedule == "cosine":
        return 0.5 * lr0 * (1 + math.cos(math.pi * epoch / total_epochs))
    raise ConfigError(f"unknown schedule {schedule!r}")


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
             weight_decay: float) -> None:
    """In-place momentum SGD with weight decay folded into the gradient.

    ``v <- momentum * v + (grad + weight_decay * p)``; ``p <- p - lr * v``.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        t = p.dtype.type
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= t(momentum)
        v += g
        if weight_decay:
            v += t(weight_decay) * p
        p -= t(lr) * v


def build_graph(cfg: TrainConfig, num_classes: int, input_hw: int, in_channels: int = 3) -> LayerGraph:
    kind, extra = parse_norm_choice(cfg.norm)
    return build_mini_resnet(cfg.depths, cfg.base_width, kind, cfg.positions, num_classes,
                             input_hw, in_channels, extra_conv=extra)


def build_network(cfg: TrainConfig, num_classes: int, input_hw: int) -> Network:
    return Network(build_graph(cfg, num_classes, input_hw), cfg.dtype, cfg.seed, cfg.bnet_init,
                   cfg.norm_momentum, cfg.eps)


def load_dataset(cfg: TrainConfig) -> Dataset:
    dt = resolve_dtype(cfg.dtype)
    if cfg.dataset == "cifar10":
        return load_cifar10(cfg.data_path, cfg.data_mean, cfg.data_std, dt)
    return synth_dataset(cfg.synth_spec(), cfg.seed, dt)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 1]).permutation(n)


def _augment(x: np.ndarray, seed: int, epoch: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(epoch), int(step), 2])
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], x[..., ::-1], x)
    pad = 2
    xp = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy, dx = rng.integers(0, 2 * pad + 1, (2, n))
    return np.stack([xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and top-1 accuracy (percent) with every norm in eval mode."""
    mode = net.training
    net.eval()
    total, correct = 0.0, 0
    try:
        for s in range(0, len(x), batch_size):
            logits = net.forward(x[s:s + batch_size])
            loss, _ = softmax_cross_entropy(logits, y[s:s + batch_size])
            total += loss * len(logits)
            correct += int((logits.argmax(axis=1) == y[s:s + batch_size]).sum())
    finally:
        net.train(mode)
    return total / len(x), 100.0 * correct / len(x)


@dataclass
class TrainResult:
    network: Network
    rows: list
    checkpoint: Checkpoint
    config: TrainConfig
    steps: int = 0
    history: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        return format_metrics(self.rows)


def format_metrics(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRICS_HEADER)
    for r in rows:
        wr.writerow([r["epoch"], r["split"], repr(float(r["lr"])), repr(float(r["loss"])),
                     repr(float(r["top1"]))])
    return buf.getvalue()


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        return [{"epoch": int(r["epoch"]), "split": r["split"], "lr": float(r["lr"]),
                 "loss": float(r["loss"]), "top1": float(r["top1"])} for r in rd]


def network_checkpoint(net: Network, step: int) -> Checkpoint:
    return Checkpoint({k: v.copy() for k, v in net.state_dict().items()}, step)


def train(cfg: TrainConfig, dataset: Dataset | None = None, out_dir=None) -> TrainResult:
    """Train the configured network; optionally write metrics, config and checkpoint.

    Rows are appended per epoch for the ``train`` split (running mean over
    the epoch's batches, train-mode norms) and the ``test`` split (eval mode).
    """
    cfg.validate()
    data = dataset if dataset is not None else load_dataset(cfg)
    dt = resolve_dtype(cfg.dtype)
    x_train = data.x_train.astype(dt, copy=False)
    x_test = data.x_test.astype(dt, copy=False)
    net = build_network(cfg, data.num_classes, x_train.shape[2])
    params = net.parameters()
    velocity: dict = {}
    rows = []
    steps = 0
    n = len(x_train)
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.schedule, epoch, cfg.epochs, cfg.lr0, cfg.step_period, cfg.step_factor)
        order = epoch_order(cfg.seed, epoch, n)
        seen, total, correct = 0, 0.0, 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb, yb = x_train[idx], data.y_train[idx]
            if cfg.augment:
                xb = _augment(xb, cfg.seed, epoch, b)
            logits = net.forward(xb)
            loss, g = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            net.backward(g)
            sgd_step(params, net.gradients(), velocity, lr, cfg.momentum, cfg.weight_decay)
            steps += 1
            seen += len(idx)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        train_loss, train_top1 = total / seen, 100.0 * correct / seen
        rows.append({"epoch": epoch, "split": "train", "lr": lr, "loss": train_loss, "top1": train_top1})
        test_loss, test_top1 = evaluate(net, x_test, data.y_test, cfg.batch_size)
        if not (np.isfinite(test_loss) and np.isfinite(train_loss)):
            raise DivergenceError(epoch, test_loss)
        rows.append({"epoch": epoch, "split": "test", "lr": lr, "loss": test_loss, "top1": test_top1})
        log.info("epoch %d lr %.4g train loss %.4f top1 %.2f | test loss %.4f top1 %.2f",
                 epoch, lr, train_loss, train_top1, test_loss, test_top1)
    ckpt = network_checkpoint(net, steps)
    result = TrainResult(net, rows, ckpt, cfg, steps)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.metrics_csv())
        (out / "config.json").write_text(cfg.to_json())
        save_checkpoint(out / "checkpoint.bin", ckpt)
    return result


def curves_csv(rows) -> str:
    """One line per epoch with train and test loss/accuracy side by side."""
    by_epoch: dict = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], {})[r["split"]] = r
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "lr", "train_loss", "train_top1", "test_loss", "test_top1"])
    for e in sorted(by_epoch):
        tr, te = by_epoch[e].get("train", {}), by_epoch[e].get("test", {})
        wr.writerow([e, repr(float(tr.get("lr", te.get("lr", 0.0)))), repr(float(tr.get("loss", "nan"))),
                     repr(float(tr.get("top1", "nan"))), repr(float(te.get("loss", "nan"))),
                     repr(float(te.get("top1", "nan")))])
    return buf.getvalue()


def load_trained_network(cfg: TrainConfig, ckpt: Checkpoint, num_classes: int, input_hw: int) -> Network:
    net = build_network(cfg, num_classes, input_hw)
    net.load_state_dict(ckpt.tensors)
    return net
