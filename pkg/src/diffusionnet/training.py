"""Losses, ADAM, augmentation and the fit / evaluate loops."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .network import featurize, init_params, network_forward, save_checkpoint

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "test_acc", "seconds"]


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 200
    decay_every: int = 50
    decay_factor: float = 0.5
    batch_size: int = 1
    label_smoothing: float = 0.0
    augmentation: str = "none"  # none | rot_z | rot_full
    seed: int = 0
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.augmentation not in ("none", "rot_z", "rot_full"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config field(s): {sorted(unknown)}")
        return cls(**d)


def default_train_config(task="segmentation", **overrides):
    """Training defaults; classification adds 0.2 label smoothing."""
    if task == "classification":
        overrides.setdefault("label_smoothing", 0.2)
    return TrainConfig(**overrides)


def learning_rate(config, epoch):
    """Step schedule for 1-based ``epoch``."""
    return config.lr * config.decay_factor ** ((epoch - 1) // config.decay_every)


def label_smoothed_cross_entropy(logits, targets, alpha=0.0):
    """Mean over rows of ``-sum_c q_c log softmax(logits)_c`` with
    ``q = (1 - alpha) onehot + alpha / n_classes``."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    N, C = logits.shape
    if len(targets) != N:
        raise ValueError(f"{len(targets)} targets for {N} rows")
    if targets.min() < 0 or targets.max() >= C:
        raise ValueError(f"class index out of range [0, {C})")
    q = np.full((N, C), alpha / C)
    q[np.arange(N), targets] += 1.0 - alpha
    return ad.scale(ad.total(ad.mul(ad.log_softmax(logits), Tensor(q))), -1.0 / N)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params):
    return AdamState(m={n: np.zeros_like(t.data) for n, t in params.trainable()},
                     v={n: np.zeros_like(t.data) for n, t in params.trainable()})


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update using each parameter's ``.grad``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, t in params.trainable():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def project_diffusion_times(params):
    """Keep learnable diffusion times at or above the clamp floor.

    A single ADAM step is ~lr in size, far larger than the initial times, so
    without this projection a time can overshoot below the floor, where its
    gradient vanishes, and never recover.
    """
    for name, t in params.trainable():
        if name.endswith(".time"):
            np.maximum(t.data, ad.TIME_EPS, out=t.data)


def random_rotation_matrix(mode, rng):
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if mode == "rot_z":
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if mode == "rot_full":
        return Rotation.random(random_state=rng).as_matrix()
    raise ValueError(f"unknown rotation mode {mode!r}")


def random_rotation(positions, mode, rng):
    """Rotate (V, 3) positions about z (``rot_z``) or uniformly (``rot_full``)."""
    return np.asarray(positions) @ random_rotation_matrix(mode, rng).T


# --------------------------------------------------------------------------
# Datasets

@dataclass
class Sample:
    """A shape with its operators and targets (per-vertex labels or a class)."""

    shape: object
    ops: object
    target: np.ndarray
    name: str = ""
    faces: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None

    @classmethod
    def from_shape(cls, shape, ops):
        if shape.labels is not None:
            target = np.asarray(shape.labels)
        elif shape.class_label is not None:
            target = np.array([shape.class_label])
        else:
            raise ValueError(f"shape {shape.name!r} has no labels")
        faces = shape.geometry.faces if shape.is_mesh else None
        return cls(shape, ops, target, name=shape.name, faces=faces,
                   edges=shape.geometry.edges() if shape.is_mesh else None)


def _forward(sample, params, train, rng, positions=None):
    x = featurize(sample.shape, sample.ops, params.config, positions=positions)
    return network_forward(x, sample.ops, params, train=train, rng=rng, return_logits=True,
                           faces=sample.faces, edges=sample.edges)


def predict(sample, params):
    """Per-row class predictions in eval mode."""
    with ad.no_grad():
        logits = _forward(sample, params, train=False, rng=None)
    return logits.data.argmax(axis=1)


def evaluate(dataset, params):
    """Accuracy over all vertices (or shapes, for classification) in eval mode."""
    correct = total = 0
    for s in dataset:
        pred = predict(s, params)
        if len(pred) != len(s.target):
            raise ValueError(f"{s.name}: {len(pred)} predictions for {len(s.target)} labels")
        correct += int((pred == s.target).sum())
        total += len(s.target)
    return {"accuracy": correct / total if total else float("nan"),
            "correct": correct, "total": total}


def fit(train_set, net_config, train_config, test_set=None, log_path=None,
        checkpoint_dir=None, params=None, verbose=False):
    """Train with ADAM at batch size 1. Returns ``(params, history)``.

    Each epoch visits the training shapes in a seeded random order;
    rotation augmentation (if any) is redrawn at every visit and only
    touches xyz input features.
    """
    rng = np.random.default_rng(train_config.seed)
    params = params if params is not None else init_params(net_config, seed=train_config.seed)
    state = adam_init(params)
    history = []
    writer = None
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
    try:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            lr = learning_rate(train_config, epoch)
            loss_sum = 0.0
            correct = total = 0
            for i in rng.permutation(len(train_set)):
                s = train_set[i]
                pos = None
                if train_config.augmentation != "none" and net_config.input_mode == "xyz":
                    pos = random_rotation(s.shape.positions, train_config.augmentation, rng)
                params.zero_grad()
                with Tape():
                    logits = _forward(s, params, train=True, rng=rng, positions=pos)
                    loss = label_smoothed_cross_entropy(logits, s.target,
                                                        train_config.label_smoothing)
                    ad.backward(loss)
                adam_step(params, state, lr, train_config.beta1, train_config.beta2,
                          train_config.eps)
                project_diffusion_times(params)
                loss_sum += loss.item()
                correct += int((logits.data.argmax(axis=1) == s.target).sum())
                total += len(s.target)
            row = {
                "epoch": epoch, "lr": lr, "train_loss": loss_sum / len(train_set),
                "train_acc": correct / total,
                "test_acc": evaluate(test_set, params)["accuracy"] if test_set else float("nan"),
            }
            row["seconds"] = time.perf_counter() - t0
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in METRICS_COLUMNS])
                fh.flush()
            if verbose:
                log.info("epoch %d lr %.2e loss %.4f train %.3f test %.3f", epoch, lr,
                         row["train_loss"], row["train_acc"], row["test_acc"])
            if checkpoint_dir and train_config.checkpoint_every and \
                    epoch % train_config.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(params, Path(checkpoint_dir) / f"epoch_{epoch:04d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_dir:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, Path(checkpoint_dir) / "final.ckpt",
                        extra={"train": train_config.to_dict(),
                               "final": {k: history[-1][k] for k in ("train_acc", "test_acc")}
                               if history else {}})
    return params, history
