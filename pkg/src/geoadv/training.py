"""Adam, the synthetic dataset, and the training loops for the autoencoder and classifiers."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import chamfer
from .models import AEModel, Classifier, FrozenModelError
from .pointcloud import PointCloud, ShapeClass, generate_shape, make_classes

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is advanced in place."""
    if set(params) != set(grads):
        raise ad.ShapeMismatchError("parameter and gradient names differ")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ad.ShapeMismatchError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# data


@dataclass
class DatasetSpec:
    classes: tuple[str, ...] = ("sphere", "box", "torus", "cylinder")
    per_class: int = 200
    n: int = 256
    seed: int = 0
    split: tuple[float, float, float] = (0.85, 0.05, 0.10)


@dataclass
class Dataset:
    spec: DatasetSpec
    classes: list[ShapeClass]
    clouds: list[PointCloud]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def subset(self, ids) -> list[PointCloud]:
        return [self.clouds[i] for i in ids]

    def stack(self, ids) -> np.ndarray:
        return np.stack([self.clouds[i].points for i in ids])


def instance_seed(seed: int, class_index: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, class_index, i]).generate_state(1)[0])


def split_counts(total: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * total))
    n_val = int(round(fractions[1] * total))
    return n_train, n_val, total - n_train - n_val


def build_dataset(spec: DatasetSpec) -> Dataset:
    if spec.per_class < 1 or spec.n < 8:
        raise ConfigError("per-class count must be >= 1 and n >= 8")
    if len(spec.split) != 3 or min(spec.split) < 0 or not math.isclose(sum(spec.split), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {spec.split}")
    classes = make_classes(spec.classes)
    clouds, train, val, test = [], [], [], []
    rng = np.random.default_rng(spec.seed)
    n_train, n_val, n_test = split_counts(spec.per_class, spec.split)
    for cls in classes:
        start = len(clouds)
        for i in range(spec.per_class):
            pc = generate_shape(cls.name, spec.n, instance_seed(spec.seed, cls.id, i))
            clouds.append(PointCloud(pc.points, cls.id))
        order = start + rng.permutation(spec.per_class)
        train.extend(order[:n_train])
        val.extend(order[n_train:n_train + n_val])
        test.extend(order[n_train + n_val:])
    return Dataset(spec, classes, clouds, np.array(train), np.array(val), np.array(test))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 25
    lr: float = 0.0005
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class TrainResult:
    model: object
    trace: list[dict]


def _batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = ids[rng.permutation(len(ids))]
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _write_trace(path: Optional[Path], trace: list[dict]) -> None:
    if path is None or not trace:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0]))
        writer.writeheader()
        writer.writerows(trace)


def mean_reconstruction_cd(model: AEModel, clouds: Sequence[PointCloud]) -> float:
    return float(np.mean([chamfer(model.reconstruct(c), c) for c in clouds]))


def train_ae(model: AEModel, data: Dataset, config: TrainConfig, log_path: Optional[Path] = None) -> TrainResult:
    """Fit the autoencoder with the Chamfer loss; freezes the model on return.

    The trace holds the mean validation Chamfer distance before training
    (epoch 0) and after every epoch.
    """
    if model.frozen:
        raise FrozenModelError("refusing to train a frozen model")
    config.validate()
    if len(data.train) == 0 or len(data.val) == 0:
        raise ConfigError("autoencoder training needs non-empty train and validation splits")
    if model.n != data.spec.n:
        raise ConfigError(f"model emits {model.n} points but the dataset has n={data.spec.n}")
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    params = {k: v.copy() for k, v in model.params.items()}
    val = data.subset(data.val)
    model.params = params
    trace = [{"epoch": 0, "train_cd": float("nan"), "val_cd": mean_reconstruction_cd(model, val)}]
    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in _batches(data.train, config.batch_size, rng):
            clouds = data.stack(batch).reshape(-1, 3)
            tape = ad.Tape(row_exact=False)
            P = {k: tape.leaf(v) for k, v in params.items()}
            try:
                _, _, rec = model.forward_graph(tape.const(clouds), P, groups=len(batch))
                loss = ad.chamfer(rec, clouds, groups=len(batch))
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"autoencoder training diverged in epoch {epoch}: {exc}", trace) from exc
            names = list(P)
            grads = ad.backward(loss, [P[k] for k in names])
            params = adam_step(state, params, dict(zip(names, grads)))
            losses.append(float(loss.value))
        model.params = params
        val_cd = mean_reconstruction_cd(model, val)
        if not math.isfinite(val_cd):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}", trace)
        trace.append({"epoch": epoch, "train_cd": float(np.mean(losses)), "val_cd": val_cd})
        log.debug("ae epoch %d train %.6f val %.6f", epoch, trace[-1]["train_cd"], val_cd)
    model.frozen = True
    _write_trace(log_path, trace)
    return TrainResult(model, trace)


def train_transfer_ae(
    data: Dataset,
    config: TrainConfig,
    init_seed: int,
    victim_seed: Optional[int] = None,
    m: int = 32,
    width_factor: float = 0.25,
    log_path: Optional[Path] = None,
) -> TrainResult:
    """Same architecture and data as the victim; only the weight-initialization seed differs."""
    if victim_seed is not None and init_seed == victim_seed:
        warnings.warn("transfer autoencoder uses the victim's initialization seed", stacklevel=2)
    model = AEModel.create(data.spec.n, m, width_factor, seed=init_seed)
    return train_ae(model, data, config, log_path)


def accuracy(classifier: Classifier, clouds: Sequence, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    pred = np.array([classifier.predict(c) for c in clouds])
    return float((pred == labels).mean())


def train_classifier(
    classifier: Classifier,
    clouds: Sequence,
    labels,
    train_ids,
    test_ids,
    config: TrainConfig,
    log_path: Optional[Path] = None,
) -> TrainResult:
    """Cross-entropy training; the trace records held-out accuracy after every epoch."""
    if classifier.frozen:
        raise FrozenModelError("refusing to train a frozen classifier")
    config.validate()
    train_ids, test_ids = np.asarray(train_ids), np.asarray(test_ids)
    labels = np.asarray(labels, dtype=np.int64)
    if len(test_ids) == 0:
        raise ConfigError("classifier training needs a non-empty held-out split")
    if len(train_ids) == 0:
        raise ConfigError("classifier training needs a non-empty train split")
    if len(np.unique(labels[train_ids])) < 2:
        warnings.warn("classifier trained on a single class; held-out accuracy is trivial", stacklevel=2)
    points = [np.asarray(getattr(c, "points", c)) for c in clouds]
    sizes = {p.shape[0] for p in points}
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    params = {k: v.copy() for k, v in classifier.params.items()}
    held_out = [points[i] for i in test_ids]
    trace = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in _batches(train_ids, config.batch_size, rng):
            tape = ad.Tape(row_exact=False)
            P = {k: tape.leaf(v) for k, v in params.items()}
            try:
                if len(sizes) == 1:
                    x = tape.const(np.concatenate([points[i] for i in batch]))
                    logits = classifier.logits_graph(x, P, groups=len(batch))
                    loss = ad.softmax_cross_entropy(logits, labels[batch])
                else:
                    loss = None
                    for i in batch:
                        term = ad.softmax_cross_entropy(classifier.logits_graph(tape.const(points[i]), P), labels[[i]])
                        loss = term if loss is None else loss + term
                    loss = loss * (1.0 / len(batch))
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"classifier training diverged in epoch {epoch}: {exc}", trace) from exc
            names = list(P)
            grads = ad.backward(loss, [P[k] for k in names])
            params = adam_step(state, params, dict(zip(names, grads)))
            losses.append(float(loss.value))
        classifier.params = params
        acc = accuracy(classifier, held_out, labels[test_ids])
        trace.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "test_acc": acc})
        log.debug("classifier epoch %d loss %.4f acc %.3f", epoch, trace[-1]["train_loss"], acc)
    classifier.frozen = True
    _write_trace(log_path, trace)
    return TrainResult(classifier, trace)
