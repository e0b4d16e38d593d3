"""Input-side defenses and decoder-side attack detection.

Both defenses filter points from the (possibly adversarial) input and pass
the smaller cloud to the same autoencoder; the encoder's max-pool accepts any
number of points, so nothing is re-sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .metrics import chamfer
from .models import AEModel, Classifier
from .pointcloud import CloudLike, InvalidInputError, as_points, knn_self
from .training import ConfigError, TrainConfig, accuracy, train_classifier

KINDS = ("surface", "critical")


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "surface"
    k: int = 2
    delta: float = 0.04
    # multiplies delta to account for sampling density; see calibrate_delta_scale
    delta_scale: float = 1.0

    def validate(self) -> "DefenseConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"defense kind must be one of {KINDS}, got {self.kind!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not self.delta > 0 or not self.delta_scale > 0:
            raise ConfigError("delta and its scale must be positive")
        return self

    @property
    def threshold(self) -> float:
        return self.delta * self.delta_scale


@dataclass
class DefendedCloud:
    points: np.ndarray
    kept: np.ndarray
    removed: np.ndarray


@dataclass
class DefenseResult:
    cloud: DefendedCloud
    Q_hat: np.ndarray
    Q_hat_def: np.ndarray
    S_RE_before: float
    S_RE_after: float
    S_NRE_before: float
    S_NRE_after: float
    source_label: Optional[int] = None
    label_before: Optional[int] = None
    label_after: Optional[int] = None


def mean_knn_distance(Q: CloudLike, k: int) -> np.ndarray:
    """Per point, the mean Euclidean distance to its k nearest other points."""
    q = as_points(Q)
    if q.shape[0] <= k:
        raise DefenseError(f"cloud of {q.shape[0]} points cannot provide {k} neighbors per point")
    _, dists = knn_self(q, k)
    return dists.mean(axis=1)


def _split(q: np.ndarray, keep: np.ndarray) -> DefendedCloud:
    if not keep.any():
        raise DefenseError("the defense would remove every point")
    return DefendedCloud(q[keep], np.flatnonzero(keep), np.flatnonzero(~keep))


def surface_defense(Q: CloudLike, config: DefenseConfig = DefenseConfig()) -> DefendedCloud:
    """Keep points whose mean k-NN distance is at most the threshold; order is preserved."""
    cfg = config.validate()
    q = as_points(Q)
    dbar = mean_knn_distance(q, cfg.k)
    return _split(q, dbar <= cfg.threshold)


def critical_defense(Q: CloudLike, model: AEModel) -> DefendedCloud:
    """Drop the points that attain a maximum in the encoder's max-pool."""
    q = as_points(Q)
    keep = np.ones(q.shape[0], dtype=bool)
    keep[model.critical_ids(q)] = False
    return _split(q, keep)


def apply_defense(Q: CloudLike, config: DefenseConfig, model: AEModel) -> DefendedCloud:
    if config.validate().kind == "surface":
        return surface_defense(Q, config)
    return critical_defense(Q, model)


def defend(
    model: AEModel,
    X: CloudLike,
    S: CloudLike,
    config: DefenseConfig,
    *,
    classifier: Optional[Classifier] = None,
    source_label: Optional[int] = None,
    s_baseline: Optional[float] = None,
) -> DefenseResult:
    """Defend input X (adversarial or clean) and score both reconstructions against S."""
    cloud = apply_defense(X, config, model)
    Q_hat = model.reconstruct(X)
    Q_hat_def = model.reconstruct(cloud.points)
    if s_baseline is None:
        s_baseline = chamfer(model.reconstruct(S), S)
    if not s_baseline > 0:
        raise ZeroDivisionError("S-NRE: the autoencoder reconstructs the source perfectly")
    before, after = chamfer(Q_hat, S), chamfer(Q_hat_def, S)
    lb = la = None
    if classifier is not None:
        lb, la = classifier.predict(Q_hat), classifier.predict(Q_hat_def)
    return DefenseResult(cloud, Q_hat, Q_hat_def, before, after, before / s_baseline, after / s_baseline, source_label, lb, la)


def evaluate_defense(
    model: AEModel,
    attack_results: Sequence,
    config: DefenseConfig,
    *,
    classifier: Optional[Classifier] = None,
    s_baselines: Optional[dict] = None,
) -> list[DefenseResult]:
    out = []
    for res in attack_results:
        base = None if s_baselines is None else s_baselines.get(res.source_id)
        out.append(defend(model, res.Q, res.S, config, classifier=classifier, source_label=res.source_class, s_baseline=base))
    return out


def aggregate(results: Sequence[DefenseResult]) -> dict:
    """Means of S-RE and S-NRE and the source recognition accuracy, before and after."""
    if not results:
        raise InvalidInputError("no defense results to aggregate")
    agg = {}
    for key in ("S_RE_before", "S_RE_after", "S_NRE_before", "S_NRE_after"):
        agg[key] = float(np.mean([getattr(r, key) for r in results]))
    for when in ("before", "after"):
        labelled = [r for r in results if r.label_before is not None and r.source_label is not None]
        agg[f"S_RCA_{when}"] = (
            float(np.mean([getattr(r, f"label_{when}") == r.source_label for r in labelled])) if labelled else float("nan")
        )
    return agg


# ---------------------------------------------------------------------------
# calibration


def calibrate_delta_scale(clean: Sequence[CloudLike], k: int = 2, delta: float = 0.04,
                          quantile: float = 0.99, margin: float = 1.05) -> float:
    """Scale that makes ``delta`` admit the given quantile of clean per-cloud maxima of d_bar, with a margin.

    The reference threshold was tuned for denser clouds; sparser sampling
    inflates every neighbor distance, so the threshold is rescaled from clean
    data rather than guessed.
    """
    if not clean:
        raise InvalidInputError("need clean clouds to calibrate against")
    peaks = [float(mean_knn_distance(c, k).max()) for c in clean]
    return float(np.quantile(peaks, quantile)) * margin / delta


def calibration_grid(
    model: AEModel,
    attack_results: Sequence,
    ks: Sequence[int] = (1, 2, 4, 8),
    deltas: Sequence[float] = (0.03, 0.04, 0.05, 0.06),
    delta_scale: float = 1.0,
    s_baselines: Optional[dict] = None,
) -> list[dict]:
    """Mean S-NRE after the surface defense for every (k, delta) cell.

    Cells in which some input would lose all of its points are reported as NaN.
    """
    rows = []
    for k in ks:
        for d in deltas:
            cfg = DefenseConfig("surface", k, d, delta_scale)
            try:
                vals = [r.S_NRE_after for r in evaluate_defense(model, attack_results, cfg, s_baselines=s_baselines)]
                value = float(np.mean(vals))
            except DefenseError:
                value = float("nan")
            rows.append({"k": k, "delta": d, "S_NRE_after": value})
    return rows


def best_cell(grid: Sequence[dict]) -> dict:
    finite = [row for row in grid if math.isfinite(row["S_NRE_after"])]
    if not finite:
        raise DefenseError("no calibration cell produced a usable defense")
    return min(finite, key=lambda row: row["S_NRE_after"])


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectionResult:
    classifier: Classifier
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    val_accuracy: float
    test_accuracy: float


def group_split(groups: Sequence[int], fractions=(0.76, 0.08, 0.16), seed: int = 0):
    """Split item indices into train/val/test so that items sharing a group stay together."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    rng = np.random.default_rng(seed)
    uniq = uniq[rng.permutation(len(uniq))]
    n_tr = int(round(fractions[0] * len(uniq)))
    n_va = int(round(fractions[1] * len(uniq)))
    parts = (uniq[:n_tr], uniq[n_tr:n_tr + n_va], uniq[n_tr + n_va:])
    return tuple(np.flatnonzero(np.isin(groups, p)) for p in parts)


def detect_attack(
    reconstructions: Sequence[CloudLike],
    labels: Sequence[int],
    groups: Optional[Sequence[int]] = None,
    config: TrainConfig = TrainConfig(epochs=60, batch_size=16, lr=0.001),
    *,
    fractions=(0.76, 0.08, 0.16),
    seed: int = 0,
    widths=((32, 64, 128), (64,)),
) -> DetectionResult:
    """Train a two-class classifier (0 clean, 1 adversarial) on reconstructions.

    ``groups`` ties items that must land in the same split, e.g. the clean and
    attacked versions of one source.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(reconstructions) != labels.size:
        raise InvalidInputError("reconstructions and labels differ in length")
    if set(np.unique(labels)) != {0, 1}:
        raise ConfigError("detection needs both clean (0) and adversarial (1) examples")
    groups = np.arange(labels.size) if groups is None else np.asarray(groups)
    train, val, test = group_split(groups, fractions, seed)
    for name, ids in (("train", train), ("test", test)):
        if len(np.unique(labels[ids])) < 2:
            raise ConfigError(f"degenerate {name} split: only one label present")
    clf = Classifier.create(2, widths[0], widths[1], seed=seed)
    train_classifier(clf, reconstructions, labels, train, test, config)
    pts = [as_points(r) for r in reconstructions]
    val_acc = accuracy(clf, [pts[i] for i in val], labels[val]) if len(val) else float("nan")
    test_acc = accuracy(clf, [pts[i] for i in test], labels[test])
    return DetectionResult(clf, train, val, test, val_acc, test_acc)
