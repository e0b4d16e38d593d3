"""Geometric and semantic evaluation quantities.

Chamfer-family values are stored unscaled (unit-cube squared units); the x1000
presentation factor is applied only when rendering reports.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import chamfer_value
from .pointcloud import CloudLike, InvalidInputError, as_points, nearest_sqdist

OS_THRESHOLD = 0.05


class ZeroDenominatorError(ZeroDivisionError):
    pass


def chamfer(X: CloudLike, Y: CloudLike) -> float:
    """Sum of the two directional mean squared nearest-neighbor distances."""
    x, y = as_points(X), as_points(Y)
    if len(x) == 0 or len(y) == 0:
        raise InvalidInputError("chamfer distance of an empty cloud")
    return float(chamfer_value(x, y))


def os_count(Q: CloudLike, S: CloudLike, gamma: float = OS_THRESHOLD):
    """Off-surface points of Q: Euclidean distance to the nearest point of S above gamma.

    Returns ``(count, ids)``.
    """
    q, s = as_points(Q), as_points(S)
    if len(s) == 0 or len(q) == 0:
        raise InvalidInputError("off-surface count on an empty cloud")
    _, sqd = nearest_sqdist(q, s)
    ids = np.flatnonzero(np.sqrt(sqd) > gamma)
    return int(ids.size), ids


def _ratio(num: float, den: float, what: str) -> float:
    if not den > 0.0:
        raise ZeroDenominatorError(f"{what}: the autoencoder reconstructs this instance perfectly (zero denominator)")
    return num / den


def t_nre(model, Q: CloudLike, T: CloudLike, t_baseline: Optional[float] = None) -> float:
    """CD(f(Q), T) / CD(f(T), T) with the same model for both."""
    num = chamfer(model.reconstruct(Q), T)
    den = t_baseline if t_baseline is not None else chamfer(model.reconstruct(T), T)
    return _ratio(num, den, "T-NRE")


def s_nre(model, X: CloudLike, S: CloudLike, s_baseline: Optional[float] = None) -> float:
    """CD(f(X), S) / CD(f(S), S)."""
    num = chamfer(model.reconstruct(X), S)
    den = s_baseline if s_baseline is not None else chamfer(model.reconstruct(S), S)
    return _ratio(num, den, "S-NRE")


@dataclass
class MetricRecord:
    OS: int
    S_CD: float
    T_RE: float
    T_NRE: float
    r: float
    S_RE: Optional[float] = None
    S_NRE: Optional[float] = None
    hit_target: Optional[bool] = None
    avoid_source: Optional[bool] = None

    def to_dict(self) -> dict:
        return asdict(self)


def adversarial_metrics(Q, S, T, Q_hat, t_baseline: float, gamma: float = OS_THRESHOLD) -> MetricRecord:
    os_n, _ = os_count(Q, S, gamma)
    s_cd = chamfer(Q, S)
    t_re = chamfer(Q_hat, T)
    return MetricRecord(
        OS=os_n, S_CD=s_cd, T_RE=t_re, T_NRE=_ratio(t_re, t_baseline, "T-NRE"), r=s_cd + t_re
    )


@dataclass
class SemanticReport:
    hit_target: float
    avoid_source: float
    confusion: np.ndarray
    predictions: np.ndarray


def semantic_eval(classifier, reconstructions: Sequence[CloudLike], source_labels, target_labels) -> SemanticReport:
    """Hit-target and avoid-source rates plus a row-normalised confusion matrix.

    Confusion rows are the target (intended) class, columns the predicted class.
    """
    C = classifier.num_classes
    src = np.asarray(source_labels, dtype=np.int64)
    tgt = np.asarray(target_labels, dtype=np.int64)
    for arr in (src, tgt):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise InvalidInputError(f"label outside [0, {C})")
    if not (len(reconstructions) == src.size == tgt.size):
        raise InvalidInputError("reconstructions and label arrays differ in length")
    pred = np.array([classifier.predict(r) for r in reconstructions], dtype=np.int64)
    confusion = np.zeros((C, C))
    np.add.at(confusion, (tgt, pred), 1.0)
    rows = confusion.sum(axis=1, keepdims=True)
    confusion = np.divide(confusion, rows, out=np.zeros_like(confusion), where=rows > 0)
    if pred.size == 0:
        return SemanticReport(float("nan"), float("nan"), confusion, pred)
    return SemanticReport(
        hit_target=float((pred == tgt).mean()),
        avoid_source=float((pred != src).mean()),
        confusion=confusion,
        predictions=pred,
    )
