"""Geometric attacks on a point-cloud autoencoder.

An adversarial input is Q = S + P for a clean source S. The latent attack
drives the encoding of Q toward the code of a target instance T; the output
attack drives the reconstruction of Q toward T itself. Both penalise the
distortion of S and optimise P with Adam from P = 0.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import OS_THRESHOLD, MetricRecord, adversarial_metrics, chamfer
from .models import AEModel
from .pointcloud import CloudLike, InvalidInputError, PointCloud, as_points, snap_to_grid
from .training import AdamState, ConfigError, adam_step

log = logging.getLogger(__name__)

MODES = ("latent", "output")
DISTANCE_LOSSES = ("chamfer", "perturbation-l2")
SELECTIONS = ("geometric", "geometric+classifier", "random", "latent-space")

# default regularisation weights per (distance loss, mode)
DEFAULT_LAMBDA = {
    ("chamfer", "latent"): 150.0,
    ("chamfer", "output"): 1.0,
    ("perturbation-l2", "latent"): 0.15,
    ("perturbation-l2", "output"): 0.002,
}
REBALANCE_RATIO = 100.0


class AttackDivergedError(FloatingPointError):
    def __init__(self, message: str, trace: np.ndarray):
        super().__init__(message)
        self.trace = trace


class InsufficientPoolError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "output"
    lam: Optional[float] = None  # None picks DEFAULT_LAMBDA for the mode and distance loss
    steps: int = 500
    lr: float = 0.01
    keep_best_from: int = 400
    candidates: int = 5
    distance_loss: str = "chamfer"
    beta: float = 0.0
    target_selection: str = "geometric"
    gamma: float = OS_THRESHOLD
    rebalance: bool = True

    def validate(self) -> "AttackConfig":
        if self.mode not in MODES:
            raise ConfigError(f"attack mode must be one of {MODES}, got {self.mode!r}")
        if self.distance_loss not in DISTANCE_LOSSES:
            raise ConfigError(f"distance loss must be one of {DISTANCE_LOSSES}")
        if self.target_selection not in SELECTIONS:
            raise ConfigError(f"target selection must be one of {SELECTIONS}")
        if self.lam is not None and not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if self.steps < 1 or not 0 < self.keep_best_from <= self.steps:
            raise ConfigError("need steps >= 1 and 0 < keep_best_from <= steps")
        if self.candidates < 1:
            raise ConfigError("candidates per source must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        return self

    @property
    def lambda_value(self) -> float:
        return DEFAULT_LAMBDA[(self.distance_loss, self.mode)] if self.lam is None else float(self.lam)


@dataclass
class AttackResult:
    source_id: int
    target_id: int
    source_class: int
    target_class: int
    mode: str
    S: np.ndarray
    T: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    Q_hat: np.ndarray
    total_trace: np.ndarray
    adversarial_trace: np.ndarray
    distance_trace: np.ndarray
    best_iteration: int
    adversarial_loss: float
    lam: float
    rebalance_factor: float
    metrics: MetricRecord
    candidate_ids: list = field(default_factory=list)
    candidate_scores: list = field(default_factory=list)

    @property
    def r(self) -> float:
        return self.metrics.r


# ---------------------------------------------------------------------------


def _distance_term(tape, P_node, Q_node, S_node, cfg: AttackConfig):
    if cfg.distance_loss == "chamfer":
        return ad.chamfer(Q_node, S_node)
    return ad.l2_norm(P_node)


def attack_objective(model: AEModel, P_node: ad.Node, S: np.ndarray, T: np.ndarray, z_T, cfg: AttackConfig, lam: float):
    """(total, adversarial, distance) nodes of the attack loss at perturbation ``P_node``.

    ``z_T`` is the target's latent code and is only used by the latent attack.
    """
    tape = P_node.tape
    S_node = tape.const(S)
    Q_node = P_node + S_node
    if cfg.mode == "latent":
        P_params = {k: tape.const(v) for k, v in model.params.items()}
        z, _ = model.encoder_graph(Q_node, P_params)
        adv = ad.l2_norm(z - tape.const(z_T))
    else:
        _, _, rec = model.forward_graph(Q_node)
        adv = ad.chamfer(rec, tape.const(T))
    dist = _distance_term(tape, P_node, Q_node, S_node, cfg)
    if cfg.beta > 0:
        dist = dist + ad.max_nn_sqdist(Q_node, S_node) * cfg.beta
    return adv + dist * lam, adv, dist


def _initial_adversarial_loss(model: AEModel, S, T, mode: str, z_T) -> float:
    if mode == "latent":
        return float(np.linalg.norm(model.encode(S)[0] - z_T))
    return chamfer(model.reconstruct(S), T)


def _reference_distance(S, T, cfg: AttackConfig) -> float:
    # size of the distance term if the adversarial input were the target itself
    if cfg.distance_loss == "chamfer":
        return chamfer(T, S)
    return float(np.linalg.norm(T - S)) if T.shape == S.shape else float("nan")


def rebalance_lambda(adv0: float, lam: float, ref_dist: float) -> float:
    """Factor applied to lambda when the two loss terms differ by more than 100x at the outset."""
    denom = lam * ref_dist
    if not (adv0 > 0 and denom > 0 and math.isfinite(denom)):
        return 1.0
    ratio = adv0 / denom
    if ratio > REBALANCE_RATIO:
        return ratio / REBALANCE_RATIO
    if ratio < 1.0 / REBALANCE_RATIO:
        return ratio * REBALANCE_RATIO
    return 1.0


def run_attack(
    model: AEModel,
    S: CloudLike,
    T: CloudLike,
    config: AttackConfig,
    *,
    source_id: int = -1,
    target_id: int = -1,
    source_class: int = -1,
    target_class: int = -1,
    t_baseline: Optional[float] = None,
) -> AttackResult:
    cfg = config.validate()
    S = np.array(as_points(S))
    T = np.array(as_points(T))
    mode = cfg.mode
    z_T = model.encode(T)[0] if mode == "latent" else None
    lam = cfg.lambda_value
    factor = 1.0
    if cfg.rebalance and lam > 0:
        factor = rebalance_lambda(_initial_adversarial_loss(model, S, T, mode, z_T), lam, _reference_distance(S, T, cfg))
        if factor != 1.0:
            log.info("lambda rebalanced by factor %.4g (%s attack, source %d, target %d)", factor, mode, source_id, target_id)
    lam_eff = lam * factor

    P = np.zeros_like(S)
    state = AdamState(lr=cfg.lr)
    steps = cfg.steps
    total_tr = np.full(steps + 1, np.nan)
    adv_tr = np.full(steps + 1, np.nan)
    dist_tr = np.full(steps + 1, np.nan)
    best_adv, best_P, best_it = math.inf, P, -1
    for it in range(steps + 1):
        tape = ad.Tape()
        P_node = tape.leaf(P)
        try:
            total, adv, dist = attack_objective(model, P_node, S, T, z_T, cfg, lam_eff)
        except ad.NonFiniteError as exc:
            raise AttackDivergedError(f"attack diverged at iteration {it}: {exc}", total_tr[:it]) from exc
        total_tr[it], adv_tr[it], dist_tr[it] = float(total.value), float(adv.value), float(dist.value)
        if it >= cfg.keep_best_from and adv_tr[it] < best_adv:
            best_adv, best_P, best_it = adv_tr[it], P, it
        if it == steps:
            break
        (grad,) = ad.backward(total, [P_node])
        P = adam_step(state, {"P": P}, {"P": grad})["P"]

    # on the coordinate grid S + P and Q - P are exact for generated sources
    P = snap_to_grid(best_P)
    Q = S + P
    Q_hat = model.reconstruct(Q)
    if t_baseline is None:
        t_baseline = chamfer(model.reconstruct(T), T)
    metrics = adversarial_metrics(Q, S, T, Q_hat, t_baseline, cfg.gamma)
    return AttackResult(
        source_id, target_id, source_class, target_class, mode, S, T, P, Q, Q_hat,
        total_tr, adv_tr, dist_tr, best_it, float(best_adv), lam_eff, factor, metrics,
    )


def latent_attack(model: AEModel, S, T, config: AttackConfig = AttackConfig(mode="latent"), **kw) -> AttackResult:
    return run_attack(model, S, T, replace(config, mode="latent"), **kw)


def output_attack(model: AEModel, S, T, config: AttackConfig = AttackConfig(mode="output"), **kw) -> AttackResult:
    return run_attack(model, S, T, replace(config, mode="output"), **kw)


# ---------------------------------------------------------------------------
# target selection and sweeps


def select_targets(
    source: PointCloud,
    target_class: int,
    pool: Sequence[PointCloud],
    K: int,
    mode: str = "geometric",
    *,
    model: Optional[AEModel] = None,
    classifier=None,
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    """Indices into ``pool`` of K candidate targets from ``target_class``.

    geometric: the K instances nearest to the source in Chamfer distance.
    geometric+classifier: the same, among instances whose reconstruction the
    classifier labels correctly. random: K uniform draws. latent-space: the K
    nearest latent codes.
    """
    if source.label is not None and target_class == source.label:
        raise InvalidInputError("target class must differ from the source class")
    if mode not in SELECTIONS:
        raise ConfigError(f"unknown target selection {mode!r}")
    cands = [i for i, c in enumerate(pool) if c.label == target_class]
    if mode == "geometric+classifier":
        if classifier is None or model is None:
            raise ConfigError("classifier-filtered selection needs a classifier and the autoencoder")
        cands = [i for i in cands if classifier.predict(model.reconstruct(pool[i])) == target_class]
    if len(cands) < K:
        raise InsufficientPoolError(f"only {len(cands)} eligible instances of class {target_class}, need {K}")
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return [int(i) for i in rng.choice(cands, size=K, replace=False)]
    if mode == "latent-space":
        if model is None:
            raise ConfigError("latent-space selection needs the autoencoder")
        z_s = model.encode(source)[0]
        keys = [float(np.linalg.norm(model.encode(pool[i])[0] - z_s)) for i in cands]
    else:
        keys = [chamfer(source, pool[i]) for i in cands]
    order = sorted(range(len(cands)), key=lambda j: (keys[j], cands[j]))
    return [int(cands[j]) for j in order[:K]]


@dataclass(frozen=True)
class _Job:
    source_id: int
    target_id: int
    source_class: int
    target_class: int


def _run_job(args):
    model, S, T, cfg, job, t_base = args
    return run_attack(
        model, S, T, cfg,
        source_id=job.source_id, target_id=job.target_id,
        source_class=job.source_class, target_class=job.target_class, t_baseline=t_base,
    )


def targeted_sweep(
    model: AEModel,
    sources: Sequence[tuple[int, PointCloud]],
    pool: Sequence[PointCloud],
    class_ids: Sequence[int],
    config: AttackConfig,
    *,
    classifier=None,
    baselines: Optional[dict] = None,
    workers: int = 1,
    seed: int = 0,
) -> list[AttackResult]:
    """Attack every (source, other class) pair and keep, per pair, the candidate with minimal r.

    ``sources`` are (pool index, cloud) pairs. Candidates run independently;
    results come back in (source, target class) order regardless of ``workers``.
    """
    cfg = config.validate()
    if len(set(class_ids)) < 2:
        raise ConfigError("a sweep needs at least two classes")
    rng = np.random.default_rng(seed)
    pairs, jobs = [], []
    for sid, src in sources:
        for tc in class_ids:
            if tc == src.label:
                continue
            cand = select_targets(src, tc, pool, cfg.candidates, cfg.target_selection,
                                  model=model, classifier=classifier, rng=rng)
            pairs.append((sid, tc, cand))
            for tid in cand:
                base = None if baselines is None else baselines.get(tid)
                jobs.append((model, src.points, pool[tid].points, cfg, _Job(sid, tid, int(src.label), int(tc)), base))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_job, jobs, chunksize=1))
    else:
        results = [_run_job(j) for j in jobs]
    out, pos = [], 0
    for sid, tc, cand in pairs:
        group = results[pos:pos + len(cand)]
        pos += len(cand)
        best = min(range(len(group)), key=lambda j: (group[j].r, j))
        chosen = group[best]
        chosen.candidate_ids = list(cand)
        chosen.candidate_scores = [g.r for g in group]
        out.append(chosen)
    return out


def untargeted_from_sweep(results: Sequence[AttackResult]) -> list[AttackResult]:
    """Per source, the targeted result with the lowest attack score across target classes."""
    best: dict[int, AttackResult] = {}
    for res in results:
        cur = best.get(res.source_id)
        if cur is None or res.r < cur.r:
            best[res.source_id] = res
    return [best[k] for k in sorted(best)]


def untargeted(
    model: AEModel,
    source: tuple[int, PointCloud],
    pool: Sequence[PointCloud],
    class_ids: Sequence[int],
    config: AttackConfig,
    **kw,
) -> AttackResult:
    others = [c for c in class_ids if c != source[1].label]
    if len(others) < 1:
        raise ConfigError("untargeted attack needs at least one class besides the source's")
    results = targeted_sweep(model, [source], pool, class_ids, config, **kw)
    return untargeted_from_sweep(results)[0]


def interpolate_evolution(S: CloudLike, Q: CloudLike, model: AEModel, alphas: Sequence[float]):
    """(U, f(U)) for U = (1 - alpha) S + alpha Q at each alpha."""
    S, Q = as_points(S), as_points(Q)
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise InvalidInputError("interpolation factors must lie in [0, 1]")
    if alphas != sorted(alphas):
        raise InvalidInputError("interpolation factors must be sorted")
    out = []
    for a in alphas:
        U = (1.0 - a) * S + a * Q
        out.append((U, model.reconstruct(U)))
    return out


def transfer_metrics(result: AttackResult, other: AEModel, victim_t_baseline: float) -> tuple[float, float]:
    """(T-RE, T-NRE) of an adversarial example reconstructed by another autoencoder.

    The normalisation uses the victim's own error on the target.
    """
    t_re = chamfer(other.reconstruct(result.Q), result.T)
    return t_re, t_re / victim_t_baseline
