"""Experiment stages and their on-disk artifacts.

Each stage reads its prerequisites from the run directory and fails with a
``DependencyError`` naming the first missing file. Rows are always written in
(source id, target class) order so reruns produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attack import (
    AttackResult,
    InsufficientPoolError,
    interpolate_evolution,
    run_attack,
    targeted_sweep,
    transfer_metrics,
    untargeted_from_sweep,
)
from .config import ExperimentConfig
from .defense import (
    aggregate,
    best_cell,
    calibrate_delta_scale,
    calibration_grid,
    defend,
    detect_attack,
    evaluate_defense,
)
from .metrics import MetricRecord, chamfer, semantic_eval
from .models import AEModel, Classifier, load_checkpoint, save_checkpoint
from .pointcloud import PointCloud, make_classes, save_cloud
from .training import (
    ConfigError,
    Dataset,
    TrainConfig,
    accuracy,
    build_dataset,
    train_ae,
    train_classifier,
    train_transfer_ae,
)

log = logging.getLogger(__name__)

MODES = ("latent", "output")
ATTACK_COLUMNS = ["source_class", "target_class", "OS", "S_CD", "T_RE", "T_NRE", "r"]
DEFENSE_COLUMNS = [
    "attack_mode", "defense_kind", "S_RE_before", "S_RE_after",
    "S_NRE_before", "S_NRE_after", "S_RCA_before", "S_RCA_after",
]
SEMANTIC_COLUMNS = ["attack_mode", "pairs", "hit_target", "avoid_source", "clean_target_hit"]
TRANSFER_COLUMNS = ["attack_mode", "pairs", "T_RE_victim", "T_RE_transfer", "T_NRE_victim", "T_NRE_transfer", "degraded_fraction"]
CALIBRATION_COLUMNS = ["k", "delta", "delta_effective", "S_NRE_after"]
DETECTION_COLUMNS = ["attack_mode", "defense_kind", "train", "val", "test", "val_accuracy", "test_accuracy"]

DEVIATIONS = [
    "batch normalization omitted from every network",
    "synthetic procedural shape classes replace the mesh dataset",
    "desk-scale sizes: fewer points per cloud, narrower layers, smaller latent code",
    "surface-defense threshold multiplied by a density scale calibrated on clean clouds",
    "coordinates and stored perturbations snapped to a 2**-32 grid",
]


class DependencyError(FileNotFoundError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class Run:
    config: ExperimentConfig
    root: Path

    @classmethod
    def open(cls, config: ExperimentConfig, root: Optional[Path] = None) -> "Run":
        run_root = config.run_dir(root)
        run_root.mkdir(parents=True, exist_ok=True)
        (run_root / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
        return cls(config, run_root)

    # paths ----------------------------------------------------------------

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def require(self, *parts: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise DependencyError(f"missing prerequisite artifact: {p}")
        return p

    @property
    def dataset_path(self) -> Path:
        return self.path("data", "dataset.npz")

    def attack_dir(self, tag: str) -> Path:
        return self.path("attacks", tag)

    # loaders --------------------------------------------------------------

    def dataset(self) -> Dataset:
        p = self.require("data", "dataset.npz")
        with np.load(p, allow_pickle=False) as z:
            pts, labels = z["points"], z["labels"]
            train, val, test = z["train"], z["val"], z["test"]
        spec = self.config.dataset.spec()
        clouds = [PointCloud(p, int(l)) for p, l in zip(pts, labels)]
        return Dataset(spec, make_classes(spec.classes), clouds, train, val, test)

    def ae(self, which: str = "ae") -> AEModel:
        return load_checkpoint(self.require("checkpoints", f"{which}.npz"), expect_n=self.config.dataset.n)

    def classifier(self) -> Classifier:
        return load_checkpoint(self.require("checkpoints", "classifier.npz"))

    def baselines(self) -> np.ndarray:
        return np.load(self.require("checkpoints", "baselines.npy"))

    def results(self, tag: str) -> list[AttackResult]:
        return load_results(self.require("attacks", tag, "results.npz").parent)


# ---------------------------------------------------------------------------
# attack result persistence

_ARRAYS = ("S", "T", "P", "Q", "Q_hat", "total_trace", "adversarial_trace", "distance_trace")


def save_results(directory: Path, results: Sequence[AttackResult], class_names: Sequence[str], cloud_format: str = "xyz") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    clouds = directory / "clouds"
    clouds.mkdir(exist_ok=True)
    arrays = {name: np.stack([getattr(r, name) for r in results]) for name in _ARRAYS} if results else {}
    np.savez(directory / "results.npz", **arrays)
    records = []
    for i, r in enumerate(results):
        files = {}
        for role, arr in (("source", r.S), ("target", r.T), ("adversarial", r.Q), ("reconstruction", r.Q_hat)):
            name = f"{i:04d}_{role}.{cloud_format}"
            save_cloud(arr, clouds / name, cloud_format)
            files[role] = f"clouds/{name}"
        records.append(
            {
                "index": i,
                "source_id": r.source_id,
                "target_id": r.target_id,
                "source_class": class_names[r.source_class],
                "target_class": class_names[r.target_class],
                "source_label": r.source_class,
                "target_label": r.target_class,
                "mode": r.mode,
                "lambda": r.lam,
                "rebalance_factor": r.rebalance_factor,
                "best_iteration": r.best_iteration,
                "adversarial_loss": r.adversarial_loss,
                "metrics": r.metrics.to_dict(),
                "candidate_ids": [int(c) for c in r.candidate_ids],
                "candidate_scores": [float(s) for s in r.candidate_scores],
                "files": files,
            }
        )
    (directory / "results.json").write_text(json.dumps(records, indent=1) + "\n")


def load_results(directory: Path) -> list[AttackResult]:
    records = json.loads((directory / "results.json").read_text())
    if not records:
        return []
    with np.load(directory / "results.npz", allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    out = []
    for i, rec in enumerate(records):
        out.append(
            AttackResult(
                rec["source_id"], rec["target_id"], rec["source_label"], rec["target_label"], rec["mode"],
                *(arrays[name][i] for name in _ARRAYS[:5]),
                *(arrays[name][i] for name in _ARRAYS[5:]),
                rec["best_iteration"], rec["adversarial_loss"], rec["lambda"], rec["rebalance_factor"],
                MetricRecord(**rec["metrics"]), rec["candidate_ids"], rec["candidate_scores"],
            )
        )
    return out


def attack_rows(results: Sequence[AttackResult], class_names: Sequence[str]) -> list[dict]:
    rows = []
    for r in results:
        m = r.metrics
        rows.append(
            {
                "source_class": class_names[r.source_class],
                "target_class": class_names[r.target_class],
                "OS": m.OS, "S_CD": m.S_CD, "T_RE": m.T_RE, "T_NRE": m.T_NRE, "r": m.r,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# stages


def gen_data(run: Run) -> Path:
    data = build_dataset(run.config.dataset.spec())
    p = run.dataset_path
    p.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        p,
        points=data.stack(range(len(data.clouds))),
        labels=data.labels,
        train=data.train,
        val=data.val,
        test=data.test,
    )
    return p


def _reconstruction_baselines(model: AEModel, data: Dataset) -> np.ndarray:
    return np.array([chamfer(model.reconstruct(c), c) for c in data.clouds])


def train_ae_stage(run: Run) -> Path:
    data = run.dataset()
    cfg = run.config.ae
    model = AEModel.create(data.spec.n, cfg.m, cfg.width_factor, seed=cfg.seed)
    run.path("checkpoints").mkdir(exist_ok=True)
    run.path("logs").mkdir(exist_ok=True)
    train_ae(model, data, cfg.train(), run.path("logs", "ae_train.csv"))
    save_checkpoint(model, run.path("checkpoints", "ae.npz"))
    np.save(run.path("checkpoints", "baselines.npy"), _reconstruction_baselines(model, data))
    return run.path("checkpoints", "ae.npz")


def train_classifier_stage(run: Run) -> float:
    data = run.dataset()
    cfg = run.config.classifier
    clf = Classifier.create(len(data.classes), seed=cfg.seed)
    run.path("checkpoints").mkdir(exist_ok=True)
    run.path("logs").mkdir(exist_ok=True)
    train_classifier(clf, data.clouds, data.labels, data.train, data.test, cfg.train(), run.path("logs", "classifier_train.csv"))
    save_checkpoint(clf, run.path("checkpoints", "classifier.npz"))
    return accuracy(clf, data.subset(data.test), data.labels[data.test])


def sweep_sources(data: Dataset, per_class: int, offset: int = 0) -> list[tuple[int, PointCloud]]:
    """The first ``per_class`` test instances of every class after skipping ``offset`` of them."""
    out = []
    test = np.sort(data.test)
    for cls in data.classes:
        ids = [int(i) for i in test if data.clouds[i].label == cls.id][offset:offset + per_class]
        if len(ids) < per_class:
            raise ConfigError(f"class {cls.name} has too few test instances for {per_class} sources")
        out.extend((i, data.clouds[i]) for i in ids)
    return out


def _target_pool(data: Dataset) -> list[PointCloud]:
    # indexed by dataset id; clouds outside the test split lose their label so they are never chosen
    mask = np.zeros(len(data.clouds), dtype=bool)
    mask[data.test] = True
    return [c if mask[i] else PointCloud(c.points, None) for i, c in enumerate(data.clouds)]


def _sweep(run: Run, data: Dataset, model: AEModel, mode: str, sources, candidates: Optional[int] = None,
           classifier: Optional[Classifier] = None) -> list[AttackResult]:
    acfg = run.config.attack
    cfg = acfg.config(mode, candidates=candidates)
    base = run.baselines()
    baselines = {i: float(base[i]) for i in range(len(base))}
    return targeted_sweep(
        model, sources, _target_pool(data), [c.id for c in data.classes], cfg,
        classifier=classifier, baselines=baselines, workers=acfg.workers, seed=acfg.seed,
    )


def _lambda_tag(mode: str, lam: float) -> str:
    return f"{mode}_lam{lam:g}"


def attack_stage(run: Run, mode: str, untargeted: bool = False, lambda_sweep: Optional[Sequence[float]] = None) -> list[Path]:
    if mode not in MODES:
        raise ConfigError(f"unknown attack mode {mode!r}")
    data = run.dataset()
    model = run.ae()
    run.require("checkpoints", "baselines.npy")
    names = [c.name for c in data.classes]
    fmt = run.config.outputs.cloud_format
    classifier = run.classifier() if run.config.attack.target_selection == "geometric+classifier" else None
    written = []
    if run.path("attacks", mode, "results.npz").exists():
        results = run.results(mode)
    else:
        sources = sweep_sources(data, run.config.attack.sources_per_class)
        results = _sweep(run, data, model, mode, sources, classifier=classifier)
        save_results(run.attack_dir(mode), results, names, fmt)
    write_csv(run.path("reports", f"attack_{mode}.csv"), ATTACK_COLUMNS, attack_rows(results, names))
    written.append(run.path("reports", f"attack_{mode}.csv"))
    if untargeted:
        best = untargeted_from_sweep(results)
        write_csv(run.path("reports", f"attack_{mode}_untargeted.csv"), ATTACK_COLUMNS, attack_rows(best, names))
        written.append(run.path("reports", f"attack_{mode}_untargeted.csv"))
    if lambda_sweep:
        written.append(_lambda_sweep(run, data, model, mode, results, lambda_sweep))
    return written


def _lambda_sweep(run: Run, data, model, mode, results, lambdas) -> Path:
    """Re-attack each selected (source, target) pair at every lambda."""
    names = [c.name for c in data.classes]
    base = run.baselines()
    default = run.config.attack.config(mode).lambda_value
    rows = []
    for lam in lambdas:
        tag = _lambda_tag(mode, lam)
        if run.path("attacks", tag, "results.npz").exists():
            swept = run.results(tag)
        elif float(lam) == default:
            swept = results
        else:
            cfg = run.config.attack.config(mode, lam=float(lam), candidates=1)
            swept = [
                run_attack(model, r.S, r.T, cfg, source_id=r.source_id, target_id=r.target_id,
                           source_class=r.source_class, target_class=r.target_class, t_baseline=float(base[r.target_id]))
                for r in results
            ]
            save_results(run.attack_dir(tag), swept, names, run.config.outputs.cloud_format)
        for pair, r in enumerate(swept):
            rows.append({"pair": pair, "lambda": float(lam), "lambda_effective": r.lam, **attack_rows([r], names)[0]})
    path = run.path("reports", f"lambda_sweep_{mode}.csv")
    write_csv(path, ["pair", "lambda", "lambda_effective"] + ATTACK_COLUMNS, rows)
    return path


# one change at a time relative to the configured output attack
PAIRED_ABLATIONS = {
    "perturbation-l2": {"distance_loss": "perturbation-l2", "lam": None},
    "off-surface": {"beta": 0.1},
}
SELECTION_ABLATIONS = {
    "proposed": {},
    "random": {"target_selection": "random"},
    "classifier": {"target_selection": "geometric+classifier"},
    "latent-space": {"target_selection": "latent-space"},
    "one-candidate": {"candidates": 1},
}
ABLATION_COLUMNS = ["variant", "pairs", "OS", "S_CD", "T_RE", "T_NRE"]


def ablation_stage(run: Run, mode: str = "output", sources_per_class: int = 1,
                   variants: Optional[Sequence[str]] = None) -> Path:
    """Output attack variants, each differing from the configured attack in one setting.

    Loss variants re-attack the already selected (source, target) pairs with a single
    candidate and are compared against those pairs. Selection variants rerun the sweep
    on ``sources_per_class`` sources per class. ``variants`` limits the run to the
    named ones; by default all are run.
    """
    known = set(PAIRED_ABLATIONS) | set(SELECTION_ABLATIONS)
    chosen = known if variants is None else set(variants)
    if chosen - known:
        raise ConfigError(f"unknown ablation variants {sorted(chosen - known)}; choose from {sorted(known)}")
    data = run.dataset()
    model = run.ae()
    base = run.baselines()
    names = [c.name for c in data.classes]
    fmt = run.config.outputs.cloud_format
    reference = run.results(mode)
    base_cfg = run.config.attack.config(mode)
    rows = []

    def summarize(variant: str, results: Sequence[AttackResult]) -> None:
        m = [r.metrics for r in results]
        rows.append({"variant": variant, "pairs": len(m), **{
            key: float(np.mean([getattr(x, key) for x in m])) for key in ABLATION_COLUMNS[2:]
        }})

    summarize("paired-reference", reference)
    for variant, change in PAIRED_ABLATIONS.items():
        if variant not in chosen:
            continue
        tag = f"ablation_{mode}_{variant}"
        if run.path("attacks", tag, "results.npz").exists():
            results = run.results(tag)
        else:
            cfg = replace(base_cfg, candidates=1, **change).validate()
            results = [
                run_attack(model, r.S, r.T, cfg, source_id=r.source_id, target_id=r.target_id,
                           source_class=r.source_class, target_class=r.target_class, t_baseline=float(base[r.target_id]))
                for r in reference
            ]
            save_results(run.attack_dir(tag), results, names, fmt)
        summarize(variant, results)

    sources = sweep_sources(data, sources_per_class)
    needs_classifier = "classifier" in chosen
    classifier = run.classifier() if needs_classifier else None
    baselines = {i: float(base[i]) for i in range(len(base))}
    acfg = run.config.attack
    for variant, change in SELECTION_ABLATIONS.items():
        if variant not in chosen:
            continue
        tag = f"ablation_{mode}_{variant}"
        if run.path("attacks", tag, "results.npz").exists():
            results = run.results(tag)
        else:
            cfg = replace(base_cfg, **change).validate()
            try:
                results = targeted_sweep(
                    model, sources, _target_pool(data), [c.id for c in data.classes], cfg,
                    classifier=classifier if cfg.target_selection == "geometric+classifier" else None,
                    baselines=baselines, workers=acfg.workers, seed=acfg.seed,
                )
            except InsufficientPoolError as exc:
                log.warning("ablation %s skipped: %s", variant, exc)
                rows.append({"variant": variant, "pairs": 0, **{k: float("nan") for k in ABLATION_COLUMNS[2:]}})
                continue
            save_results(run.attack_dir(tag), results, names, fmt)
        summarize(variant, results)
    path = run.path("reports", f"ablation_{mode}.csv")
    write_csv(path, ABLATION_COLUMNS, rows)
    return path


def _delta_scale(run: Run, data: Dataset) -> float:
    d = run.config.defense
    if d.delta_scale != "auto":
        return float(d.delta_scale)
    p = run.path("reports", "defense_scale.json")
    if p.exists():
        return float(json.loads(p.read_text())["delta_scale"])
    scale = calibrate_delta_scale(data.subset(data.train), d.k, d.delta, d.calibration_quantile, d.calibration_margin)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"delta_scale": scale, "delta_effective": scale * d.delta}, indent=1) + "\n")
    return scale


def _clean_results(results: Sequence[AttackResult]):
    """Per distinct source, a stand-in whose adversarial input is the clean source itself."""
    seen, out = set(), []
    for r in results:
        if r.source_id in seen:
            continue
        seen.add(r.source_id)
        out.append(_CleanSource(r.source_id, r.source_class, r.S))
    return out


@dataclass
class _CleanSource:
    source_id: int
    source_class: int
    S: np.ndarray

    @property
    def Q(self) -> np.ndarray:
        return self.S


def defend_stage(run: Run, detect: bool = False) -> Path:
    data = run.dataset()
    model = run.ae()
    base = run.baselines()
    s_base = {i: float(base[i]) for i in range(len(base))}
    classifier = run.classifier() if run.path("checkpoints", "classifier.npz").exists() else None
    scale = _delta_scale(run, data)
    modes = [m for m in MODES if run.path("attacks", m, "results.npz").exists()]
    if not modes:
        raise DependencyError(f"missing prerequisite artifact: {run.path('attacks', 'output', 'results.npz')}")
    rows = []
    groups = [("clean", _clean_results(run.results(modes[0])))] + [(m, run.results(m)) for m in modes]
    for label, items in groups:
        for kind in ("surface", "critical"):
            cfg = run.config.defense.config(kind, scale)
            res = evaluate_defense(model, items, cfg, classifier=classifier, s_baselines=s_base)
            agg = aggregate(res)
            rows.append({"attack_mode": label, "defense_kind": kind, **agg})
            if label != "clean":
                _save_defended(run, label, kind, res)
    path = run.path("reports", "defense.csv")
    write_csv(path, DEFENSE_COLUMNS, rows)
    if detect:
        detection_stage(run)
    return path


def _save_defended(run: Run, mode: str, kind: str, results) -> None:
    d = run.path("defended", f"{mode}_{kind}")
    d.mkdir(parents=True, exist_ok=True)
    fmt = run.config.outputs.cloud_format
    for i, r in enumerate(results):
        save_cloud(r.cloud.points, d / f"{i:04d}_defended.{fmt}", fmt)
        save_cloud(r.Q_hat_def, d / f"{i:04d}_reconstruction.{fmt}", fmt)


def detection_stage(run: Run, mode: str = "output") -> Path:
    """Decoder-side detection on a dedicated pool of attacks with one candidate per pair."""
    data = run.dataset()
    model = run.ae()
    names = [c.name for c in data.classes]
    acfg = run.config.attack
    tag = f"detection_{mode}"
    if run.path("attacks", tag, "results.npz").exists():
        results = run.results(tag)
    else:
        sources = sweep_sources(data, acfg.detection_sources_per_class, offset=acfg.sources_per_class)
        results = _sweep(run, data, model, mode, sources, candidates=1)
        save_results(run.attack_dir(tag), results, names, run.config.outputs.cloud_format)
    scale = _delta_scale(run, data)
    dcfg = run.config.defense
    rows = []
    for kind in ("surface", "critical"):
        cfg = dcfg.config(kind, scale)
        recs, labels, groups = [], [], []
        for r in results:
            for label, X in ((0, r.S), (1, r.Q)):
                recs.append(defend(model, X, r.S, cfg).Q_hat_def)
                labels.append(label)
                groups.append(r.source_id)
        det = detect_attack(recs, labels, groups, TrainConfig(dcfg.detection_epochs, 16, dcfg.detection_lr, acfg.seed), seed=acfg.seed)
        rows.append({
            "attack_mode": mode, "defense_kind": kind,
            "train": len(det.train_ids), "val": len(det.val_ids), "test": len(det.test_ids),
            "val_accuracy": det.val_accuracy, "test_accuracy": det.test_accuracy,
        })
    path = run.path("reports", "detection.csv")
    write_csv(path, DETECTION_COLUMNS, rows)
    return path


def transfer_stage(run: Run) -> Path:
    data = run.dataset()
    victim = run.ae()
    base = run.baselines()
    tpath = run.path("checkpoints", "ae_transfer.npz")
    if tpath.exists():
        other = load_checkpoint(tpath, expect_n=data.spec.n)
    else:
        cfg = run.config.ae
        other = train_transfer_ae(data, cfg.train(), cfg.transfer_seed, cfg.seed, cfg.m, cfg.width_factor,
                                  run.path("logs", "ae_transfer_train.csv")).model
        save_checkpoint(other, tpath)
    modes = [m for m in MODES if run.path("attacks", m, "results.npz").exists()]
    if not modes:
        raise DependencyError(f"missing prerequisite artifact: {run.path('attacks', 'output', 'results.npz')}")
    rows, pairs = [], []
    for mode in modes:
        results = run.results(mode)
        vals = []
        for i, r in enumerate(results):
            t_re, t_nre = transfer_metrics(r, other, float(base[r.target_id]))
            vals.append((r.metrics.T_RE, t_re, r.metrics.T_NRE, t_nre))
            pairs.append({"attack_mode": mode, "pair": i, "T_RE_victim": r.metrics.T_RE, "T_RE_transfer": t_re,
                          "T_NRE_victim": r.metrics.T_NRE, "T_NRE_transfer": t_nre})
        v = np.array(vals)
        rows.append({
            "attack_mode": mode, "pairs": len(results),
            "T_RE_victim": v[:, 0].mean(), "T_RE_transfer": v[:, 1].mean(),
            "T_NRE_victim": v[:, 2].mean(), "T_NRE_transfer": v[:, 3].mean(),
            "degraded_fraction": float((v[:, 1] > v[:, 0]).mean()),
        })
    write_csv(run.path("reports", "transfer_pairs.csv"),
              ["attack_mode", "pair", "T_RE_victim", "T_RE_transfer", "T_NRE_victim", "T_NRE_transfer"], pairs)
    path = run.path("reports", "transfer.csv")
    write_csv(path, TRANSFER_COLUMNS, rows)
    return path


def calibrate_stage(run: Run, mode: str = "output") -> Path:
    data = run.dataset()
    model = run.ae()
    base = run.baselines()
    results = run.results(mode)
    scale = _delta_scale(run, data)
    d = run.config.defense
    grid = calibration_grid(model, results, d.grid_k, d.grid_delta, scale, {i: float(base[i]) for i in range(len(base))})
    rows = [dict(row, delta_effective=row["delta"] * scale) for row in grid]
    path = run.path("reports", "calibration.csv")
    write_csv(path, CALIBRATION_COLUMNS, rows)
    try:
        best = best_cell(grid)
        summary = {"best_k": best["k"], "best_delta": best["delta"], "S_NRE_after": best["S_NRE_after"], "delta_scale": scale}
    except ValueError:
        summary = {"best_k": None, "best_delta": None, "S_NRE_after": None, "delta_scale": scale}
    run.path("reports", "calibration_best.json").write_text(json.dumps(summary, indent=1) + "\n")
    return path


def interpolate_stage(run: Run, mode: str, pair: int, alphas: Sequence[float]) -> Path:
    model = run.ae()
    results = run.results(mode)
    if not 0 <= pair < len(results):
        raise ConfigError(f"pair index {pair} outside [0, {len(results)})")
    r = results[pair]
    out = run.path("interpolation", f"{mode}_pair{pair:04d}")
    out.mkdir(parents=True, exist_ok=True)
    fmt = run.config.outputs.cloud_format
    rows = []
    for a, (U, U_hat) in zip(alphas, interpolate_evolution(r.S, r.Q, model, alphas)):
        save_cloud(U, out / f"alpha{a:.3f}_input.{fmt}", fmt)
        save_cloud(U_hat, out / f"alpha{a:.3f}_reconstruction.{fmt}", fmt)
        rows.append({"alpha": float(a), "S_CD": chamfer(U, r.S), "T_RE": chamfer(U_hat, r.T)})
    write_csv(out / "evolution.csv", ["alpha", "S_CD", "T_RE"], rows)
    return out


def semantic_stage(run: Run) -> Path:
    data = run.dataset()
    model = run.ae()
    clf = run.classifier()
    rows = []
    for mode in MODES:
        if not run.path("attacks", mode, "results.npz").exists():
            continue
        results = run.results(mode)
        src = [r.source_class for r in results]
        tgt = [r.target_class for r in results]
        rep = semantic_eval(clf, [r.Q_hat for r in results], src, tgt)
        clean = semantic_eval(clf, [model.reconstruct(r.T) for r in results], src, tgt)
        rows.append({"attack_mode": mode, "pairs": len(results), "hit_target": rep.hit_target,
                     "avoid_source": rep.avoid_source, "clean_target_hit": clean.hit_target})
        names = [c.name for c in data.classes]
        write_csv(run.path("reports", f"confusion_{mode}.csv"), ["target_class"] + names,
                  [dict(zip(names, row), target_class=names[i]) for i, row in enumerate(rep.confusion)])
    path = run.path("reports", "semantic.csv")
    write_csv(path, SEMANTIC_COLUMNS, rows)
    return path


def report_stage(run: Run) -> Path:
    """Render the report; needs attack, transfer and defense CSVs plus the classifier."""
    reports = run.path("reports")
    attack_csvs = [reports / f"attack_{m}.csv" for m in MODES if (reports / f"attack_{m}.csv").exists()]
    if not attack_csvs:
        raise DependencyError(f"missing prerequisite artifact: {reports / 'attack_output.csv'}")
    run.require("reports", "defense.csv")
    run.require("reports", "transfer.csv")
    semantic_stage(run)
    rebalanced = sum(
        1 for m in MODES if run.path("attacks", m, "results.npz").exists()
        for r in run.results(m) if r.rebalance_factor != 1.0
    )
    cfg = run.config
    lines = [
        "# Experiment report",
        "",
        f"- config hash: {cfg.digest()}",
        f"- seeds: dataset {cfg.dataset.seed}, ae {cfg.ae.seed}, transfer ae {cfg.ae.transfer_seed}, "
        f"classifier {cfg.classifier.seed}, attack {cfg.attack.seed}",
        f"- code version: {__version__}",
        "- deviations:",
        *[f"  - {d}" for d in DEVIATIONS],
        f"  - lambda rebalanced on {rebalanced} of the reported attacks",
        "",
        "Chamfer-family values below are multiplied by 1000.",
        "",
    ]
    for path in attack_csvs + [reports / f"attack_{m}_untargeted.csv" for m in MODES]:
        if not path.exists():
            continue
        rows = read_csv(path)
        lines.append(f"## {path.stem}")
        lines.append("")
        lines.append("| OS | S_CD | T_RE | T_NRE | pairs |")
        lines.append("|---|---|---|---|---|")
        mean = {k: np.mean([float(r[k]) for r in rows]) for k in ("OS", "S_CD", "T_RE", "T_NRE")}
        lines.append(f"| {mean['OS']:.1f} | {1e3 * mean['S_CD']:.3f} | {1e3 * mean['T_RE']:.3f} | {mean['T_NRE']:.3f} | {len(rows)} |")
        lines.append("")
    for name in ("semantic", "transfer", "defense", "detection", "calibration"):
        path = reports / f"{name}.csv"
        if not path.exists():
            continue
        rows = read_csv(path)
        lines.append(f"## {name}")
        lines.append("")
        cols = list(rows[0]) if rows else []
        lines.append("| " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * len(cols))
        for row in rows:
            lines.append("| " + " | ".join(_short(row[c]) for c in cols) + " |")
        lines.append("")
    out = reports / "report.md"
    out.write_text("\n".join(lines))
    return out


def _short(value: str) -> str:
    try:
        x = float(value)
    except ValueError:
        return value
    if math.isnan(x) or x == int(x):
        return value
    return f"{x:.4g}"


def run_all(run: Run, lambda_sweep: bool = True, detect: bool = True) -> Path:
    """Every stage in dependency order, skipping those whose main artifact already exists."""
    steps = [
        (run.dataset_path, lambda: gen_data(run)),
        (run.path("checkpoints", "ae.npz"), lambda: train_ae_stage(run)),
        (run.path("checkpoints", "classifier.npz"), lambda: train_classifier_stage(run)),
    ]
    for mode in MODES:
        sweep = run.config.attack.lambda_sweep if lambda_sweep and mode == "output" else None
        last = f"lambda_sweep_{mode}.csv" if sweep else f"attack_{mode}_untargeted.csv"
        steps.append((run.path("reports", last),
                      lambda mode=mode, sweep=sweep: attack_stage(run, mode, untargeted=True, lambda_sweep=sweep)))
    steps += [
        (run.path("reports", "defense.csv"), lambda: defend_stage(run, detect=False)),
        (run.path("reports", "detection.csv") if detect else run.root, lambda: detection_stage(run)),
        (run.path("reports", "transfer.csv"), lambda: transfer_stage(run)),
        (run.path("reports", "calibration.csv"), lambda: calibrate_stage(run)),
        (run.path("reports", "report.md"), lambda: report_stage(run)),
    ]
    timing_path = run.path("logs", "timing.json")
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    for artifact, step in steps:
        if artifact.exists():
            continue
        name = str(artifact.relative_to(run.root))
        log.info("producing %s", name)
        start = time.perf_counter()
        step()
        # wall-clock seconds per stage; kept out of the reports so those stay byte-reproducible
        timing[name] = time.perf_counter() - start
        timing_path.parent.mkdir(parents=True, exist_ok=True)
        timing_path.write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return run.path("reports", "report.md")
