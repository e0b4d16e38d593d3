import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoadv.attack import (
    AttackConfig,
    AttackDivergedError,
    InsufficientPoolError,
    interpolate_evolution,
    latent_attack,
    output_attack,
    rebalance_lambda,
    run_attack,
    select_targets,
    targeted_sweep,
    untargeted,
)
from geoadv.metrics import chamfer
from geoadv.pipeline import load_results, save_results
from geoadv.pointcloud import InvalidInputError, PointCloud, generate_shape, snap_to_grid
from geoadv.training import ConfigError

from . import oracles

FAST = dict(steps=30, keep_best_from=20)


def cloud(shape, seed, label, n=32):
    return PointCloud(generate_shape(shape, n, seed).points, label)


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize(
    "bad",
    [
        dict(mode="both"),
        dict(lam=-1.0),
        dict(beta=-0.1),
        dict(keep_best_from=0),
        dict(steps=10, keep_best_from=11),
        dict(candidates=0),
        dict(distance_loss="hausdorff"),
        dict(target_selection="closest"),
    ],
)
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        AttackConfig(**bad).validate()


def test_default_lambdas():
    assert AttackConfig(mode="latent").lambda_value == 150.0
    assert AttackConfig(mode="output").lambda_value == 1.0
    assert AttackConfig(mode="latent", distance_loss="perturbation-l2").lambda_value == 0.15
    assert AttackConfig(mode="output", distance_loss="perturbation-l2").lambda_value == 0.002


def test_rebalance_factor_moves_ratio_to_the_boundary():
    assert rebalance_lambda(1.0, 1.0, 0.5) == 1.0
    f = rebalance_lambda(1000.0, 1.0, 1.0)
    assert 1000.0 / (f * 1.0) == pytest.approx(100.0)
    f = rebalance_lambda(1e-5, 1.0, 1.0)
    assert 1e-5 / f == pytest.approx(0.01)
    assert rebalance_lambda(0.0, 1.0, 1.0) == 1.0


# ---------------------------------------------------------------------------
# degenerate optima


def test_latent_attack_on_its_own_source_stays_put(tiny_ae):
    S = generate_shape("sphere", 32, 0).points
    res = latent_attack(tiny_ae, S, S, AttackConfig(mode="latent", **FAST))
    assert res.adversarial_trace[0] == 0.0 and res.total_trace[0] == 0.0
    np.testing.assert_array_equal(res.P, 0.0)
    assert res.metrics.OS == 0


def test_output_attack_with_zero_lambda_at_reconstruction(tiny_ae):
    S = generate_shape("box", 32, 0).points
    T = tiny_ae.reconstruct(S)
    res = output_attack(tiny_ae, S, T, AttackConfig(mode="output", lam=0.0, **FAST))
    assert res.adversarial_trace[0] == 0.0
    assert res.adversarial_loss == 0.0


def test_beta_zero_is_bit_identical(tiny_ae):
    S, T = generate_shape("sphere", 32, 1).points, generate_shape("box", 32, 2).points
    a = run_attack(tiny_ae, S, T, AttackConfig(**FAST))
    b = run_attack(tiny_ae, S, T, AttackConfig(beta=0.0, **FAST))
    for name in ("P", "Q", "Q_hat", "total_trace"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_beta_penalty_changes_the_objective(tiny_ae):
    S, T = generate_shape("sphere", 32, 1).points, generate_shape("box", 32, 2).points
    a = run_attack(tiny_ae, S, T, AttackConfig(**FAST))
    b = run_attack(tiny_ae, S, T, AttackConfig(beta=10.0, **FAST))
    assert not np.array_equal(a.total_trace, b.total_trace)


def test_perturbation_loss_is_zero_at_start(tiny_ae):
    S, T = generate_shape("sphere", 32, 1).points, generate_shape("box", 32, 2).points
    res = run_attack(tiny_ae, S, T, AttackConfig(distance_loss="perturbation-l2", **FAST))
    assert res.distance_trace[0] == 0.0
    np.testing.assert_allclose(res.distance_trace[-1] >= 0.0, True)


# ---------------------------------------------------------------------------
# result contracts


@pytest.mark.parametrize("mode", ["latent", "output"])
def test_result_contracts(tiny_ae, mode):
    S, T = generate_shape("torus", 32, 3).points, generate_shape("box", 32, 4).points
    cfg = AttackConfig(mode=mode, steps=40, keep_best_from=25)
    res = run_attack(tiny_ae, S, T, cfg)
    # Q = S + P, recoverable exactly
    np.testing.assert_array_equal(res.Q - res.P, res.S)
    np.testing.assert_array_equal(res.S + res.P, res.Q)
    # keep-best
    window = res.adversarial_trace[cfg.keep_best_from:]
    assert res.adversarial_loss == window.min()
    assert res.best_iteration == cfg.keep_best_from + int(np.argmin(window))
    assert len(res.total_trace) == cfg.steps + 1 and np.all(np.isfinite(res.total_trace))
    # score recomputed from stored clouds
    r = chamfer(res.Q, res.S) + chamfer(tiny_ae.reconstruct(res.Q), res.T)
    assert abs(res.r - r) <= 1e-9
    np.testing.assert_array_equal(res.Q_hat, tiny_ae.reconstruct(res.Q))
    assert res.metrics.OS == oracles.os_count(res.Q, res.S, 0.05)
    assert abs(res.metrics.T_NRE - res.metrics.T_RE / chamfer(tiny_ae.reconstruct(T), T)) <= 1e-9


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.sampled_from(["latent", "output"]))
def test_exact_decomposition_on_grid_sources(tiny_ae, seed, mode):
    rng = np.random.default_rng(seed)
    S = snap_to_grid(rng.uniform(-0.5, 0.5, (32, 3)))
    T = rng.uniform(-0.5, 0.5, (32, 3))
    res = run_attack(tiny_ae, S, T, AttackConfig(mode=mode, steps=6, keep_best_from=3))
    np.testing.assert_array_equal(res.Q - res.P, S)


def test_attack_is_deterministic(tiny_ae):
    S, T = generate_shape("cylinder", 32, 5).points, generate_shape("sphere", 32, 6).points
    a = run_attack(tiny_ae, S, T, AttackConfig(**FAST))
    b = run_attack(tiny_ae, S, T, AttackConfig(**FAST))
    for name in ("P", "Q", "Q_hat", "total_trace", "adversarial_trace", "distance_trace"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.metrics == b.metrics


def test_divergence_aborts_with_partial_trace(tiny_ae):
    S = np.full((32, 3), 1e200)
    with pytest.raises(AttackDivergedError) as err:
        run_attack(tiny_ae, S, generate_shape("box", 32, 0).points, AttackConfig(**FAST))
    assert isinstance(err.value.trace, np.ndarray)


def test_larger_lambda_keeps_the_source_closer(small_trained):
    data, model = small_trained
    S, T = data.clouds[0].points, data.clouds[12].points
    base = latent_attack(model, S, T, AttackConfig(mode="latent", rebalance=False))
    tight = latent_attack(model, S, T, AttackConfig(mode="latent", lam=1e6, rebalance=False))
    assert tight.metrics.S_CD <= base.metrics.S_CD


# ---------------------------------------------------------------------------
# target selection


def _pool(rng, n=32):
    return [PointCloud(rng.uniform(-0.5, 0.5, (n, 3)), int(rng.integers(1, 3))) for _ in range(12)]


def test_geometric_selection_matches_brute_force(rng):
    src = PointCloud(rng.uniform(-0.5, 0.5, (32, 3)), 0)
    for _ in range(10):
        pool = _pool(rng)
        for tc in (1, 2):
            ids = [i for i, c in enumerate(pool) if c.label == tc]
            if len(ids) < 3:
                continue
            expect = sorted(ids, key=lambda i: (oracles.chamfer(src.points, pool[i].points), i))[:3]
            assert select_targets(src, tc, pool, 3) == expect


def test_scaled_copy_ranks_first(rng):
    S = rng.uniform(-0.5, 0.5, (32, 3))
    pool = [PointCloud(rng.uniform(-0.5, 0.5, (32, 3)), 1) for _ in range(6)]
    pool.insert(4, PointCloud(S * 0.97, 1))
    assert select_targets(PointCloud(S, 0), 1, pool, 2)[0] == 4


def test_full_pool_is_returned_sorted(rng):
    src = PointCloud(rng.uniform(-0.5, 0.5, (16, 3)), 0)
    pool = [PointCloud(rng.uniform(-0.5, 0.5, (16, 3)), 1) for _ in range(5)]
    got = select_targets(src, 1, pool, 5)
    assert sorted(got) == list(range(5))
    d = [chamfer(src, pool[i]) for i in got]
    assert d == sorted(d)


def test_selection_errors(rng):
    src = PointCloud(rng.uniform(-0.5, 0.5, (16, 3)), 0)
    pool = [PointCloud(rng.uniform(-0.5, 0.5, (16, 3)), 1) for _ in range(2)]
    with pytest.raises(InvalidInputError):
        select_targets(src, 0, pool, 1)
    with pytest.raises(InsufficientPoolError):
        select_targets(src, 1, pool, 3)
    with pytest.raises(ConfigError):
        select_targets(src, 1, pool, 1, "latent-space")


def test_random_and_latent_selection(tiny_ae, rng):
    src = PointCloud(rng.uniform(-0.5, 0.5, (32, 3)), 0)
    pool = [PointCloud(rng.uniform(-0.5, 0.5, (32, 3)), 1) for _ in range(8)]
    picks = select_targets(src, 1, pool, 3, "random", rng=np.random.default_rng(0))
    assert len(set(picks)) == 3
    assert picks == select_targets(src, 1, pool, 3, "random", rng=np.random.default_rng(0))
    z = tiny_ae.encode(src)[0]
    dist = [np.linalg.norm(tiny_ae.encode(c)[0] - z) for c in pool]
    assert select_targets(src, 1, pool, 2, "latent-space", model=tiny_ae) == list(np.argsort(dist, kind="stable")[:2])


class _ConstantClassifier:
    num_classes = 3

    def __init__(self, label):
        self.label = label

    def predict(self, _):
        return self.label


def test_classifier_filtered_selection(tiny_ae, rng):
    src = PointCloud(rng.uniform(-0.5, 0.5, (32, 3)), 0)
    pool = [PointCloud(rng.uniform(-0.5, 0.5, (32, 3)), 1) for _ in range(4)]
    picks = select_targets(src, 1, pool, 2, "geometric+classifier", model=tiny_ae, classifier=_ConstantClassifier(1))
    assert picks == select_targets(src, 1, pool, 2)
    with pytest.raises(InsufficientPoolError):
        select_targets(src, 1, pool, 1, "geometric+classifier", model=tiny_ae, classifier=_ConstantClassifier(2))


# ---------------------------------------------------------------------------
# sweeps


def test_single_candidate_sweep_equals_direct_attack(tiny_ae):
    src = cloud("sphere", 0, 0)
    pool = [cloud("box", i, 1) for i in range(3)] + [cloud("torus", i, 2) for i in range(3)]
    cfg = AttackConfig(candidates=1, **FAST)
    results = targeted_sweep(tiny_ae, [(99, src)], pool, [0, 1, 2], cfg)
    assert [(r.source_id, r.target_class) for r in results] == [(99, 1), (99, 2)]
    for res in results:
        (tid,) = select_targets(src, res.target_class, pool, 1)
        direct = run_attack(tiny_ae, src.points, pool[tid].points, cfg)
        np.testing.assert_array_equal(res.Q, direct.Q)
        assert res.metrics == direct.metrics and res.target_id == tid


def test_more_candidates_never_raise_the_score(tiny_ae):
    src = cloud("sphere", 0, 0)
    pool = [cloud("box", i, 1) for i in range(4)]
    one = targeted_sweep(tiny_ae, [(0, src)], pool, [0, 1], AttackConfig(candidates=1, **FAST))[0]
    many = targeted_sweep(tiny_ae, [(0, src)], pool, [0, 1], AttackConfig(candidates=3, **FAST))[0]
    assert many.r <= one.r
    assert many.r == min(many.candidate_scores) and len(many.candidate_ids) == 3


def test_parallel_sweep_matches_serial(tiny_ae):
    srcs = [(0, cloud("sphere", 0, 0)), (1, cloud("box", 9, 1))]
    pool = [cloud("box", i, 1) for i in range(2)] + [cloud("sphere", i + 5, 0) for i in range(2)]
    cfg = AttackConfig(candidates=2, steps=8, keep_best_from=4)
    serial = targeted_sweep(tiny_ae, srcs, pool, [0, 1], cfg)
    par = targeted_sweep(tiny_ae, srcs, pool, [0, 1], cfg, workers=2)
    for a, b in zip(serial, par):
        np.testing.assert_array_equal(a.Q, b.Q)
        assert (a.source_id, a.target_id) == (b.source_id, b.target_id)


def test_sweep_needs_two_classes(tiny_ae):
    with pytest.raises(ConfigError):
        targeted_sweep(tiny_ae, [(0, cloud("sphere", 0, 0))], [], [0], AttackConfig(**FAST))


def test_untargeted_picks_the_class_with_a_near_copy(small_trained):
    data, model = small_trained
    S = data.clouds[0]  # a sphere
    rng = np.random.default_rng(0)
    near = PointCloud(S.points + rng.normal(scale=1e-3, size=S.points.shape), 2)
    pool = [PointCloud(c.points, 1) for c in data.subset(range(12, 16))] + [near]
    pool += [PointCloud(c.points, 2) for c in data.subset(range(24, 27))]
    res = untargeted(model, (0, S), pool, [0, 1, 2], AttackConfig(candidates=1, steps=60, keep_best_from=40))
    assert res.target_class == 2 and res.target_id == 4


def test_untargeted_with_one_other_class_equals_targeted(tiny_ae):
    src = cloud("sphere", 0, 0)
    pool = [cloud("box", i, 1) for i in range(2)]
    cfg = AttackConfig(candidates=1, **FAST)
    res = untargeted(tiny_ae, (0, src), pool, [0, 1], cfg)
    (tgt,) = targeted_sweep(tiny_ae, [(0, src)], pool, [0, 1], cfg)
    np.testing.assert_array_equal(res.Q, tgt.Q)


def test_results_round_trip_through_disk(tiny_ae, tmp_path):
    src = cloud("sphere", 0, 0)
    pool = [cloud("box", i, 1) for i in range(2)]
    results = targeted_sweep(tiny_ae, [(7, src)], pool, [0, 1], AttackConfig(candidates=2, **FAST))
    save_results(tmp_path, results, ["sphere", "box"])
    back = load_results(tmp_path)
    assert len(back) == 1
    a, b = results[0], back[0]
    for name in ("S", "T", "P", "Q", "Q_hat", "total_trace"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.metrics == b.metrics and a.candidate_ids == b.candidate_ids
    np.testing.assert_array_equal(b.Q - b.P, b.S)
    assert (tmp_path / "clouds" / "0000_adversarial.xyz").exists()


# ---------------------------------------------------------------------------
# interpolation


def test_interpolation_endpoints_and_midpoint(tiny_ae, rng):
    S, Q = rng.uniform(-0.5, 0.5, (32, 3)), rng.uniform(-0.5, 0.5, (32, 3))
    (u0, r0), (u5, _), (u1, r1) = interpolate_evolution(S, Q, tiny_ae, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(u0, S)
    np.testing.assert_array_equal(r0, tiny_ae.reconstruct(S))
    np.testing.assert_array_equal(u1, Q)
    np.testing.assert_array_equal(r1, tiny_ae.reconstruct(Q))
    np.testing.assert_allclose(u5, (S + Q) / 2, rtol=0, atol=1e-16)


def test_interpolation_errors(tiny_ae, rng):
    S = rng.uniform(-0.5, 0.5, (32, 3))
    with pytest.raises(InvalidInputError):
        interpolate_evolution(S, S, tiny_ae, [0.0, 1.5])
    with pytest.raises(InvalidInputError):
        interpolate_evolution(S, S, tiny_ae, [0.5, 0.2])
