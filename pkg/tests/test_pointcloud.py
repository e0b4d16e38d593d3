import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoadv.pointcloud import (
    SHAPE_NAMES,
    InvalidInputError,
    NeighborIndex,
    ParseError,
    PointCloud,
    generate_shape,
    knn,
    knn_self,
    load_cloud,
    make_classes,
    normalize_unit_cube,
    save_cloud,
    snap_to_grid,
)

from . import oracles

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=64)


def clouds(min_n=1, max_n=40):
    return st.integers(min_n, max_n).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


# ---------------------------------------------------------------------------
# PointCloud and normalization


def test_pointcloud_rejects_non_finite_and_bad_shape():
    with pytest.raises(InvalidInputError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((0, 3)))


def test_pointcloud_is_read_only():
    pc = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0


def test_normalize_box_corners():
    corners = np.array([[x, y, z] for x in (0, 2) for y in (0, 1) for z in (0, 1)], float)
    out = normalize_unit_cube(corners).points
    np.testing.assert_allclose(out.max(axis=0) - out.min(axis=0), [1.0, 0.5, 0.5])
    np.testing.assert_allclose((out.max(axis=0) + out.min(axis=0)) / 2, 0.0, atol=1e-15)


def test_normalize_single_point_goes_to_origin():
    np.testing.assert_array_equal(normalize_unit_cube(np.array([[5.0, 5.0, 5.0]])).points, [[0.0, 0.0, 0.0]])


def test_normalize_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        normalize_unit_cube(np.array([[0.0, np.inf, 0.0]]))


def test_normalize_random_cloud_recomputed_bbox(rng):
    out = normalize_unit_cube(rng.normal(size=(64, 3)) * 3 + 7).points
    lo, hi = out.min(axis=0), out.max(axis=0)
    assert abs((hi - lo).max() - 1.0) <= 1e-9
    np.testing.assert_allclose((lo + hi) / 2, 0.0, atol=1e-12)


@given(clouds(2))
def test_normalize_invariants(pts):
    out = normalize_unit_cube(pts).points
    extent = (out.max(axis=0) - out.min(axis=0)).max()
    if np.ptp(pts, axis=0).max() > 1e-6:
        assert abs(extent - 1.0) <= 1e-9
        assert np.all(np.abs(out) <= 0.5 + 1e-9)
    np.testing.assert_allclose(normalize_unit_cube(out).points, out, atol=1e-9)


@given(clouds(2))
def test_normalize_preserves_aspect_ratio(pts):
    ext_in = np.ptp(pts, axis=0)
    if ext_in.max() < 1e-6:
        return
    ext_out = np.ptp(normalize_unit_cube(pts).points, axis=0)
    np.testing.assert_allclose(ext_out, ext_in / ext_in.max(), atol=1e-9)


# ---------------------------------------------------------------------------
# shape generation


def test_generate_is_deterministic():
    a, b = generate_shape("sphere", 256, 7), generate_shape("sphere", 256, 7)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, generate_shape("sphere", 256, 8).points)


def test_generated_sphere_lies_on_its_surface():
    pts = generate_shape("sphere", 256, 7).points
    # algebraic sphere fit: |p|^2 = 2 c.p + (R^2 - |c|^2)
    A = np.hstack([2 * pts, np.ones((len(pts), 1))])
    sol, *_ = np.linalg.lstsq(A, (pts**2).sum(axis=1), rcond=None)
    center = sol[:3]
    radius = np.sqrt(sol[3] + center @ center)
    assert np.abs(np.linalg.norm(pts - center, axis=1) - radius).max() <= 1e-6
    # samples miss the exact poles, so the normalized radius is slightly above 1/2
    assert 0.5 <= radius <= 0.51


def test_generated_box_points_lie_on_faces():
    pts = generate_shape("box", 256, 1).points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    face_dist = np.minimum(np.abs(pts - lo), np.abs(pts - hi)).min(axis=1)
    assert face_dist.max() <= 1e-6


def test_generated_shapes_are_normalized_and_labelled():
    classes = make_classes(SHAPE_NAMES)
    for cls in classes:
        pc = generate_shape(cls, 128, 3)
        assert pc.points.shape == (128, 3)
        assert pc.label == cls.id
        assert abs(np.ptp(pc.points, axis=0).max() - 1.0) <= 1e-9


def test_generated_shapes_sit_on_the_coordinate_grid():
    pts = generate_shape("torus", 64, 2).points
    np.testing.assert_array_equal(snap_to_grid(pts), pts)


def test_generated_instances_vary_within_class():
    a, b = generate_shape("torus", 256, 0).points, generate_shape("torus", 256, 1).points
    assert oracles.chamfer(a, b) > 1e-4


def test_generate_errors():
    with pytest.raises(Exception):
        generate_shape("dodecahedron", 64, 0)
    with pytest.raises(Exception):
        generate_shape(99, 64, 0)
    with pytest.raises(InvalidInputError):
        generate_shape("sphere", 4, 0)


def test_class_ids_are_dense():
    assert [c.id for c in make_classes(["box", "sphere", "torus", "cone"])] == [0, 1, 2, 3]


# ---------------------------------------------------------------------------
# neighbor queries


def test_knn_collinear_excluding_self():
    index = NeighborIndex(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]))
    assert knn(index, [1, 0, 0], 2, exclude_id=1) == [(0, 1.0), (2, 1.0)]


def test_knn_including_self_is_distance_zero():
    index = NeighborIndex(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]))
    assert knn(index, [0, 0, 0], 1) == [(0, 0.0)]


def test_knn_k_out_of_range():
    index = NeighborIndex(np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        knn(index, [0, 0, 0], 4)
    with pytest.raises(InvalidInputError):
        knn(index, [0, 0, 0], 0)
    with pytest.raises(InvalidInputError):
        knn(index, [0, 0, 0], 3, exclude_id=0)


def test_knn_matches_brute_force_512(rng):
    ref = rng.uniform(-0.5, 0.5, (512, 3))
    index = NeighborIndex(ref)
    for q in rng.uniform(-0.6, 0.6, (100, 3)):
        ids, dists = oracles.knn(ref, q, 5)
        got = knn(index, q, 5)
        assert [i for i, _ in got] == ids
        assert [d for _, d in got] == dists


def test_knn_matches_brute_force_1000_trials(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 24))
        # a coarse lattice makes exact distance ties common
        ref = rng.integers(-2, 3, (n, 3)).astype(float)
        q = rng.integers(-2, 3, 3).astype(float)
        k = int(rng.integers(1, n + 1))
        ids, dists = oracles.knn(ref, q, k)
        got = knn(NeighborIndex(ref), q, k)
        assert [i for i, _ in got] == ids and [d for _, d in got] == dists


@given(clouds(3, 30), st.randoms(use_true_random=False))
def test_knn_distances_invariant_under_permutation(pts, rnd):
    perm = list(range(len(pts)))
    rnd.shuffle(perm)
    _, d1 = knn_self(pts, 2)
    _, d2 = knn_self(pts[perm], 2)
    np.testing.assert_array_equal(d1[perm], d2)


# ---------------------------------------------------------------------------
# file I/O


@pytest.mark.parametrize("fmt", ["xyz", "ply"])
def test_save_load_round_trip(tmp_path, fmt, rng):
    pts = rng.normal(size=(3, 3))
    path = tmp_path / f"c.{fmt}"
    save_cloud(pts, path)
    loaded = load_cloud(path).points
    np.testing.assert_allclose(loaded, pts, atol=1e-6)
    # repr formatting makes the round trip exact
    np.testing.assert_array_equal(loaded, pts)


def test_ply_ascii_alias(tmp_path):
    path = tmp_path / "c.txt"
    save_cloud(np.eye(3), path, "ply-ascii")
    assert path.read_text().startswith("ply\nformat ascii 1.0\n")
    np.testing.assert_array_equal(load_cloud(path, "ply-ascii").points, np.eye(3))


def test_xyz_arity_error_names_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError) as err:
        load_cloud(path)
    assert err.value.line == 2 and "line 2" in str(err.value)


def test_xyz_non_numeric_token(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n0 zero 0\n")
    with pytest.raises(ParseError) as err:
        load_cloud(path)
    assert err.value.line == 2


def test_ply_count_mismatch(tmp_path):
    path = tmp_path / "bad.ply"
    header = "ply\nformat ascii 1.0\nelement vertex 10\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
    path.write_text(header + "0 0 0\n" * 9)
    with pytest.raises(ParseError, match="count|vertices|expected"):
        load_cloud(path)


def test_ply_missing_end_header(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\n")
    with pytest.raises(ParseError):
        load_cloud(path)
