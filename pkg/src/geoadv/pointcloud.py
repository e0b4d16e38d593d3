"""Point clouds: data model, synthetic shape classes, neighbor queries and file I/O.

Coordinates are float64 throughout. Shapes are generated already normalized to
the unit cube (bounding box centered at the origin, largest extent 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree


class InvalidInputError(ValueError):
    pass


class ParseError(ValueError):
    """Malformed point-cloud file. ``line`` is 1-based, or None for whole-file errors."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ShapeClass:
    id: int
    name: str


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvalidInputError(f"expected an (n, 3) array with n >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected an (n, 3) array, got shape {pts.shape}")
    return pts


def normalize_unit_cube(cloud: CloudLike) -> PointCloud:
    """Center the bounding box at the origin and scale uniformly so the largest extent is 1.

    A cloud with zero extent (all points equal) is only translated.
    """
    pts = as_points(cloud)
    if pts.shape[0] < 1:
        raise InvalidInputError("empty point cloud")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("point cloud has non-finite coordinates")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    out = pts - (lo + hi) / 2.0
    extent = float((hi - lo).max())
    if extent > 0.0:
        out = out / extent
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(out, label)


GRID = 2.0**-32


def snap_to_grid(x: np.ndarray) -> np.ndarray:
    """Round coordinates to multiples of ``GRID``.

    Sums and differences of snapped values below 2**20 in magnitude are exact
    in float64, which keeps S + P and Q - P free of rounding.
    """
    return np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID


# ---------------------------------------------------------------------------
# synthetic shapes

# plastic-number (R2) low discrepancy sequence in the unit square
_PLASTIC = 1.32471795724474602596
_R2_STEP = np.array([1.0 / _PLASTIC, 1.0 / _PLASTIC**2])


def _r2_square(count: int, rng: np.random.Generator) -> np.ndarray:
    offset = rng.random(2)
    i = np.arange(count, dtype=np.float64)[:, None]
    return (offset + (i + 0.5) * _R2_STEP) % 1.0


def _split_counts(areas: Sequence[float], n: int) -> list[int]:
    # largest remainder allocation of n points proportional to area
    a = np.asarray(areas, dtype=np.float64)
    quota = n * a / a.sum()
    counts = np.floor(quota).astype(int)
    rest = n - counts.sum()
    order = np.lexsort((np.arange(len(a)), -(quota - counts)))
    counts[order[:rest]] += 1
    return counts.tolist()


def _rect(uv: np.ndarray, origin, du, dv) -> np.ndarray:
    return np.asarray(origin) + uv[:, :1] * np.asarray(du) + uv[:, 1:] * np.asarray(dv)


def _sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    radius = rng.uniform(0.3, 0.6)
    uv = _r2_square(n, rng)
    z = 1.0 - 2.0 * uv[:, 0]
    phi = 2.0 * np.pi * uv[:, 1]
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _box(n: int, rng: np.random.Generator) -> np.ndarray:
    a, b, c = rng.uniform(0.35, 1.0, size=3) / 2.0
    faces = [
        ((-a, -b, -c), (2 * a, 0, 0), (0, 2 * b, 0)),
        ((-a, -b, c), (2 * a, 0, 0), (0, 2 * b, 0)),
        ((-a, -b, -c), (2 * a, 0, 0), (0, 0, 2 * c)),
        ((-a, b, -c), (2 * a, 0, 0), (0, 0, 2 * c)),
        ((-a, -b, -c), (0, 2 * b, 0), (0, 0, 2 * c)),
        ((a, -b, -c), (0, 2 * b, 0), (0, 0, 2 * c)),
    ]
    areas = [4 * a * b, 4 * a * b, 4 * a * c, 4 * a * c, 4 * b * c, 4 * b * c]
    parts = []
    for (origin, du, dv), count in zip(faces, _split_counts(areas, n)):
        if count:
            parts.append(_rect(_r2_square(count, rng), origin, du, dv))
    return np.concatenate(parts)


def _torus(n: int, rng: np.random.Generator) -> np.ndarray:
    major = 1.0
    minor = rng.uniform(0.25, 0.5)
    uv = _r2_square(n, rng)
    # tube angle density is proportional to (major + minor cos(theta)); invert its cdf
    grid = np.linspace(0.0, 2.0 * np.pi, 4097)
    cdf = (grid + (minor / major) * np.sin(grid)) / (2.0 * np.pi)
    theta = np.interp(uv[:, 0], cdf, grid)
    phi = 2.0 * np.pi * uv[:, 1]
    ring = major + minor * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)


def _disk(uv: np.ndarray, radius: float, z: float) -> np.ndarray:
    r = radius * np.sqrt(uv[:, 0])
    phi = 2.0 * np.pi * uv[:, 1]
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.full_like(r, z)], axis=1)


def _cylinder(n: int, rng: np.random.Generator) -> np.ndarray:
    radius = 0.5
    height = rng.uniform(0.5, 1.6) * 2 * radius
    areas = [2 * np.pi * radius * height, np.pi * radius**2, np.pi * radius**2]
    n_side, n_top, n_bot = _split_counts(areas, n)
    uv = _r2_square(n_side, rng)
    phi = 2.0 * np.pi * uv[:, 1]
    side = np.stack([radius * np.cos(phi), radius * np.sin(phi), height * (uv[:, 0] - 0.5)], axis=1)
    top = _disk(_r2_square(n_top, rng), radius, height / 2)
    bot = _disk(_r2_square(n_bot, rng), radius, -height / 2)
    return np.concatenate([side, top, bot])


def _plane_cross(n: int, rng: np.random.Generator) -> np.ndarray:
    a, b = rng.uniform(0.5, 1.0, size=2) / 2.0
    c = rng.uniform(0.4, 1.0) / 2.0
    areas = [4 * a * c, 4 * b * c]
    n1, n2 = _split_counts(areas, n)
    p1 = _rect(_r2_square(n1, rng), (-a, 0, -c), (2 * a, 0, 0), (0, 0, 2 * c))
    p2 = _rect(_r2_square(n2, rng), (0, -b, -c), (0, 2 * b, 0), (0, 0, 2 * c))
    return np.concatenate([p1, p2])


def _cone(n: int, rng: np.random.Generator) -> np.ndarray:
    radius = 0.5
    height = rng.uniform(0.6, 1.6) * 2 * radius
    slant = math.hypot(radius, height)
    n_side, n_base = _split_counts([np.pi * radius * slant, np.pi * radius**2], n)
    uv = _r2_square(n_side, rng)
    t = np.sqrt(uv[:, 0])  # fraction of the way from apex to rim, area-uniform
    phi = 2.0 * np.pi * uv[:, 1]
    side = np.stack([t * radius * np.cos(phi), t * radius * np.sin(phi), height / 2 - t * height], axis=1)
    base = _disk(_r2_square(n_base, rng), radius, -height / 2)
    return np.concatenate([side, base])


SHAPE_SAMPLERS: dict[str, Callable[[int, np.random.Generator], np.ndarray]] = {
    "sphere": _sphere,
    "box": _box,
    "torus": _torus,
    "cylinder": _cylinder,
    "plane_cross": _plane_cross,
    "cone": _cone,
}
SHAPE_NAMES = tuple(SHAPE_SAMPLERS)


def make_classes(names: Sequence[str]) -> list[ShapeClass]:
    """Dense class ids 0..C-1 for the given shape names, in order."""
    out = []
    for i, name in enumerate(names):
        if name not in SHAPE_SAMPLERS:
            raise InvalidInputError(f"unknown shape class {name!r}; known: {', '.join(SHAPE_NAMES)}")
        out.append(ShapeClass(i, name))
    if len({c.name for c in out}) != len(out):
        raise InvalidInputError("duplicate shape class names")
    return out


def _resolve_class(shape: Union[ShapeClass, str, int]) -> ShapeClass:
    if isinstance(shape, ShapeClass):
        if shape.name not in SHAPE_SAMPLERS:
            raise InvalidInputError(f"unknown shape class {shape.name!r}")
        return shape
    if isinstance(shape, str):
        if shape not in SHAPE_SAMPLERS:
            raise InvalidInputError(f"unknown shape class {shape!r}")
        return ShapeClass(SHAPE_NAMES.index(shape), shape)
    if isinstance(shape, (int, np.integer)) and 0 <= int(shape) < len(SHAPE_NAMES):
        return ShapeClass(int(shape), SHAPE_NAMES[int(shape)])
    raise InvalidInputError(f"unknown shape class id {shape!r}")


def generate_shape(shape: Union[ShapeClass, str, int], n: int = 256, seed: int = 0) -> PointCloud:
    """Sample ``n`` points quasi-uniformly on a jittered instance of a synthetic shape class.

    Deterministic in (class name, n, seed). Integer ids refer to ``SHAPE_NAMES`` order.
    """
    cls = _resolve_class(shape)
    if n < 8:
        raise InvalidInputError(f"need at least 8 points, got {n}")
    name_key = sum(ord(ch) * 31**i for i, ch in enumerate(cls.name)) % (2**32)
    rng = np.random.default_rng([int(seed), name_key, int(n)])
    pts = SHAPE_SAMPLERS[cls.name](n, rng)
    return PointCloud(snap_to_grid(normalize_unit_cube(pts).points), cls.id)


# ---------------------------------------------------------------------------
# neighbor queries


def _exact_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


class NeighborIndex:
    """Exact k-nearest-neighbor index over a reference cloud.

    The k-d tree only proposes candidates. Distances are recomputed from the
    coordinates and ties are resolved by the lower point id, so results equal a
    brute-force scan.
    """

    __slots__ = ("reference", "_tree")

    def __init__(self, cloud: CloudLike):
        pts = np.array(as_points(cloud), dtype=np.float64)
        if pts.shape[0] < 1:
            raise InvalidInputError("empty reference cloud")
        pts.setflags(write=False)
        self.reference = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.reference.shape[0]

    def query(self, queries: np.ndarray, k: int, exclude: Optional[np.ndarray] = None):
        """k nearest reference points for each row of ``queries``.

        ``exclude`` optionally gives, per query row, a reference id to skip
        (-1 for none). Returns ``(ids, dists)`` of shape (m, k), sorted by
        (distance, id).
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self)
        if exclude is None:
            exclude = np.full(q.shape[0], -1, dtype=np.int64)
        exclude = np.asarray(exclude, dtype=np.int64)
        avail = n - (exclude >= 0).astype(int)
        if k < 1 or np.any(k > avail):
            raise InvalidInputError(f"k={k} out of range for reference size {n}")
        kk = min(k + 1, n)
        d0, _ = self._tree.query(q, k=kk)
        d0 = d0.reshape(q.shape[0], kk)
        # radius that certainly covers the k best (and all ties with the k-th) after exclusion
        radius = d0[:, -1] * (1.0 + 1e-9) + 1e-12
        ids_out = np.empty((q.shape[0], k), dtype=np.int64)
        d_out = np.empty((q.shape[0], k), dtype=np.float64)
        candidates = self._tree.query_ball_point(q, radius)
        for row, cand in enumerate(candidates):
            cand = np.asarray(cand, dtype=np.int64)
            cand = cand[cand != exclude[row]]
            dist = _exact_dist(self.reference[cand], q[row])
            order = np.lexsort((cand, dist))[:k]
            ids_out[row] = cand[order]
            d_out[row] = dist[order]
        return ids_out, d_out


def knn(index: NeighborIndex, query, k: int, exclude_id: Optional[int] = None) -> list[tuple[int, float]]:
    """k nearest neighbors of a single 3D point as ``[(point_id, distance), ...]``."""
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    excl = None if exclude_id is None else np.array([exclude_id])
    ids, dists = index.query(q, k, excl)
    return [(int(i), float(d)) for i, d in zip(ids[0], dists[0])]


def knn_self(cloud: CloudLike, k: int):
    """k nearest neighbors of every point within its own cloud, excluding the point itself."""
    index = cloud if isinstance(cloud, NeighborIndex) else NeighborIndex(cloud)
    n = len(index)
    return index.query(index.reference, k, exclude=np.arange(n))


def refine_nearest(d: np.ndarray, X: np.ndarray, Y: np.ndarray, x2: np.ndarray, y2max: float):
    """Exact nearest row of Y for every row of X, given approximate distances ``d``.

    ``d`` may be off by a rounding error proportional to |x|^2 + |y|^2 (the
    expanded-norm form). Every candidate within that bound of the row minimum
    is rescored from coordinate differences; exact ties go to the lower index.
    ``d`` is used as scratch space but holds its original values on return.
    """
    idx = d.argmin(axis=1)
    rows = np.arange(idx.size)
    dmin = d[rows, idx]
    if not np.all(np.isfinite(dmin)):
        # overflowed input: no meaningful refinement, let the caller see the non-finite distances
        diff = X - Y[idx]
        return idx, (diff * diff).sum(axis=1)
    tol = 1e-13 * (x2 + y2max) + 1e-300
    # runner-up per row, found by masking the minimum in place and restoring it
    d[rows, idx] = np.inf
    second = d.min(axis=1)
    d[rows, idx] = dmin
    multi = np.flatnonzero(second <= dmin + tol)
    if multi.size:
        # only rows with several near-minimal candidates need an exact rescan
        sub, cols = np.nonzero(d[multi] <= (dmin[multi] + tol[multi])[:, None])
        rows = multi[sub]
        diff = X[rows] - Y[cols]
        exact = (diff * diff).sum(axis=1)
        order = np.lexsort((cols, exact, rows))
        rows, cols = rows[order], cols[order]
        first = np.ones(rows.size, dtype=bool)
        first[1:] = rows[1:] != rows[:-1]
        idx[rows[first]] = cols[first]
    diff = X - Y[idx]
    return idx, (diff * diff).sum(axis=1)


def nearest_sqdist(X: np.ndarray, Y: np.ndarray, chunk: int = 2048):
    """For each row of X, the index of and squared distance to its nearest row in Y.

    Candidate neighbors come from the expanded-norm BLAS form and are then
    resolved exactly, so results equal a brute-force scan.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise InvalidInputError("nearest neighbor query on an empty cloud")
    y2 = (Y * Y).sum(axis=1)
    x2 = (X * X).sum(axis=1)
    y2max = float(y2.max())
    idx = np.empty(X.shape[0], dtype=np.int64)
    sq = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, start + chunk)
        d = y2[None, :] - 2.0 * (X[sl] @ Y.T)
        idx[sl], sq[sl] = refine_nearest(d, X[sl], Y, x2[sl], y2max)
    return idx, sq


# ---------------------------------------------------------------------------
# file I/O

FORMATS = ("xyz", "ply")


def _format_of(path: Path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = "ply" if path.suffix.lower() == ".ply" else "xyz"
    if fmt == "ply-ascii":
        fmt = "ply"
    if fmt not in FORMATS:
        raise InvalidInputError(f"unknown point-cloud format {fmt!r}")
    return fmt


def save_cloud(cloud: CloudLike, path: Union[str, Path], fmt: Optional[str] = None) -> None:
    path = Path(path)
    pts = as_points(cloud)
    fmt = _format_of(path, fmt)
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist())
    if fmt == "ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {pts.shape[0]}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n"
        )
        body = header + body
    path.write_text(body)


def _parse_row(tokens: list[str], lineno: int, arity: int) -> list[float]:
    if len(tokens) != arity:
        raise ParseError(f"expected {arity} values, found {len(tokens)}", lineno)
    try:
        row = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric token in {' '.join(tokens)!r}", lineno) from None
    if not all(math.isfinite(v) for v in row):
        raise ParseError("non-finite coordinate", lineno)
    return row


def _load_xyz(lines: list[str]) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        rows.append(_parse_row(tokens, lineno, 3))
    if not rows:
        raise ParseError("no points in file")
    return np.array(rows)


def _load_ply(lines: list[str]) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    count = None
    props: list[str] = []
    lineno = 1
    header_done = False
    for lineno in range(2, len(lines) + 1):
        tokens = lines[lineno - 1].split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise ParseError(f"unsupported format {' '.join(tokens[1:])!r}", lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3 or tokens[1] != "vertex" or count is not None:
                raise ParseError("only a single 'element vertex N' is supported", lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"bad vertex count {tokens[2]!r}", lineno) from None
        elif tokens[0] == "property":
            if count is None or len(tokens) != 3 or tokens[1] not in ("float", "double", "float32", "float64"):
                raise ParseError(f"unsupported property line {' '.join(tokens)!r}", lineno)
            props.append(tokens[2])
        elif tokens[0] == "end_header":
            header_done = True
            break
        else:
            raise ParseError(f"unexpected header line {tokens[0]!r}", lineno)
    if not header_done:
        raise ParseError("missing end_header", lineno)
    if count is None:
        raise ParseError("missing 'element vertex' declaration", lineno)
    if not {"x", "y", "z"} <= set(props):
        raise ParseError("vertex element lacks x/y/z properties", lineno)
    cols = [props.index(c) for c in "xyz"]
    rows = []
    for i in range(lineno + 1, len(lines) + 1):
        tokens = lines[i - 1].split()
        if not tokens:
            continue
        if len(rows) == count:
            raise ParseError(f"point count mismatch: header declares {count}, file has more", i)
        row = _parse_row(tokens, i, len(props))
        rows.append([row[c] for c in cols])
    if len(rows) != count:
        raise ParseError(f"point count mismatch: header declares {count}, found {len(rows)}")
    if count == 0:
        raise ParseError("no points in file")
    return np.array(rows)


def load_cloud(path: Union[str, Path], fmt: Optional[str] = None) -> PointCloud:
    path = Path(path)
    fmt = _format_of(path, fmt)
    lines = path.read_text().splitlines()
    pts = _load_ply(lines) if fmt == "ply" else _load_xyz(lines)
    return PointCloud(pts)
