"""Small reverse-mode differentiation engine over the ops the networks and attack losses need.

Tensors are float64 numpy arrays of rank <= 2. A ``Tape`` records nodes in
creation order, which is a topological order, so ``backward`` walks it in
reverse. Piecewise decisions (relu masks, max-pool argmaxes, nearest-neighbor
assignments) are logged on the tape; ``Tape.region_key`` summarises them so a
gradient check can skip coordinates whose perturbation crosses a kink.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .pointcloud import nearest_sqdist, refine_nearest


class NonFiniteError(FloatingPointError):
    pass


class ShapeMismatchError(ValueError):
    pass


class Node:
    __slots__ = ("tape", "id", "op", "value", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, tape, op, value, parents=(), backward=None, requires_grad=False):
        self.tape = tape
        self.op = op
        self.value = value
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad
        self.grad = None
        self.id = len(tape.nodes)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node({self.op}#{self.id}, shape={self.value.shape})"


class Tape:
    def __init__(self, row_exact: bool = True):
        self.nodes: list[Node] = []
        self.decisions: list[np.ndarray] = []
        # affine rows independent of the other rows in the batch (see affine_value);
        # training switches it off for speed since nothing compares its rows bitwise
        self.row_exact = row_exact

    def leaf(self, value, requires_grad: bool = True) -> Node:
        arr = np.array(value, dtype=np.float64) if requires_grad else np.asarray(value, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeMismatchError(f"rank {arr.ndim} tensors are not supported")
        node = Node(self, "leaf", arr, requires_grad=requires_grad)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Node], backward) -> Node:
        needs = any(p.requires_grad for p in parents)
        node = Node(self, op, value, tuple(parents), backward if needs else None, needs)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op {op!r} (node {node.id}) produced non-finite values")
        self.nodes.append(node)
        return node

    def region_key(self) -> str:
        h = hashlib.sha1()
        for d in self.decisions:
            h.update(np.ascontiguousarray(d).tobytes())
        return h.hexdigest()


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ValueError("at least one argument must be a tape node")


def _acc(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


# ---------------------------------------------------------------------------
# plain kernels, shared by the taped ops and by direct evaluation


def affine_value(x: np.ndarray, W: np.ndarray, b: np.ndarray, row_exact: bool = True) -> np.ndarray:
    """x W + b.

    A plain 2-D product lets BLAS pick blocking by row count, so a point's
    features could change in the last bit when other points are added or
    removed. ``row_exact`` computes the product one row at a time on the same
    kernel instead, so encoding a subset of points reproduces their features
    exactly. It costs two to four times as much as one 2-D product at these sizes.
    """
    if x.ndim == 1:
        return x @ W + b
    if row_exact:
        return np.matmul(x[:, None, :], W)[:, 0, :] + b
    return x @ W + b


def relu_value(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def maxpool_value(x: np.ndarray, groups: int = 1):
    """Feature-wise max over points. Returns (values, argmax ids); first index wins ties."""
    n_total, d = x.shape
    if groups == 1:
        ids = x.argmax(axis=0)
        return x[ids, np.arange(d)], ids
    if n_total % groups:
        raise ShapeMismatchError(f"{n_total} rows do not split into {groups} groups")
    xg = x.reshape(groups, n_total // groups, d)
    ids = xg.argmax(axis=1)
    return np.take_along_axis(xg, ids[:, None, :], axis=1)[:, 0, :], ids


_SCRATCH: dict = {}


def _scratch(slot: int, shape: tuple) -> np.ndarray:
    """A reusable distance matrix; fresh allocations of this size cost page faults on every call."""
    if shape[0] * shape[1] > 1 << 20:
        return np.empty(shape)
    buf = _SCRATCH.get(slot)
    if buf is None or buf.shape != shape:
        buf = _SCRATCH[slot] = np.empty(shape)
    return buf


def chamfer_parts(X: np.ndarray, Y: np.ndarray):
    """Nearest-neighbor assignments and squared distances in both directions.

    One expanded-norm distance matrix proposes the neighbors both ways; near
    ties are then resolved from exact coordinate differences.
    """
    if X.shape[0] * Y.shape[0] > 4_000_000:
        ixy, dxy = nearest_sqdist(X, Y)
        iyx, dyx = nearest_sqdist(Y, X)
        return ixy, dxy, iyx, dyx
    # overflow surfaces as a non-finite value that the tape reports by op name
    with np.errstate(over="ignore", invalid="ignore"):
        x2, y2 = (X * X).sum(axis=1), (Y * Y).sum(axis=1)
        # |x|^2 + |y|^2 - 2 x.y as one product of augmented coordinates, once per
        # direction so each argmin scans contiguous rows
        ones_x, ones_y = np.ones((len(X), 1)), np.ones((len(Y), 1))
        xa = np.hstack([X, x2[:, None], ones_x])
        ya = np.hstack([-2.0 * Y, ones_y, y2[:, None]])
        ixy, dxy = refine_nearest(np.matmul(xa, ya.T, out=_scratch(0, (len(X), len(Y)))), X, Y, x2, float(y2.max()))
        xb = np.hstack([-2.0 * X, ones_x, x2[:, None]])
        yb = np.hstack([Y, y2[:, None], ones_y])
        iyx, dyx = refine_nearest(np.matmul(yb, xb.T, out=_scratch(1, (len(Y), len(X)))), Y, X, y2, float(x2.max()))
    return ixy, dxy, iyx, dyx


def chamfer_value(X: np.ndarray, Y: np.ndarray) -> float:
    _, dxy, _, dyx = chamfer_parts(X, Y)
    return dxy.mean() + dyx.mean()


# ---------------------------------------------------------------------------
# taped ops


def affine(x, W, b) -> Node:
    tape = _tape_of(x, W, b)
    x, W, b = (_as_node(tape, v) for v in (x, W, b))
    if x.value.ndim == 1:
        xv = x.value[None, :]
    else:
        xv = x.value
    if W.value.ndim != 2 or xv.shape[1] != W.value.shape[0] or b.value.shape != (W.value.shape[1],):
        raise ShapeMismatchError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    out = affine_value(x.value, W.value, b.value, tape.row_exact)

    def backward(g):
        g2 = g if g.ndim == 2 else g[None, :]
        if x.requires_grad:
            _acc(x, (g2 @ W.value.T).reshape(x.value.shape))
        if W.requires_grad:
            _acc(W, xv.T @ g2)
        if b.requires_grad:
            _acc(b, g2.sum(axis=0))

    return tape.record("affine", out, (x, W, b), backward)


def relu(x: Node) -> Node:
    mask = x.value > 0.0
    x.tape.decisions.append(np.packbits(mask))

    def backward(g):
        _acc(x, g * mask)

    return x.tape.record("relu", relu_value(x.value), (x,), backward)


def maxpool_points(x: Node, groups: int = 1):
    """Max over the point axis of an (n, d) feature matrix.

    With ``groups > 1`` the rows are ``groups`` stacked clouds of equal size and
    the result is (groups, d). Returns ``(node, argmax_ids)``.
    """
    if x.value.ndim != 2:
        raise ShapeMismatchError("maxpool_points expects an (n, d) matrix")
    values, ids = maxpool_value(x.value, groups)
    x.tape.decisions.append(ids)
    n_total, d = x.value.shape

    def backward(g):
        gx = np.zeros_like(x.value)
        if groups == 1:
            gx[ids, np.arange(d)] = g
        else:
            per = n_total // groups
            rows = ids + (np.arange(groups) * per)[:, None]
            gx[rows, np.broadcast_to(np.arange(d), ids.shape)] = g
        _acc(x, gx)

    return x.tape.record("maxpool_points", values, (x,), backward), ids


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return tape.record("add", a.value + b.value, (a, b), backward)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return tape.record("sub", a.value - b.value, (a, b), backward)


def scale(x: Node, c: float) -> Node:
    c = float(c)

    def backward(g):
        _acc(x, g * c)

    return x.tape.record("scale", x.value * c, (x,), backward)


def reshape(x: Node, shape) -> Node:
    out = x.value.reshape(shape)
    if out.ndim > 2:
        raise ShapeMismatchError("reshape result must have rank <= 2")

    def backward(g):
        _acc(x, g.reshape(x.value.shape))

    return x.tape.record("reshape", out, (x,), backward)


def mean(x: Node) -> Node:
    size = x.value.size

    def backward(g):
        _acc(x, np.full(x.value.shape, float(g) / size))

    return x.tape.record("mean", np.array(x.value.mean()), (x,), backward)


def l2_norm(x: Node) -> Node:
    """Euclidean (Frobenius) norm; the subgradient at zero is taken as zero."""
    norm = np.sqrt((x.value * x.value).sum())

    def backward(g):
        if norm > 0.0:
            _acc(x, x.value * (float(g) / norm))

    return x.tape.record("l2_norm", np.array(norm), (x,), backward)


def chamfer(X, Y, groups: int = 1) -> Node:
    """Chamfer distance between two (n, 3) clouds; mean over clouds when ``groups > 1``.

    Nearest-neighbor assignments are recomputed on every forward pass and held
    fixed for the backward pass.
    """
    tape = _tape_of(X, Y)
    X, Y = _as_node(tape, X), _as_node(tape, Y)
    xv, yv = X.value, Y.value
    if xv.ndim != 2 or yv.ndim != 2 or xv.shape[1] != 3 or yv.shape[1] != 3:
        raise ShapeMismatchError(f"chamfer: X{X.shape} Y{Y.shape}")
    if xv.shape[0] % groups or yv.shape[0] % groups or xv.shape[0] == 0 or yv.shape[0] == 0:
        raise ShapeMismatchError(f"chamfer: cannot split X{X.shape} Y{Y.shape} into {groups} groups")
    nx, ny = xv.shape[0] // groups, yv.shape[0] // groups
    parts = []
    total = 0.0
    for gi in range(groups):
        xs, ys = xv[gi * nx:(gi + 1) * nx], yv[gi * ny:(gi + 1) * ny]
        ixy, dxy, iyx, dyx = chamfer_parts(xs, ys)
        parts.append((ixy, iyx))
        tape.decisions.append(ixy)
        tape.decisions.append(iyx)
        total = total + (dxy.mean() + dyx.mean())
    value = total if groups == 1 else total / groups

    def backward(g):
        w = float(g) / groups
        gx = np.zeros_like(xv) if X.requires_grad else None
        gy = np.zeros_like(yv) if Y.requires_grad else None
        for gi, (ixy, iyx) in enumerate(parts):
            xs, ys = xv[gi * nx:(gi + 1) * nx], yv[gi * ny:(gi + 1) * ny]
            # x -> nearest y term
            dx = (xs - ys[ixy]) * (2.0 * w / nx)
            # y -> nearest x term
            dy = (ys - xs[iyx]) * (2.0 * w / ny)
            if gx is not None:
                gxs = gx[gi * nx:(gi + 1) * nx]
                gxs += dx
                np.add.at(gxs, iyx, -dy)
            if gy is not None:
                gys = gy[gi * ny:(gi + 1) * ny]
                gys += dy
                np.add.at(gys, ixy, -dx)
        if gx is not None:
            _acc(X, gx)
        if gy is not None:
            _acc(Y, gy)

    return tape.record("chamfer", np.array(value), (X, Y), backward)


def max_nn_sqdist(X, Y) -> Node:
    """max over x in X of min over y in Y of ||x - y||^2 (first x wins ties)."""
    tape = _tape_of(X, Y)
    X, Y = _as_node(tape, X), _as_node(tape, Y)
    idx, sqd = nearest_sqdist(X.value, Y.value)
    i = int(sqd.argmax())
    j = int(idx[i])
    tape.decisions.append(np.array([i, j]))

    def backward(g):
        d = 2.0 * float(g) * (X.value[i] - Y.value[j])
        if X.requires_grad:
            gx = np.zeros_like(X.value)
            gx[i] = d
            _acc(X, gx)
        if Y.requires_grad:
            gy = np.zeros_like(Y.value)
            gy[j] = -d
            _acc(Y, gy)

    return tape.record("max_nn_sqdist", np.array(sqd[i]), (X, Y), backward)


def log_softmax_value(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy of (g, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value if logits.value.ndim == 2 else logits.value[None, :]
    if labels.shape != (lv.shape[0],):
        raise ShapeMismatchError(f"labels {labels.shape} vs logits {logits.shape}")
    logp = log_softmax_value(lv)
    rows = np.arange(lv.shape[0])
    value = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _acc(logits, (p * (float(g) / lv.shape[0])).reshape(logits.value.shape))

    return logits.tape.record("softmax_cross_entropy", np.array(value), (logits,), backward)


# ---------------------------------------------------------------------------


def backward(root: Node, wrt: Optional[Sequence[Node]] = None):
    """Populate adjoints from a scalar root. Returns the gradients of ``wrt`` (zeros if unreached)."""
    if root.value.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    for node in tape.nodes[: root.id + 1]:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root.id + 1]):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    if wrt is None:
        return None
    return [n.grad if n.grad is not None else np.zeros_like(n.value) for n in wrt]


def finite_diff_check(
    f: Callable[[np.ndarray], tuple],
    x: np.ndarray,
    h: float = 1e-4,
    skip: Union[None, np.ndarray, Callable[[np.ndarray, int], bool]] = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f(x)`` returns ``(value, gradient)`` or ``(value, gradient, region_key)``;
    the gradient may be a zero-argument callable, evaluated only at ``x``.
    Coordinates are skipped when ``skip`` says so (a boolean mask, or a callable
    ``skip(x, i)``), or when ``f`` reports a region key and stepping the
    coordinate by up to 10h changes it, i.e. a relu/max/nearest-neighbor tie
    lies within 10h. Returns 0.0 if every coordinate is skipped.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    base = f(x)
    grad = base[1]() if callable(base[1]) else base[1]
    grad = np.asarray(grad, dtype=np.float64).ravel()
    region = base[2] if len(base) > 2 else None
    worst = 0.0
    for i in range(x.size):
        if skip is not None:
            if callable(skip):
                if skip(x, i):
                    continue
            elif skip[i]:
                continue
        e = np.zeros_like(x)
        e[i] = h
        hi, lo = f(x + e), f(x - e)
        if region is not None:
            if hi[2] != region or lo[2] != region:
                continue
            if f(x + 10 * e)[2] != region or f(x - 10 * e)[2] != region:
                continue
        fd = (float(hi[0]) - float(lo[0])) / (2.0 * h)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return worst


def relu_kink_skip(h: float) -> Callable[[np.ndarray, int], bool]:
    """Skip rule for functions with relu applied directly to the input: |x_i| < 10h."""
    return lambda x, i: abs(x[i]) < 10.0 * h
