"""Brute-force reference implementations used as test oracles.

Deliberately naive: explicit loops or full pairwise matrices, no shared code
with the package beyond numpy.
"""

import numpy as np


def pairwise_sqdist(X, Y):
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=-1)


def chamfer(X, Y):
    d = pairwise_sqdist(X, Y)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def knn(ref, q, k, exclude=None):
    """(ids, dists) sorted by (distance, id) with a Python sort."""
    ref = np.asarray(ref, float)
    cand = []
    for i, p in enumerate(ref):
        if i == exclude:
            continue
        cand.append((float(np.sqrt(((p - q) ** 2).sum())), i))
    cand.sort()
    return [i for _, i in cand[:k]], [d for d, _ in cand[:k]]


def os_count(Q, S, gamma):
    count = 0
    for q in np.asarray(Q, float):
        if min(np.sqrt(((q - s) ** 2).sum()) for s in np.asarray(S, float)) > gamma:
            count += 1
    return count


def mean_knn_distance(Q, k):
    Q = np.asarray(Q, float)
    return np.array([np.mean(knn(Q, Q[i], k, exclude=i)[1]) for i in range(len(Q))])


def adam(params, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam over a list of gradients for a scalar parameter."""
    p, m, v = float(params), 0.0, 0.0
    out = []
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(p)
    return out
