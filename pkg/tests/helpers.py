"""Shared builders for test functions: quadratics and small random MLP losses."""

import numpy as np

from cflat.autodiff import CompGraph, const, reshape, softmax_cross_entropy, take


def quadratic_graph(A):
    """Loss 0.5 x^T A x; gradient A x, Hessian A."""
    A = np.asarray(A, dtype=np.float64)
    dim = A.shape[0]

    def builder(leaf):
        x = reshape(leaf, (1, dim))
        return (0.5 * (x @ const(A) @ x.T)).sum()

    return CompGraph(builder, dim)


def random_spd_matrix(dim, rng, scale=1.0):
    """Symmetric positive definite with eigenvalues in roughly (0, 2*scale]."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eigs = rng.uniform(0.1, 2.0, size=dim) * scale
    return q @ np.diag(eigs) @ q.T


def mlp_graph(weights, X, targets, activation="tanh"):
    """Cross-entropy loss of a fully-connected net given explicit weight arrays.

    weights: list of (W, b) pairs; returns (graph, flat_init_vector).
    """
    shapes = []
    flat = []
    for W, b in weights:
        shapes.append((np.asarray(W).shape, np.asarray(b).shape))
        flat.extend([np.asarray(W).ravel(), np.asarray(b).ravel()])
    theta0 = np.concatenate(flat)
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    def builder(leaf):
        offset = 0
        h = const(X)
        for i, (w_shape, b_shape) in enumerate(shapes):
            w_size = int(np.prod(w_shape))
            b_size = int(np.prod(b_shape))
            W = reshape(take(leaf, offset, w_size), w_shape)
            offset += w_size
            b = reshape(take(leaf, offset, b_size), (1, b_size))
            offset += b_size
            h = h @ W + b
            if i < len(shapes) - 1:
                h = h.tanh() if activation == "tanh" else h.relu()
        return softmax_cross_entropy(h, targets)

    return CompGraph(builder, theta0.size), theta0


def random_mlp(seed, din=5, hidden=6, classes=3, batch=8, activation="tanh"):
    """Seeded random 2-layer MLP CE loss; returns (graph, theta)."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(size=(din, hidden)) * 0.6
    b1 = rng.normal(size=hidden) * 0.1
    W2 = rng.normal(size=(hidden, classes)) * 0.6
    b2 = rng.normal(size=classes) * 0.1
    X = rng.normal(size=(batch, din))
    y = rng.integers(0, classes, size=batch)
    T = np.zeros((batch, classes))
    T[np.arange(batch), y] = 1.0
    graph, theta = mlp_graph([(W1, b1), (W2, b2)], X, T, activation=activation)
    return graph, theta


def max_rel_err(got, want):
    """Max abs difference relative to the oracle vector's scale."""
    got = np.asarray(got, dtype=np.float64).ravel()
    want = np.asarray(want, dtype=np.float64).ravel()
    scale = np.max(np.abs(want)) + 1e-300
    return float(np.max(np.abs(got - want)) / scale)
