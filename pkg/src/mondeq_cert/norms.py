"""Norm indices, vector norms and operator norms."""
from __future__ import annotations

import math

import numpy as np

from .errors import UnsupportedNormError

INF = math.inf


def parse_norm(q) -> float:
    """Normalize a norm index: ints >= 1, or ``inf`` given as a string or float."""
    if isinstance(q, str):
        s = q.strip().lower()
        if s in ("inf", "infty", "infinity", "linf"):
            return INF
        try:
            q = int(s.lstrip("l"))
        except ValueError:
            raise UnsupportedNormError(f"cannot parse norm index {q!r}") from None
    if q == INF:
        return INF
    if q != int(q) or q < 1:
        raise UnsupportedNormError(f"norm index must be a positive integer or inf, got {q}")
    return int(q)


def norm_label(q) -> str:
    return "inf" if q == INF else str(int(q))


def vector_norm(x, q) -> float:
    x = np.asarray(x, dtype=float)
    if q == INF:
        return float(np.max(np.abs(x))) if x.size else 0.0
    return float(np.linalg.norm(x, ord=int(q)))


def spectral_norm(A, tol=1e-10, max_iter=20000, seed=0) -> float:
    """Largest singular value by power iteration on A^T A.

    Falls back to a dense SVD when the iteration does not settle, which only
    happens for nearly tied leading singular values.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0 or not np.any(A):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = math.sqrt(nw)
        if abs(new - sigma) <= tol * new:
            return float(np.linalg.norm(A @ v))
        sigma = new
    return float(np.linalg.norm(A, 2))


def operator_norm(A, q) -> float:
    """Operator norm induced by the same L_q norm on both sides (q in {1, 2, inf})."""
    A = np.asarray(A, dtype=float)
    if q == 2:
        return spectral_norm(A)
    if q == INF:
        return float(np.max(np.sum(np.abs(A), axis=1))) if A.size else 0.0
    if q == 1:
        return float(np.max(np.sum(np.abs(A), axis=0))) if A.size else 0.0
    raise UnsupportedNormError(f"operator norm only for q in {{1, 2, inf}}, got {q}")


def norm_ratio(n: int, q_from, q_to) -> float:
    """sup ||d||_{q_to} over ||d||_{q_from} <= 1 in R^n."""
    a = 0.0 if q_from == INF else 1.0 / q_from
    b = 0.0 if q_to == INF else 1.0 / q_to
    return float(n) ** max(0.0, b - a)
