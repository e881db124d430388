"""Random points in L_q balls."""
from __future__ import annotations

import numpy as np

from .norms import INF, parse_norm


def sample_ball(rng, center, radius, q, n):
    """n points uniformly distributed in ``{x : ||x - center||_q <= radius}``, q in {1, 2, inf}."""
    q = parse_norm(q)
    center = np.asarray(center, dtype=float)
    d = center.shape[0]
    if q == INF:
        D = rng.uniform(-1.0, 1.0, (n, d))
    elif q == 2:
        G = rng.standard_normal((n, d))
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        D = G * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / d)
    elif q == 1:
        E = rng.exponential(1.0, (n, d + 1))
        D = (E[:, :d] / E.sum(axis=1, keepdims=True)) * rng.choice([-1.0, 1.0], (n, d))
    else:
        raise ValueError(f"sampling implemented for q in {{1, 2, inf}}, got {q}")
    return center + radius * D


def sample_boundary(rng, center, radius, q, n):
    """n points on the sphere ``||x - center||_q = radius`` (q in {2, inf})."""
    q = parse_norm(q)
    center = np.asarray(center, dtype=float)
    d = center.shape[0]
    if q == 2:
        G = rng.standard_normal((n, d))
        G /= np.linalg.norm(G, axis=1, keepdims=True)
    elif q == INF:
        G = rng.uniform(-1.0, 1.0, (n, d))
        k = rng.integers(0, d, n)
        G[np.arange(n), k] = rng.choice([-1.0, 1.0], n)
    else:
        raise ValueError(f"boundary sampling implemented for q in {{2, inf}}, got {q}")
    return center + radius * G


def sample_region(rng, center, radius, q, n, boundary_fraction=0.5):
    """Mix of interior and boundary points; extreme outputs tend to sit on the boundary."""
    nb = int(n * boundary_fraction) if parse_norm(q) in (2, INF) else 0
    parts = [sample_ball(rng, center, radius, q, n - nb)]
    if nb:
        parts.append(sample_boundary(rng, center, radius, q, nb))
    return np.vstack(parts)
