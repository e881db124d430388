"""monDEQ parameters, input regions, JSON I/O and random generation.

A monDEQ maps x to ``C z + c`` where z is the unique solution of
``z = ReLU(W z + U x + u)``; uniqueness follows from ``I - W >= m I``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionError, MonotonicityError, NetworkFormatError
from .norms import parse_norm

TOL_MONO = 1e-8


def _frozen(a, ndim):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NormalizationSpec:
    mu: float = 0.1307
    sigma: float = 0.3081

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def radius(self, eps: float) -> float:
        """Perturbation radius in normalized input space."""
        return eps / self.sigma

    def apply(self, pixels):
        return (np.asarray(pixels, dtype=float) - self.mu) / self.sigma


@dataclass(frozen=True, eq=False)
class MonDEQ:
    W: np.ndarray
    U: np.ndarray
    u: np.ndarray
    C: np.ndarray
    c: np.ndarray
    m: float
    normalization: Optional[NormalizationSpec] = None

    def __post_init__(self):
        for name, nd in (("W", 2), ("U", 2), ("u", 1), ("C", 2), ("c", 1)):
            object.__setattr__(self, name, _frozen(getattr(self, name), nd))
        object.__setattr__(self, "m", float(self.m))
        p = self.W.shape[0]
        if self.W.shape != (p, p):
            raise DimensionError(f"W must be square, got {self.W.shape}")
        if self.U.shape[0] != p or self.u.shape != (p,):
            raise DimensionError("U rows and u length must equal p")
        if self.C.shape[1] != p or self.c.shape != (self.C.shape[0],):
            raise DimensionError("C must be K x p and c of length K")
        if min(self.p0, self.p, self.K) < 1:
            raise DimensionError("p0, p and K must be >= 1")
        if not self.m > 0:
            raise ValueError("monotonicity margin m must be positive")

    @property
    def p0(self) -> int:
        return self.U.shape[1]

    @property
    def p(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.C.shape[0]

    def preact(self, z, x):
        return self.W @ z + self.U @ x + self.u

    def to_dict(self) -> dict:
        d = {
            "p0": self.p0, "p": self.p, "K": self.K, "m": self.m,
            "W": self.W.tolist(), "U": self.U.tolist(), "u": self.u.tolist(),
            "C": self.C.tolist(), "c": self.c.tolist(),
        }
        if self.normalization is not None:
            d["normalization"] = {"mu": self.normalization.mu,
                                  "sigma": self.normalization.sigma}
        return d

    def equals(self, other: "MonDEQ") -> bool:
        return (self.m == other.m and self.normalization == other.normalization
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in "WUuCc"))


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    x0: np.ndarray
    eps: float
    q: float = 2

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(self.x0, 1))
        object.__setattr__(self, "q", parse_norm(self.q))
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def dim(self) -> int:
        return self.x0.shape[0]


def validate_monotone(net: MonDEQ, tol_mono: float = TOL_MONO) -> dict:
    """Smallest eigenvalue of sym(I - W) and whether it clears ``m - tol_mono``."""
    S = np.eye(net.p) - net.W
    try:
        lam = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    return {"lambda_min": lam, "ok": lam >= net.m - tol_mono}


def network_from_dict(d: dict, tol_mono: float = TOL_MONO) -> MonDEQ:
    try:
        norm = d.get("normalization")
        net = MonDEQ(
            W=d["W"], U=d["U"], u=d["u"], C=d["C"], c=d["c"], m=d["m"],
            normalization=NormalizationSpec(**norm) if norm else None,
        )
    except KeyError as exc:
        raise NetworkFormatError(f"missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DimensionError):
            raise
        raise NetworkFormatError(str(exc)) from exc
    for key, val in (("p0", net.p0), ("p", net.p), ("K", net.K)):
        if key in d and int(d[key]) != val:
            raise DimensionError(f"declared {key}={d[key]} but arrays give {val}")
    check = validate_monotone(net, tol_mono)
    if not check["ok"]:
        raise MonotonicityError(check["lambda_min"], net.m, tol_mono)
    return net


def load_network(path, format: str = "json", tol_mono: float = TOL_MONO) -> MonDEQ:
    if format != "json":
        raise NetworkFormatError(f"unsupported network format {format!r}")
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise NetworkFormatError(f"{path}: top-level JSON value must be an object")
    return network_from_dict(d, tol_mono)


def save_network(net: MonDEQ, path) -> None:
    # repr-based float output round-trips every double exactly
    Path(path).write_text(json.dumps(net.to_dict()) + "\n")


def generate_network(p0: int, p: int, K: int, m: float = 1.0, seed: int = 0,
                     scale: float = 1.0) -> MonDEQ:
    """Random monDEQ with ``W = (1 - m) I - A^T A + B - B^T``.

    The symmetric part of ``I - W`` is ``m I + A^T A``, so the monotonicity
    margin holds for every draw.
    """
    if min(p0, p, K) < 1:
        raise ValueError("dimensions must be >= 1")
    if not (m > 0 and scale > 0):
        raise ValueError("m and scale must be positive")
    rng = np.random.default_rng(seed)
    s = scale / math.sqrt(p)
    A = rng.normal(0.0, s, (p, p))
    B = rng.normal(0.0, s, (p, p))
    W = (1.0 - m) * np.eye(p) - A.T @ A + B - B.T
    U = rng.normal(0.0, scale / math.sqrt(p0), (p, p0))
    u = rng.normal(0.0, 0.5 * scale, p)
    C = rng.normal(0.0, scale / math.sqrt(p), (K, p))
    c = rng.normal(0.0, 0.1 * scale, K)
    return MonDEQ(W=W, U=U, u=u, C=C, c=c, m=m)
