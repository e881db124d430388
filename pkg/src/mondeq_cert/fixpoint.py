"""Forward evaluation of a monDEQ: equilibrium solve, prediction, implicit Jacobian."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError
from .netio import MonDEQ
from .norms import spectral_norm

TOL_FP = 1e-10
MAX_ITER = 5000
_POLISH_BELOW = 1e-3


@dataclass
class EquilibriumResult:
    z: np.ndarray
    residual: float
    iterations: int
    converged: bool


def relu(v):
    return np.maximum(v, 0.0)


def residual(net: MonDEQ, z, x) -> float:
    return float(np.linalg.norm(z - relu(net.preact(z, x))))


def _splitting(net: MonDEQ):
    """Iteration map and step size.

    Plain Picard is a contraction when ||W||_2 < 1. Otherwise use the
    forward-backward step ``z <- ReLU(z - a((I - W) z - b))`` with
    ``a = m / ||I - W||_2^2``, which converges under the monotonicity margin.
    """
    if spectral_norm(net.W) < 1.0:
        return "picard", 1.0
    L = spectral_norm(np.eye(net.p) - net.W)
    return "forward_backward", net.m / (L * L)


def _polish(net: MonDEQ, z, b):
    # one semismooth Newton step: freeze the active set and solve the linear system
    s = (net.W @ z + b > 0).astype(float)
    A = np.eye(net.p) - s[:, None] * net.W
    try:
        return np.linalg.solve(A, s * b)
    except np.linalg.LinAlgError:
        return None


def solve_equilibrium(net: MonDEQ, x, tol_fp: float = TOL_FP, max_iter: int = MAX_ITER,
                      z0=None) -> EquilibriumResult:
    x = np.asarray(x, dtype=float)
    if x.shape != (net.p0,):
        raise DimensionError(f"input has shape {x.shape}, expected ({net.p0},)")
    b = net.U @ x + net.u
    IW = np.eye(net.p) - net.W
    kind, alpha = _splitting(net)
    z = np.zeros(net.p) if z0 is None else np.array(z0, dtype=float)
    best = (residual(net, z, x), z)
    for it in range(1, max_iter + 1):
        if kind == "picard":
            z = relu(net.W @ z + b)
        else:
            z = relu(z - alpha * (IW @ z - b))
        res = residual(net, z, x)
        if res < _POLISH_BELOW:
            zp = _polish(net, z, b)
            if zp is not None:
                rp = residual(net, zp, x)
                if rp < res:
                    z, res = zp, rp
        if res < best[0]:
            best = (res, z)
        if res <= tol_fp:
            return EquilibriumResult(z, res, it, True)
    return EquilibriumResult(best[1], best[0], max_iter, False)


def solve_batch(net: MonDEQ, X, tol_fp: float = TOL_FP, max_iter: int = MAX_ITER):
    """Equilibria for the rows of X. Returns (Z, residuals, converged)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != net.p0:
        raise DimensionError(f"inputs have {X.shape[1]} columns, expected {net.p0}")
    B = X @ net.U.T + net.u
    IW = np.eye(net.p) - net.W
    kind, alpha = _splitting(net)
    Z = np.zeros_like(B)
    res = np.full(len(X), np.inf)
    done = np.zeros(len(X), dtype=bool)
    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        Za, Ba = Z[act], B[act]
        if kind == "picard":
            Za = relu(Za @ net.W.T + Ba)
        else:
            Za = relu(Za - alpha * (Za @ IW.T - Ba))
        ra = np.linalg.norm(Za - relu(Za @ net.W.T + Ba), axis=1)
        near = ra < _POLISH_BELOW
        if near.any():
            S = (Za[near] @ net.W.T + Ba[near] > 0).astype(float)
            A = np.eye(net.p)[None] - S[:, :, None] * net.W[None]
            Zp = np.linalg.solve(A, (S * Ba[near])[:, :, None])[:, :, 0]
            rp = np.linalg.norm(Zp - relu(Zp @ net.W.T + Ba[near]), axis=1)
            better = rp < ra[near]
            idx = np.flatnonzero(near)[better]
            Za[idx] = Zp[better]
            ra[idx] = rp[better]
        Z[act] = Za
        res[act] = ra
        done[act] = ra <= tol_fp
    return Z, res, done


def forward(net: MonDEQ, x, **kw):
    r = solve_equilibrium(net, x, **kw)
    if not r.converged:
        raise ConvergenceError(f"equilibrium solve did not converge (residual {r.residual:.3g})")
    return net.C @ r.z + net.c


def forward_batch(net: MonDEQ, X, **kw):
    Z, res, ok = solve_batch(net, X, **kw)
    if not ok.all():
        raise ConvergenceError(f"{int((~ok).sum())} equilibrium solves did not converge")
    return Z @ net.C.T + net.c


def predict(net: MonDEQ, x, **kw) -> int:
    """Zero-based label of the largest score; np.argmax keeps the lowest index on ties."""
    return int(np.argmax(forward(net, x, **kw)))


def activation(net: MonDEQ, z, x):
    """Subgradient selection s: 1 where the preactivation is positive, else 0."""
    return (net.preact(z, x) > 0).astype(float)


def implicit_jacobian(net: MonDEQ, x, **kw):
    """d(Cz + c)/dx = C (I - diag(s) W)^{-1} diag(s) U."""
    r = solve_equilibrium(net, x, **kw)
    if not r.converged:
        raise ConvergenceError(f"equilibrium solve did not converge (residual {r.residual:.3g})")
    return jacobian_at(net, r.z, x)


def jacobian_at(net: MonDEQ, z, x):
    s = activation(net, z, x)
    A = np.eye(net.p) - s[:, None] * net.W
    J = np.linalg.solve(A, s[:, None] * net.U)
    return net.C @ J
