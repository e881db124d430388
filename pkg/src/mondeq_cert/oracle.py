"""Exact label gaps for tiny networks by enumerating ReLU activation patterns.

On a fixed active set A the equilibrium is linear in x:
``z_A = (I - W)_AA^{-1} (U_A x + u_A)``, ``z_{A^c} = 0``, valid where the
preactivation is >= 0 on A and <= 0 off A. Each cell is then a linear
program (q=inf) or a second-order cone program (q=2) over the input ball.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionError, UnsupportedNormError
from .netio import MonDEQ, PerturbationSpec
from .norms import INF
from .sdpcore import ConicBuilder, SolverSettings, solve

MAX_HIDDEN = 12


@dataclass
class PatternCell:
    pattern: np.ndarray  # bool, active set A
    Z: np.ndarray  # z = Z x + z0 on the cell
    z0: np.ndarray
    G: np.ndarray  # cell = {x : G x <= h} (sign consistency)
    h: np.ndarray


def pattern_cell(net: MonDEQ, active) -> PatternCell:
    active = np.asarray(active, dtype=bool)
    A = np.flatnonzero(active)
    Z = np.zeros((net.p, net.p0))
    z0 = np.zeros(net.p)
    if len(A):
        M = np.eye(len(A)) - net.W[np.ix_(A, A)]
        Z[A] = np.linalg.solve(M, net.U[A])
        z0[A] = np.linalg.solve(M, net.u[A])
    # preact = W z + U x + u, affine in x
    P = net.W @ Z + net.U
    p0 = net.W @ z0 + net.u
    sign = np.where(active, -1.0, 1.0)  # -pre <= 0 on A, pre <= 0 off A
    return PatternCell(active, Z, z0, sign[:, None] * P, -sign * p0)


def cells(net: MonDEQ):
    if net.p > MAX_HIDDEN:
        raise DimensionError(f"pattern enumeration is capped at p <= {MAX_HIDDEN}, got {net.p}")
    for k in range(2 ** net.p):
        bits = (k >> np.arange(net.p)) & 1
        yield pattern_cell(net, bits.astype(bool))


def _box_lp(g, G, h, x0, eps):
    """max g^T x over the cell and the L_inf ball; None when infeasible."""
    res = linprog(-g, A_ub=G, b_ub=h, bounds=list(zip(x0 - eps, x0 + eps)), method="highs")
    if res.status == 2:
        return None
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return -res.fun


def _ball_socp(g, G, h, x0, eps, settings):
    bld = ConicBuilder()
    n = len(x0)
    x = bld.add_variable("x", n)
    r, c = np.nonzero(G)
    # h - G x >= 0
    bld.add_nonneg((r, x[c], -G[r, c]), h)
    # (eps, x - x0) in the second-order cone
    bld.add_cone("soc", (np.arange(1, n + 1), x, np.ones(n)), np.concatenate(([eps], -x0)))
    bld.set_objective(x, g, sense="max")
    sol = solve(bld.build(), settings)
    if sol.status == "infeasible":
        return None
    if not sol.ok:
        raise RuntimeError(f"SOCP failed with status {sol.status}")
    return sol.value


def exact_gaps(net: MonDEQ, pert: PerturbationSpec, y0: int, labels=None,
               settings: SolverSettings | None = None) -> dict:
    """Exact ``max_{x in E} F_i(x) - F_y0(x)`` for every requested label."""
    if pert.q not in (2, INF):
        raise UnsupportedNormError(f"oracle supports q in {{2, inf}}, got {pert.q}")
    labels = [i for i in range(net.K) if i != y0] if labels is None else list(labels)
    x0, eps = pert.x0, pert.eps
    best = {i: -np.inf for i in labels}
    settings = settings or SolverSettings(tol=1e-9)
    for cell in cells(net):
        # the box contains the L2 ball, so an infeasible box LP prunes the cell for both norms
        probe = _box_lp(np.zeros(net.p0), cell.G, cell.h, x0, eps)
        if probe is None:
            continue
        for i in labels:
            xi = net.C[i] - net.C[y0]
            g = xi @ cell.Z
            const = xi @ cell.z0 + net.c[i] - net.c[y0]
            if pert.q == INF:
                v = _box_lp(g, cell.G, cell.h, x0, eps)
            else:
                v = _ball_socp(g, cell.G, cell.h, x0, eps, settings)
            if v is not None:
                best[i] = max(best[i], v + const)
    return best


def exact_gap(net: MonDEQ, pert: PerturbationSpec, y0: int, i: int, settings=None) -> float:
    return exact_gaps(net, pert, y0, [i], settings)[i]
