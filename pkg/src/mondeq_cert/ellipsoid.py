"""Minimum-volume outer ellipsoid of the image of an input ball.

The ellipsoid is ``{xi : ||Q xi + b||_2 <= 1}``. Containment of F(E) is
certified by an order-1 Putinar certificate whose Gram matrix in the basis
``[x, z, 1]`` is ``M = M1 + ... + M6``; the certificate holds iff ``-M >= 0``.
The part of ``M1`` quadratic in Q is ``N^T N`` with ``N = [0, QC, Qc + b]``,
so ``-M >= 0`` is the linear matrix inequality ``[[-M_lin, N^T], [N, I]] >= 0``.

Multiplier names are anchored to their constraints: ``sigma_aff`` multiplies
``z - (Wz + Ux + u) >= 0`` and ``sigma_zpos`` multiplies ``z >= 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fixpoint
from .errors import DegenerateEllipsoidError, DimensionError, SolverError, UnsupportedNormError
from .netio import MonDEQ, PerturbationSpec
from .norms import INF
from .robustness import TOL_MARGIN
from .sdpcore import ConicBuilder, SolverSettings, svec_index, svec_len, SQRT2, solve

DET_FLOOR = 1e-12
TRACE_REG = 1e-6


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    Q: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if Q.shape != (b.shape[0], b.shape[0]):
            raise DimensionError("Q must be K x K and b of length K")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "b", b)

    @property
    def K(self):
        return self.b.shape[0]

    @property
    def center(self):
        return -np.linalg.solve(self.Q, self.b)

    def log_det(self) -> float:
        sign, ld = np.linalg.slogdet(self.Q)
        return ld if sign > 0 else -math.inf

    def level(self, xi):
        """``||Q xi + b||_2`` for a point or the rows of an array."""
        xi = np.asarray(xi, dtype=float)
        return np.linalg.norm(xi @ self.Q.T + self.b, axis=-1)

    def to_dict(self):
        return {"Q": self.Q.tolist(), "b": self.b.tolist()}


@dataclass
class MultiplierSet:
    sigma1: np.ndarray  # scalar (q=2, length 1) or length p0 (q=inf)
    sigma_aff: np.ndarray
    sigma_zpos: np.ndarray
    tau: np.ndarray
    lam: np.ndarray  # p x p, upper triangle used (i < j)

    @classmethod
    def zeros(cls, p0, p, q):
        return cls(np.zeros(1 if q == 2 else p0), np.zeros(p), np.zeros(p), np.zeros(p),
                   np.zeros((p, p)))

    def slope_matrix(self):
        """``T = sum_{i<j} lam_ij (e_i - e_j)(e_i - e_j)^T``."""
        L = np.triu(self.lam, 1)
        L = L + L.T
        return np.diag(L.sum(axis=1)) - L


def _check_norm(q):
    if q not in (2, INF):
        raise UnsupportedNormError(f"ellipsoid model supports q in {{2, inf}}, got {q}")


def gram_blocks(net: MonDEQ, pert: PerturbationSpec, Q, b, mult: MultiplierSet, slope=True):
    """The six Gram matrices in basis ``[x, z, 1]`` (M3 symmetrized)."""
    _check_norm(pert.q)
    p0, p = net.p0, net.p
    n = p0 + p + 1
    X, Z, o = slice(0, p0), slice(p0, p0 + p), p0 + p
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    W, U, u, C, c = net.W, net.U, net.u, net.C, net.c
    x0, eps = pert.x0, pert.eps
    if Q.shape != (net.K, net.K) or b.shape != (net.K,):
        raise DimensionError("Q and b must match the output dimension")

    M1 = np.zeros((n, n))
    Q2 = Q @ Q
    M1[Z, Z] = C.T @ Q2 @ C
    M1[Z, o] = C.T @ Q2 @ c + C.T @ Q @ b
    M1[o, Z] = M1[Z, o]
    M1[o, o] = c @ Q2 @ c + 2 * b @ Q @ c + b @ b - 1.0

    M2 = np.zeros((n, n))
    s1 = np.asarray(mult.sigma1, dtype=float)
    if pert.q == INF:
        if s1.shape != (p0,):
            raise DimensionError("sigma1 must have length p0 for q=inf")
        M2[X, X] = -np.diag(s1)
        M2[X, o] = s1 * x0
        M2[o, X] = M2[X, o]
        M2[o, o] = s1 @ (eps ** 2 - x0 ** 2)
    else:
        s = float(np.ravel(s1)[0])
        M2[X, X] = -s * np.eye(p0)
        M2[X, o] = s * x0
        M2[o, X] = M2[X, o]
        M2[o, o] = s * (eps ** 2 - x0 @ x0)

    tau = np.asarray(mult.tau, dtype=float)
    M3 = np.zeros((n, n))
    M3[X, Z] = -0.5 * U.T * tau[None, :]
    M3[Z, X] = M3[X, Z].T
    DT = tau[:, None] * (np.eye(p) - W)
    M3[Z, Z] = 0.5 * (DT + DT.T)
    M3[Z, o] = -0.5 * tau * u
    M3[o, Z] = M3[Z, o]

    sa = np.asarray(mult.sigma_aff, dtype=float)
    M4 = np.zeros((n, n))
    M4[X, o] = -0.5 * U.T @ sa
    M4[Z, o] = 0.5 * (np.eye(p) - W.T) @ sa
    M4[o, X] = M4[X, o]
    M4[o, Z] = M4[Z, o]
    M4[o, o] = -sa @ u

    sz = np.asarray(mult.sigma_zpos, dtype=float)
    M5 = np.zeros((n, n))
    M5[Z, o] = 0.5 * sz
    M5[o, Z] = M5[Z, o]

    M6 = np.zeros((n, n))
    if slope:
        T = mult.slope_matrix()
        R = np.zeros((2 * p + 1, n))
        R[:p, X] = U
        R[:p, Z] = W
        R[:p, o] = u
        R[p:2 * p, Z] = np.eye(p)
        R[2 * p, o] = 1.0
        mid = np.zeros((2 * p + 1, 2 * p + 1))
        mid[:p, p:2 * p] = T
        mid[p:2 * p, :p] = T
        mid[p:2 * p, p:2 * p] = -2 * T
        M6 = R.T @ mid @ R
    return M1, M2, M3, M4, M5, M6


def assemble_gram(net, pert, Q, b, mult: MultiplierSet, slope=True):
    """Gram matrix M of f1 + ... + f6; containment is certified when -M is PSD."""
    M = sum(gram_blocks(net, pert, Q, b, mult, slope))
    return 0.5 * (M + M.T)


def schur_factor(net: MonDEQ, Q, b):
    """``N = [0, QC, Qc + b]`` with ``N^T N`` the Q-quadratic part of M1."""
    Q = np.asarray(Q, dtype=float)
    N = np.zeros((net.K, net.p0 + net.p + 1))
    N[:, net.p0:net.p0 + net.p] = Q @ net.C
    N[:, -1] = Q @ net.c + b
    return N


def schur_lmi(net, pert, b, mult: MultiplierSet, Q, slope=True):
    """``[[-M_lin, N^T], [N, I_K]]``, PSD exactly when -M is PSD."""
    M = assemble_gram(net, pert, Q, b, mult, slope)
    N = schur_factor(net, Q, b)
    M_lin = M - N.T @ N
    K = net.K
    return np.block([[-M_lin, N.T], [N, np.eye(K)]])


# ---------------------------------------------------------------------------
# conic model


class _SymAffine:
    """Symmetric matrix affine in the conic variables, accumulated entrywise."""

    def __init__(self, side):
        self.side = side
        self.rows, self.cols, self.vals = [], [], []
        self.const = np.zeros(side * (side + 1) // 2)

    def add(self, i, j, var, coef):
        """Add ``coef * x[var]`` to entries (i, j) and (j, i)."""
        i, j, var, coef = np.broadcast_arrays(np.asarray(i), np.asarray(j), np.asarray(var),
                                              np.asarray(coef, dtype=float))
        i, j, var, coef = i.ravel(), j.ravel(), var.ravel(), coef.ravel()
        keep = coef != 0
        i, j, var, coef = i[keep], j[keep], var[keep], coef[keep]
        pos = svec_index(i, j)
        self.rows.append(pos)
        self.cols.append(var)
        self.vals.append(np.where(i == j, coef, SQRT2 * coef))

    def add_const(self, i, j, val):
        i, j, val = np.broadcast_arrays(np.asarray(i), np.asarray(j), np.asarray(val, dtype=float))
        i, j, val = i.ravel(), j.ravel(), val.ravel()
        np.add.at(self.const, svec_index(i, j), np.where(i == j, val, SQRT2 * val))

    def triplets(self):
        if not self.rows:
            z = np.zeros(0, dtype=int)
            return z, z, np.zeros(0)
        return np.concatenate(self.rows), np.concatenate(self.cols), np.concatenate(self.vals)


@dataclass
class EllipsoidResult:
    ellipsoid: Optional[Ellipsoid]
    multipliers: Optional[MultiplierSet]
    status: str
    solve_time: float
    log_det: float = -math.inf
    regularized: bool = False
    gram_side: int = 0
    num_core_vars: int = 0
    lmi_min_eig: float = math.nan


def build_ellipsoid_problem(net: MonDEQ, pert: PerturbationSpec, slope=True, trace_floor=None):
    """Conic model of the log-det maximization; returns (problem, index map)."""
    _check_norm(pert.q)
    p0, p, K = net.p0, net.p, net.K
    W, U, u, C, c = net.W, net.U, net.u, net.C, net.c
    x0, eps = pert.x0, pert.eps
    ng = p0 + p + 1
    X = np.arange(p0)
    Zi = p0 + np.arange(p)
    o = p0 + p

    bld = ConicBuilder()
    iu = np.triu_indices(K)
    qv = bld.add_variable("Q", len(iu[0]))
    qidx = np.zeros((K, K), dtype=int)
    qidx[iu] = qv
    qidx[(iu[1], iu[0])] = qv
    bv = bld.add_variable("b", K)
    s1v = bld.add_variable("sigma1", 1 if pert.q == 2 else p0)
    sav = bld.add_variable("sigma_aff", p)
    szv = bld.add_variable("sigma_zpos", p)
    tv = bld.add_variable("tau", p)
    pairs = np.triu_indices(p, 1) if slope else (np.zeros(0, int), np.zeros(0, int))
    lv = bld.add_variable("lam", len(pairs[0])) if len(pairs[0]) else np.zeros(0, dtype=int)
    il = np.tril_indices(K)
    Lv = bld.add_variable("L", len(il[0]))
    logv = bld.add_variable("logdiag", K)

    nonneg = np.concatenate([s1v, sav, szv, lv])
    bld.add_nonneg((np.arange(len(nonneg)), nonneg, np.ones(len(nonneg))), np.zeros(len(nonneg)))
    if trace_floor is not None:
        diag = qidx[np.arange(K), np.arange(K)]
        bld.add_nonneg((np.zeros(K, dtype=int), diag, np.ones(K)), [-trace_floor])

    # LMI [[-M_lin, N^T], [N, I_K]] with M_lin = M2 + ... + M6 - e_o e_o^T
    G = _SymAffine(ng + K)
    G.add_const(o, o, 1.0)
    # M2
    if pert.q == INF:
        G.add(X, X, s1v, 1.0)
        G.add(X, o, s1v, -x0)
        G.add(o, o, s1v, -(eps ** 2 - x0 ** 2))
    else:
        G.add(X, X, s1v[0], 1.0)
        G.add(X, o, s1v[0], -x0)
        G.add(o, o, s1v[0], -(eps ** 2 - x0 @ x0))
    # M3: tau_k z_k (z_k - W_k z - U_k x - u_k)
    for k in range(p):
        G.add(Zi[k], Zi[k], tv[k], -(1.0 - W[k, k]))
        others = np.delete(np.arange(p), k)
        G.add(Zi[k], Zi[others], tv[k], 0.5 * W[k, others])
        G.add(Zi[k], X, tv[k], 0.5 * U[k])
        G.add(Zi[k], o, tv[k], 0.5 * u[k])
    # M4: sigma_aff_k (z_k - W_k z - U_k x - u_k)
    for k in range(p):
        G.add(Zi, o, sav[k], -0.5 * (np.eye(p)[k] - W[k]))
        G.add(X, o, sav[k], 0.5 * U[k])
        G.add(o, o, sav[k], u[k])
    # M5: sigma_zpos_k z_k
    G.add(Zi, o, szv, -0.5)
    # M6: lam_ij * 2 [(z_i - z_j)(pre_i - pre_j) - (z_i - z_j)^2]
    for n_, (i, j) in enumerate(zip(*pairs)):
        a = np.zeros(ng)
        a[Zi[i]], a[Zi[j]] = 1.0, -1.0
        bb = np.zeros(ng)
        bb[X] = U[i] - U[j]
        bb[Zi] = W[i] - W[j]
        bb[o] = u[i] - u[j]
        S = np.outer(a, bb) + np.outer(bb, a) - 2 * np.outer(a, a)
        r, cidx = np.nonzero(np.triu(S))
        G.add(r, cidx, lv[n_], -S[r, cidx])
    # N block rows: N[a, z_j] = sum_b Q_ab C_bj, N[a, o] = sum_b Q_ab c_b + b_a
    for a_ in range(K):
        for b_ in range(K):
            G.add(ng + a_, Zi, qidx[a_, b_], C[b_])
            G.add(ng + a_, o, qidx[a_, b_], c[b_])
        G.add(ng + a_, o, bv[a_], 1.0)
    G.add_const(ng + np.arange(K), ng + np.arange(K), 1.0)
    bld.add_cone("psd", G.triplets(), G.const, dim=ng + K)

    # log-det epigraph: [[Q, L], [L^T, diag(L)]] >= 0, L lower triangular
    H = _SymAffine(2 * K)
    H.add(iu[0], iu[1], qidx[iu], 1.0)
    Lidx = np.zeros((K, K), dtype=int)
    Lidx[il] = Lv
    H.add(il[0], K + il[1], Lv, 1.0)
    H.add(K + np.arange(K), K + np.arange(K), Lidx[np.arange(K), np.arange(K)], 1.0)
    bld.add_cone("psd", H.triplets(), H.const, dim=2 * K)

    # (log_i, 1, L_ii) in the exponential cone: log_i <= log L_ii
    rows, cols, vals, const = [], [], [], np.zeros(3 * K)
    for k in range(K):
        rows += [3 * k, 3 * k + 2]
        cols += [logv[k], Lidx[k, k]]
        vals += [1.0, 1.0]
        const[3 * k + 1] = 1.0
    bld.add_cone("exp", (np.array(rows), np.array(cols), np.array(vals)), const)
    bld.set_objective(logv, np.ones(K), sense="max")
    prob = bld.build(meta={"model": "ellipsoid"})
    index = dict(Q=qidx, b=bv, sigma1=s1v, sigma_aff=sav, sigma_zpos=szv, tau=tv, lam=lv,
                 pairs=pairs, gram_side=ng)
    return prob, index


def core_var_count(net: MonDEQ, q) -> int:
    """Decision variables sigma1, sigma_aff, sigma_zpos, tau, b and Q (counted K x K)."""
    return (1 if q == 2 else net.p0) + 3 * net.p + net.K + net.K ** 2


def _decode(x, index, p):
    Q = x[index["Q"]]
    lam = np.zeros((p, p))
    if len(index["lam"]):
        lam[index["pairs"]] = x[index["lam"]]
    mult = MultiplierSet(
        sigma1=x[index["sigma1"]], sigma_aff=x[index["sigma_aff"]],
        sigma_zpos=x[index["sigma_zpos"]], tau=x[index["tau"]], lam=lam)
    return Q, x[index["b"]], mult


def min_volume_ellipsoid(net: MonDEQ, pert: PerturbationSpec, slope=True,
                         settings: SolverSettings | None = None) -> EllipsoidResult:
    total_time = 0.0
    regularized = False
    for floor in (None, TRACE_REG):
        prob, index = build_ellipsoid_problem(net, pert, slope, trace_floor=floor)
        sol = solve(prob, settings)
        total_time += sol.solve_time
        if not sol.ok:
            raise SolverError(f"ellipsoid SDP failed with status {sol.status} ({sol.message})")
        Q, b, mult = _decode(sol.x, index, net.p)
        # nonnegative multipliers may come back as -1e-12 from the interior-point solve
        for name in ("sigma1", "sigma_aff", "sigma_zpos"):
            setattr(mult, name, np.maximum(getattr(mult, name), 0.0))
        mult.lam = np.maximum(mult.lam, 0.0)
        ell = Ellipsoid(Q, b)
        if np.linalg.det(ell.Q) >= DET_FLOOR and np.linalg.eigvalsh(ell.Q)[0] > 0:
            lmi = schur_lmi(net, pert, ell.b, mult, ell.Q, slope)
            return EllipsoidResult(ell, mult, sol.status, total_time, ell.log_det(), regularized,
                                   net.p0 + net.p + 1, core_var_count(net, pert.q),
                                   float(np.linalg.eigvalsh(lmi)[0]))
        regularized = True
    raise DegenerateEllipsoidError("ellipsoid shape matrix is singular even with trace regularization")


def ellipsoid_label_gap(ell: Ellipsoid, y0: int, i: int) -> float:
    """``max {xi_i - xi_y0 : ||Q xi + b|| <= 1} = -a^T Q^{-1} b + ||Q^{-T} a||``."""
    a = np.zeros(ell.K)
    a[i] += 1.0
    a[y0] -= 1.0
    try:
        w = np.linalg.solve(ell.Q.T, a)
    except np.linalg.LinAlgError as exc:
        raise DegenerateEllipsoidError("singular ellipsoid shape matrix") from exc
    return float(-w @ ell.b + np.linalg.norm(w))


@dataclass
class EllipsoidReport:
    y0: int
    gaps: dict = field(default_factory=dict)
    certified: bool = False
    result: Optional[EllipsoidResult] = None

    def to_dict(self):
        r = self.result
        return {
            "y0": self.y0,
            "certified": self.certified,
            "gaps": {str(k): v for k, v in self.gaps.items()},
            "ellipsoid": r.ellipsoid.to_dict() if r and r.ellipsoid else None,
            "log_det": r.log_det if r else None,
            "status": r.status if r else None,
            "solve_time_s": r.solve_time if r else None,
            "regularized": r.regularized if r else None,
        }


def certify_via_ellipsoid(net: MonDEQ, pert: PerturbationSpec, slope=True, settings=None,
                          tol_margin: float = TOL_MARGIN, y0: int | None = None) -> EllipsoidReport:
    if y0 is None:
        y0 = fixpoint.predict(net, pert.x0)
    if net.K == 1:
        return EllipsoidReport(y0, {}, True, None)
    res = min_volume_ellipsoid(net, pert, slope, settings)
    gaps = {i: ellipsoid_label_gap(res.ellipsoid, y0, i) for i in range(net.K) if i != y0}
    ok = all(g < -tol_margin for g in gaps.values())
    return EllipsoidReport(y0, gaps, ok, res)


# ---------------------------------------------------------------------------
# figures


@dataclass
class ProjectionFigure:
    axes: tuple  # (y0, i)
    center: np.ndarray
    shape: np.ndarray  # 2x2: projected set is {eta : (eta - center)^T shape (eta - center) <= 1}
    boundary: np.ndarray  # (n, 2)
    samples: np.ndarray  # (m, 2)

    def semi_axes(self):
        return np.sort(1.0 / np.sqrt(np.linalg.eigvalsh(self.shape)))[::-1]

    def contains(self, pts, tol=1e-9):
        d = np.atleast_2d(pts) - self.center
        return np.einsum("ni,ij,nj->n", d, self.shape, d) <= 1 + tol

    def to_svg(self, path, title=None):
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        plt.rcParams["svg.hashsalt"] = "mondeq-cert"
        fig, ax = plt.subplots(figsize=(5, 5))
        if len(self.samples):
            ax.scatter(self.samples[:, 0], self.samples[:, 1], s=4, c="red", label="F(E) samples")
        ax.plot(self.boundary[:, 0], self.boundary[:, 1], "b-", label="ellipsoid projection")
        pts = np.vstack([self.boundary, self.samples]) if len(self.samples) else self.boundary
        lo, hi = pts.min(), pts.max()
        ax.plot([lo, hi], [lo, hi], "b--", label="threshold")
        ax.set_xlabel(f"score of label {self.axes[0]}")
        ax.set_ylabel(f"score of label {self.axes[1]}")
        if title:
            ax.set_title(title)
        ax.legend(loc="best", fontsize=8)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def projection_figure(ell: Ellipsoid, samples, y0: int, i: int, n_points=256) -> ProjectionFigure:
    """Projection of the ellipsoid onto the (y0, i) output coordinates."""
    if ell.K < 2:
        raise DimensionError("projection needs at least two outputs")
    P = ell.Q.T @ ell.Q
    keep = [y0, i]
    rest = [k for k in range(ell.K) if k not in keep]
    A = P[np.ix_(keep, keep)]
    if rest:
        B = P[np.ix_(keep, rest)]
        D = P[np.ix_(rest, rest)]
        A = A - B @ np.linalg.solve(D, B.T)
    evals, evecs = np.linalg.eigh(A)
    if evals[0] <= 0:
        raise DegenerateEllipsoidError("projected ellipse is degenerate")
    center = ell.center[keep]
    th = np.linspace(0, 2 * np.pi, n_points)
    circle = np.stack([np.cos(th), np.sin(th)], axis=1)
    boundary = center + circle @ (evecs / np.sqrt(evals)).T
    S = np.asarray(samples, dtype=float).reshape(-1, ell.K)[:, keep] if len(samples) else np.zeros((0, 2))
    return ProjectionFigure((y0, i), center, A, boundary, S)
