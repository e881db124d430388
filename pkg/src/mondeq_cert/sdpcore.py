"""Shor relaxation of quadratic programs and the conic solver boundary.

Conic problems use the form::

    minimize / maximize  c^T x + offset
    subject to           b - A x in K

with ``K`` a product of cones stored in the canonical order zero,
nonnegative, second-order, PSD (upper-triangle svec, column-major,
off-diagonals scaled by sqrt(2)), exponential. This is exactly the form the
Clarabel interior-point solver consumes.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError

CONE_ORDER = ("zero", "nonneg", "soc", "psd", "exp")
SQRT2 = math.sqrt(2.0)
TOL_SOLVER = 1e-8


def svec_len(side: int) -> int:
    return side * (side + 1) // 2


def svec_index(i, j):
    """Position of entry (i, j) in the svec layout (symmetric, any order)."""
    i, j = np.minimum(i, j), np.maximum(i, j)
    return j * (j + 1) // 2 + i


def svec_coeffs(G):
    """Coefficients a with ``<G, M> = a . svec(M)`` for symmetric sparse G."""
    G = sp.triu(sp.coo_matrix(G)).tocoo()
    idx = svec_index(G.row, G.col)
    val = np.where(G.row == G.col, G.data, SQRT2 * G.data)
    return idx, val


def smat(x, side: int):
    """Inverse of svec for a dense vector."""
    M = np.zeros((side, side))
    iu = np.triu_indices(side)
    # triu_indices is row-major; compute positions explicitly
    pos = svec_index(iu[0], iu[1])
    vals = np.asarray(x)[pos]
    vals = np.where(iu[0] == iu[1], vals, vals / SQRT2)
    M[iu] = vals
    M[(iu[1], iu[0])] = vals
    return M


@dataclass
class ConicProblem:
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: list  # [(kind, dim), ...] in CONE_ORDER
    sense: str = "min"
    offset: float = 0.0
    variables: dict = field(default_factory=dict)  # name -> (start, size)
    psd_variables: dict = field(default_factory=dict)  # name -> (start, side)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.A.shape
        if self.c.shape != (n,) or self.b.shape != (m,):
            raise DimensionError("objective / rhs sizes do not match A")
        if sum(_cone_rows(k, d) for k, d in self.cones) != m:
            raise DimensionError("cone sizes do not sum to the constraint count")
        kinds = [k for k, _ in self.cones]
        if kinds != sorted(kinds, key=CONE_ORDER.index):
            raise ValueError("cones must follow the canonical order")

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def max_psd_side(self) -> int:
        return max((d for k, d in self.cones if k == "psd"), default=0)

    def value_of(self, name, x):
        start, size = self.variables[name]
        return np.asarray(x[start:start + size])

    def matrix_of(self, name, x):
        start, side = self.psd_variables[name]
        return smat(x[start:start + svec_len(side)], side)


def _cone_rows(kind, dim):
    return svec_len(dim) if kind == "psd" else dim


class ConicBuilder:
    """Accumulates variables and affine cone memberships ``expr(x) in K``.

    An affine expression is given as COO triplets ``(row, col, val)`` over the
    current variables plus a constant vector, one row per cone coordinate.
    """

    def __init__(self):
        self.n = 0
        self.variables: dict[str, tuple[int, int]] = {}
        self.psd_variables: dict[str, tuple[int, int]] = {}
        self._groups = {k: [] for k in CONE_ORDER}
        self.c = {}
        self.offset = 0.0
        self.sense = "min"

    def add_variable(self, name: str, size: int) -> np.ndarray:
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        self.variables[name] = (self.n, size)
        self.n += size
        return np.arange(self.n - size, self.n)

    def add_psd_variable(self, name: str, side: int) -> np.ndarray:
        idx = self.add_variable(name, svec_len(side))
        self.psd_variables[name] = (int(idx[0]), side)
        k = len(idx)
        self.add_cone("psd", (np.arange(k), idx, np.ones(k)), np.zeros(k), dim=side)
        return idx

    def add_cone(self, kind, triplets, const, dim=None):
        rows, cols, vals = (np.asarray(t) for t in triplets)
        const = np.asarray(const, dtype=float)
        k = const.shape[0]
        if kind == "psd":
            if dim is None or svec_len(dim) != k:
                raise DimensionError("psd block needs its side and svec-length rows")
        else:
            dim = k
        self._groups[kind].append((rows.astype(int), cols.astype(int),
                                   vals.astype(float), const, dim))

    def add_zero(self, triplets, const):
        self.add_cone("zero", triplets, const)

    def add_nonneg(self, triplets, const):
        self.add_cone("nonneg", triplets, const)

    def set_objective(self, cols, vals, sense="min", offset=0.0):
        if sense not in ("min", "max"):
            raise ValueError(sense)
        self.c = {}
        for j, v in zip(np.asarray(cols).ravel(), np.asarray(vals).ravel()):
            self.c[int(j)] = self.c.get(int(j), 0.0) + float(v)
        self.sense = sense
        self.offset = float(offset)

    def build(self, meta=None) -> ConicProblem:
        R, Cc, V, h, cones = [], [], [], [], []
        row0 = 0
        for kind in CONE_ORDER:
            groups = self._groups[kind]
            if kind in ("zero", "nonneg") and groups:
                # merge into a single block of this kind
                size = 0
                for rows, cols, vals, const, _ in groups:
                    R.append(rows + row0 + size); Cc.append(cols); V.append(vals); h.append(const)
                    size += const.shape[0]
                cones.append((kind, size))
                row0 += size
                continue
            for rows, cols, vals, const, dim in groups:
                R.append(rows + row0); Cc.append(cols); V.append(vals); h.append(const)
                cones.append((kind, dim))
                row0 += const.shape[0]
        m = row0
        if R:
            rows = np.concatenate(R); cols = np.concatenate(Cc); vals = np.concatenate(V)
            b = np.concatenate(h)
        else:
            rows = cols = np.zeros(0, dtype=int); vals = np.zeros(0); b = np.zeros(0)
        # expr = const + E x must be in K; solver form is b - A x in K, so A = -E
        A = sp.csc_matrix((-vals, (rows, cols)), shape=(m, self.n))
        A.sum_duplicates()
        c = np.zeros(self.n)
        for j, v in self.c.items():
            c[j] = v
        return ConicProblem(c=c, A=A, b=b, cones=cones, sense=self.sense, offset=self.offset,
                            variables=dict(self.variables), psd_variables=dict(self.psd_variables),
                            meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# solving

@dataclass
class SolverSettings:
    max_iter: int = 500
    tol: float = TOL_SOLVER
    verbose: bool = False
    time_limit: float = math.inf

    @classmethod
    def from_env(cls, **kw):
        env = os.environ.get("MONDEQ_SOLVER_TOL")
        if env and "tol" not in kw:
            kw["tol"] = float(env)
        return cls(**kw)


OK_STATUSES = ("optimal", "near_optimal")


@dataclass
class ConicSolution:
    status: str
    value: Optional[float]
    dual_value: Optional[float]
    x: Optional[np.ndarray]
    y: Optional[np.ndarray]
    solve_time: float
    iterations: int = 0
    message: str = ""
    residuals: tuple = (math.nan, math.nan)

    @property
    def ok(self) -> bool:
        return self.status in OK_STATUSES

    @property
    def upper_bound(self) -> Optional[float]:
        """Larger of primal and dual objective: a conservative bound for a maximization."""
        if not self.ok:
            return None
        if self.dual_value is None or not math.isfinite(self.dual_value):
            return self.value
        return max(self.value, self.dual_value)

    @property
    def lower_bound(self) -> Optional[float]:
        if not self.ok:
            return None
        if self.dual_value is None or not math.isfinite(self.dual_value):
            return self.value
        return min(self.value, self.dual_value)


_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "near_optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _clarabel_cones(cones):
    import clarabel
    make = {
        "zero": clarabel.ZeroConeT,
        "nonneg": clarabel.NonnegativeConeT,
        "soc": clarabel.SecondOrderConeT,
        "psd": clarabel.PSDTriangleConeT,
    }
    out = []
    for kind, dim in cones:
        if kind == "exp":
            out.extend(clarabel.ExponentialConeT() for _ in range(dim // 3))
        else:
            out.append(make[kind](dim))
    return out


def solve(problem: ConicProblem, settings: SolverSettings | None = None) -> ConicSolution:
    import clarabel

    settings = settings or SolverSettings()
    s = clarabel.DefaultSettings()
    s.verbose = settings.verbose
    s.max_iter = settings.max_iter
    s.tol_feas = s.tol_gap_abs = s.tol_gap_rel = settings.tol
    s.tol_infeas_abs = s.tol_infeas_rel = settings.tol
    s.max_threads = 1
    s.presolve_enable = False  # keep dual vector aligned with problem rows
    if math.isfinite(settings.time_limit):
        s.time_limit = settings.time_limit
    sign = -1.0 if problem.sense == "max" else 1.0
    n = problem.num_vars
    P = sp.csc_matrix((n, n))
    t0 = time.perf_counter()
    try:
        solver = clarabel.DefaultSolver(P, sign * problem.c, problem.A.tocsc(), problem.b,
                                        _clarabel_cones(problem.cones), s)
        res = solver.solve()
    except BaseException as exc:  # panics surface as BaseException subclasses
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        return ConicSolution("solver_error", None, None, None, None,
                             time.perf_counter() - t0, message=f"backend failure: {exc}")
    elapsed = time.perf_counter() - t0
    raw = str(res.status)
    status = _STATUS_MAP.get(raw, "solver_error")
    x = np.asarray(res.x)
    if status in OK_STATUSES:
        value = sign * float(res.obj_val) + problem.offset
        dual = sign * float(res.obj_val_dual) + problem.offset
        resid = (float(getattr(res, "r_prim", math.nan)), float(getattr(res, "r_dual", math.nan)))
        return ConicSolution(status, value, dual, x, np.asarray(res.z), elapsed,
                             int(res.iterations), raw, resid)
    return ConicSolution(status, None, None, x, np.asarray(res.z), elapsed,
                         int(res.iterations), f"backend status {raw}")


# ---------------------------------------------------------------------------
# Shor relaxation

@dataclass(frozen=True)
class MomentMatrixLayout:
    blocks: tuple  # ((name, dim), ...)
    n: int

    @property
    def side(self) -> int:
        return self.n + 1

    def index(self, name: str) -> slice:
        off = 1
        for b, d in self.blocks:
            if b == name:
                return slice(off, off + d)
            off += d
        raise KeyError(name)


def shor_relax(spec) -> ConicProblem:
    """Order-1 moment relaxation of ``max spec.objective`` over ``spec.constraints``.

    The single PSD variable is the moment matrix ``M`` of ``[1, v]`` with
    ``M[0,0] = 1``; each quadratic becomes ``<G, M>`` with its original sense.
    """
    layout = MomentMatrixLayout(tuple((b.name, b.dim) for b in spec.blocks.values()), spec.n)
    side = layout.side
    bld = ConicBuilder()
    idx = bld.add_psd_variable("M", side)
    bld.add_zero(([0], [idx[0]], [1.0]), [-1.0])
    for kind in ("eq", "geq"):
        cons = [c for c in spec.constraints if c.sense == kind]
        if not cons:
            continue
        rows, cols, vals = [], [], []
        for r, con in enumerate(cons):
            ci, cv = svec_coeffs(con.G)
            rows.append(np.full(len(ci), r)); cols.append(ci); vals.append(cv)
        trip = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
        zero = np.zeros(len(cons))
        if kind == "eq":
            bld.add_zero(trip, zero)
        else:
            bld.add_nonneg(trip, zero)
    oi, ov = svec_coeffs(spec.objective)
    bld.set_objective(oi, ov, sense="max")
    prob = bld.build(meta={"layout": layout, "model": spec.meta.get("model", "qcqp")})
    return prob


def moment_matrix(problem: ConicProblem, solution: ConicSolution):
    return problem.matrix_of("M", solution.x)


def model_sizes(kind: str, p0: int, p: int, K: int) -> dict:
    """Variable count and largest PSD side of each certification model."""
    if min(p0, p, K) < 1:
        raise ValueError("dimensions must be positive")
    if kind == "robustness":
        n = p0 + p
        return {"num_vars": n, "max_psd_side": 1 + n}
    if kind == "lipschitz":
        n = 2 * p0 + 4 * p + 2 * K
        return {"num_vars": n, "max_psd_side": 1 + n}
    if kind == "ellipsoid":
        return {"num_vars": p0 + 3 * p + K + K * K, "max_psd_side": 1 + p0 + p}
    raise ValueError(f"unknown model kind {kind!r}")


def dump_problem(problem: ConicProblem, path) -> None:
    """Plain-text dump with sparse triplet sections (1-based indices)."""
    A = problem.A.tocoo()
    lines = [
        "# conic problem: b - A x in K",
        f"SENSE {problem.sense}",
        f"VARIABLES {problem.num_vars}",
        f"CONSTRAINTS {problem.A.shape[0]}",
        f"OFFSET {problem.offset!r}",
        f"CONES {len(problem.cones)}",
    ]
    lines += [f"{k} {d}" for k, d in problem.cones]
    nz = np.flatnonzero(problem.c)
    lines.append(f"OBJECTIVE {len(nz)}")
    lines += [f"{j + 1} {problem.c[j]!r}" for j in nz]
    nzb = np.flatnonzero(problem.b)
    lines.append(f"RHS {len(nzb)}")
    lines += [f"{i + 1} {problem.b[i]!r}" for i in nzb]
    lines.append(f"MATRIX {A.nnz}")
    order = np.lexsort((A.col, A.row))
    lines += [f"{A.row[k] + 1} {A.col[k] + 1} {A.data[k]!r}" for k in order]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
