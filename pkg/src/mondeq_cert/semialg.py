"""Quadratic constraint systems over named variable blocks.

Every polynomial of degree <= 2 in the concatenated variable vector ``v`` is
stored as a sparse symmetric matrix ``G`` over the lifted vector
``[1, v]``: ``poly(v) = [1, v]^T G [1, v]``. Affine expressions are sparse
row matrices over the same lifted vector (column 0 is the constant).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, UnsupportedNormError
from .norms import INF, parse_norm


@dataclass(frozen=True)
class VarBlock:
    name: str
    dim: int
    offset: int  # position in v, i.e. column offset + 1 in the lifted basis

    @property
    def columns(self):
        return np.arange(self.offset + 1, self.offset + 1 + self.dim)


def _sym(G):
    return ((G + G.T) * 0.5).tocsr()


@dataclass
class QuadConstraint:
    """``poly >= 0`` (sense 'geq') or ``poly == 0`` (sense 'eq')."""
    sense: str
    G: sp.csr_matrix
    label: str = ""

    def __post_init__(self):
        if self.sense not in ("eq", "geq"):
            raise ValueError(f"bad sense {self.sense!r}")

    @property
    def quad(self):
        return self.G[1:, 1:]

    @property
    def lin(self):
        return 2.0 * np.asarray(self.G[0, 1:].todense()).ravel()

    @property
    def const(self) -> float:
        return float(self.G[0, 0])

    def value(self, v) -> float:
        return evaluate(self.G, v)

    def satisfied(self, v, tol=1e-9) -> bool:
        val = self.value(v)
        return abs(val) <= tol if self.sense == "eq" else val >= -tol


def evaluate(G, v) -> float:
    w = np.concatenate(([1.0], np.asarray(v, dtype=float)))
    return float(w @ (G @ w))


class QuadraticProgramSpec:
    """``maximize objective(v)`` subject to a list of QuadConstraint.

    Blocks are fixed at construction; their order defines the moment basis
    ``[1, block_1, block_2, ...]``.
    """

    def __init__(self, blocks):
        self.blocks: dict[str, VarBlock] = {}
        off = 0
        for name, dim in blocks:
            if name in self.blocks:
                raise ValueError(f"duplicate block name {name!r}")
            if dim < 1:
                raise DimensionError(f"block {name!r} must have positive dimension")
            self.blocks[name] = VarBlock(name, int(dim), off)
            off += int(dim)
        self.n = off
        self.constraints: list[QuadConstraint] = []
        self.objective = sp.csr_matrix((off + 1, off + 1))
        self.meta: dict = {}

    @property
    def side(self) -> int:
        return self.n + 1

    # affine expressions
    def var(self, name):
        """Selection expression for a block: one row per coordinate."""
        b = self.blocks[name]
        return sp.csr_matrix((np.ones(b.dim), (np.arange(b.dim), b.columns)),
                             shape=(b.dim, self.side))

    def affine(self, terms: dict, const=None, rows: int | None = None):
        """Sum of ``matrix @ block`` terms plus a constant vector."""
        out = None
        for name, mat in terms.items():
            mat = sp.csr_matrix(np.atleast_2d(mat)) if not sp.issparse(mat) else mat.tocsr()
            b = self.blocks[name]
            if mat.shape[1] != b.dim:
                raise DimensionError(f"term for block {name!r} has {mat.shape[1]} columns, "
                                     f"block has {b.dim}")
            e = mat @ self.var(name)
            out = e if out is None else out + e
        if out is None:
            if rows is None:
                raise ValueError("need rows when no terms are given")
            out = sp.csr_matrix((rows, self.side))
        if const is not None:
            const = np.broadcast_to(np.asarray(const, dtype=float), (out.shape[0],))
            out = out + sp.csr_matrix((const, (np.arange(out.shape[0]),
                                               np.zeros(out.shape[0], dtype=int))),
                                      shape=out.shape)
        return out.tocsr()

    def constant(self, values):
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return self.affine({}, const=values, rows=values.shape[0])

    # polynomials
    def linear(self, row):
        """Quadratic-form matrix of the affine scalar given by a 1-row expression."""
        e0 = sp.csr_matrix(([1.0], ([0], [0])), shape=(1, self.side))
        return _sym(e0.T @ row)

    def product(self, a_row, b_row):
        return _sym(a_row.T @ b_row)

    def coordinate_products(self, A, B):
        """Polynomials ``A_i(v) * B_i(v)`` for each row i."""
        if A.shape[0] != B.shape[0]:
            raise DimensionError(f"row mismatch {A.shape[0]} vs {B.shape[0]}")
        return [self.product(A[i], B[i]) for i in range(A.shape[0])]

    def sum_of_squares(self, A):
        """``sum_i A_i(v)^2``."""
        return (A.T @ A).tocsr()

    def add(self, constraints):
        for c in constraints:
            if c.G.shape != (self.side, self.side):
                raise DimensionError("constraint references undeclared variables")
            self.constraints.append(c)
        return self

    def set_objective(self, G):
        if G.shape != (self.side, self.side):
            raise DimensionError("objective has wrong shape")
        self.objective = _sym(G)

    def objective_value(self, v) -> float:
        return evaluate(self.objective, v)

    def pack(self, **values):
        """Concatenate block values into the vector v."""
        v = np.zeros(self.n)
        for name, val in values.items():
            b = self.blocks[name]
            v[b.offset:b.offset + b.dim] = val
        return v

    def feasible(self, v, tol=1e-9) -> bool:
        return all(c.satisfied(v, tol) for c in self.constraints)


def _as_expr(spec: QuadraticProgramSpec, e):
    return spec.var(e) if isinstance(e, str) else sp.csr_matrix(e)


def relu_graph(spec, z, preact, label="relu"):
    """``z = ReLU(preact)`` as z(z - preact) = 0, z - preact >= 0, z >= 0."""
    Z = _as_expr(spec, z)
    P = sp.csr_matrix(preact)
    if Z.shape[0] != P.shape[0]:
        raise DimensionError(f"z has {Z.shape[0]} rows, preactivation has {P.shape[0]}")
    D = (Z - P).tocsr()
    out = [QuadConstraint("eq", G, f"{label}:compl[{i}]")
           for i, G in enumerate(spec.coordinate_products(Z, D))]
    out += [QuadConstraint("geq", spec.linear(D[i]), f"{label}:upper[{i}]")
            for i in range(D.shape[0])]
    out += [QuadConstraint("geq", spec.linear(Z[i]), f"{label}:pos[{i}]")
            for i in range(Z.shape[0])]
    return out


def relu_subgradient(spec, s, preact, label="drelu"):
    """``s in dReLU(preact)`` as s(s-1) <= 0, s*preact >= 0, (s-1)*preact >= 0."""
    S = _as_expr(spec, s)
    P = sp.csr_matrix(preact)
    if S.shape[0] != P.shape[0]:
        raise DimensionError(f"s has {S.shape[0]} rows, preactivation has {P.shape[0]}")
    Sm1 = (S - spec.constant(np.ones(S.shape[0]))).tocsr()
    out = [QuadConstraint("geq", -G, f"{label}:box[{i}]")
           for i, G in enumerate(spec.coordinate_products(S, Sm1))]
    out += [QuadConstraint("geq", G, f"{label}:sp[{i}]")
            for i, G in enumerate(spec.coordinate_products(S, P))]
    out += [QuadConstraint("geq", G, f"{label}:s1p[{i}]")
            for i, G in enumerate(spec.coordinate_products(Sm1, P))]
    return out


SUPPORTED_BALL_NORMS = (1, 2, INF)


def lq_ball(spec, x, center, eps, q, lift: str | None = None, label="ball"):
    """``||x - center||_q <= eps`` for q in {1, 2, inf}.

    q=2 is one quadratic, q=inf is one quadratic per coordinate. q=1 needs an
    auxiliary block ``lift`` of the same dimension: a >= +-(x - c), sum(a) <= eps.
    """
    q = parse_norm(q)
    X = _as_expr(spec, x)
    center = np.asarray(center, dtype=float)
    if center.shape != (X.shape[0],):
        raise DimensionError(f"center has shape {center.shape}, expected ({X.shape[0]},)")
    D = (X - spec.constant(center)).tocsr()
    e2 = float(eps) ** 2
    if q == 2:
        G = spec.linear(spec.constant([e2])) - spec.sum_of_squares(D)
        return [QuadConstraint("geq", G.tocsr(), f"{label}:l2")]
    if q == INF:
        base = spec.linear(spec.constant([e2]))
        return [QuadConstraint("geq", (base - spec.sum_of_squares(D[i])).tocsr(),
                               f"{label}:linf[{i}]") for i in range(D.shape[0])]
    if q == 1:
        if lift is None:
            raise UnsupportedNormError("q=1 needs an auxiliary absolute-value block")
        Aexp = spec.var(lift)
        if Aexp.shape[0] != D.shape[0]:
            raise DimensionError("lift block must match the ball dimension")
        out = []
        budget = (spec.constant([float(eps)]) - sp.csr_matrix(Aexp.sum(axis=0))).tocsr()
        for i in range(D.shape[0]):
            for sign, tag in ((-1.0, "+"), (1.0, "-")):
                side = (Aexp[i] + sign * D[i]).tocsr()
                out.append(QuadConstraint("geq", spec.linear(side), f"{label}:l1{tag}[{i}]"))
                # implied products keep second moments bounded after linearization
                out.append(QuadConstraint("geq", spec.product(side, budget),
                                          f"{label}:l1{tag}x[{i}]"))
        out.append(QuadConstraint("geq", spec.linear(budget), f"{label}:l1sum"))
        G = spec.linear(spec.constant([e2])) - spec.sum_of_squares(D)
        out.append(QuadConstraint("geq", G.tocsr(), f"{label}:l1-in-l2"))
        return out
    raise UnsupportedNormError(f"only q in {{1, 2, inf}} is representable with quadratics, got {q}")
