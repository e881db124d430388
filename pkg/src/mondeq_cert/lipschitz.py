"""Lipschitz upper bounds of a monDEQ over an input ball, and the 2*delta < tau test.

The quadratic program maximizes ``t^T U^T y`` where ``y = diag(s) r`` and
``r - W^T y = C^T v`` encode ``v^T C J t`` for a Clarke Jacobian ``J`` at an
equilibrium ``(x, z)`` with activation selection ``s``. Its Shor relaxation
upper-bounds ``sup ||C J||_q`` and therefore the Lipschitz constant of F.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fixpoint
from .errors import BallContainmentError, SolverError, UnsupportedNormError
from .netio import MonDEQ
from .norms import INF, norm_label, norm_ratio, operator_norm, parse_norm, spectral_norm, vector_norm
from .sdpcore import SolverSettings, shor_relax, solve
from .semialg import QuadConstraint, QuadraticProgramSpec, lq_ball, relu_graph, relu_subgradient

TOL_MARGIN = 1e-6
# power iteration approaches ||C||_2 from below; inflate so the bound constraint stays valid
_NORM_INFLATE = 1.0 + 1e-9


@dataclass(frozen=True, eq=False)
class InputBall:
    center: np.ndarray
    radius: float
    q: float = 2

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "q", parse_norm(self.q))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def contains_ball(self, x0, eps, q) -> bool:
        """Sufficient test that B(x0, eps, ||.||_q) lies inside this ball."""
        x0 = np.asarray(x0, dtype=float)
        reach = vector_norm(x0 - self.center, self.q) + eps * norm_ratio(len(x0), q, self.q)
        return reach <= self.radius * (1 + 1e-12)

    def to_dict(self):
        return {"center": self.center.tolist(), "radius": self.radius, "q": norm_label(self.q)}


def covering_ball(points, eps, q) -> InputBall:
    """Ball around the mean of ``points`` containing every eps-ball around them."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    center = P.mean(axis=0)
    r = max(vector_norm(p - center, q) for p in P)
    return InputBall(center, r + eps, q)


@dataclass
class LipschitzBound:
    q: float
    S: InputBall
    value: float | None
    status: str
    solve_time: float

    def to_dict(self):
        return {"q": norm_label(self.q), "S": self.S.to_dict(), "value": self.value,
                "status": self.status, "solve_time_s": self.solve_time}

    @classmethod
    def from_dict(cls, d):
        S = InputBall(np.asarray(d["S"]["center"]), float(d["S"]["radius"]), d["S"]["q"])
        return cls(parse_norm(d["q"]), S, d["value"], d["status"], d.get("solve_time_s", 0.0))


LIPMON_BLOCKS = ("t", "x", "s", "z", "y", "r", "v", "w")


def adjoint_norm_bounds(net: MonDEQ):
    """Constants k_y, k_r with ||y||_2 <= k_y ||v||_2 and ||r||_2 <= k_r ||v||_2.

    With D = diag(s), s in [0, 1]^p, y = D r solves y - D W^T y = D C^T v.
    Pairing with y on the active coordinates and using sym(I - W) >= m I gives
    m ||y||^2 <= ||y|| ||C^T v||, so k_y = ||C||_2 / m. Then r = C^T v + W^T y
    gives k_r = ||C||_2 (1 + ||W||_2 / m).
    """
    c = spectral_norm(net.C) * _NORM_INFLATE
    w = spectral_norm(net.W) * _NORM_INFLATE
    return c / net.m, c * (1.0 + w / net.m)


def build_lipmon(net: MonDEQ, S: InputBall, q) -> QuadraticProgramSpec:
    q = parse_norm(q)
    if q not in (2, INF):
        raise UnsupportedNormError(f"Lipschitz model supports q in {{2, inf}}, got {q}")
    p0, p, K = net.p0, net.p, net.K
    dims = dict(t=p0, x=p0, s=p, z=p, y=p, r=p, v=K, w=K)
    extra = [("a", p0)] if S.q == 1 else []
    spec = QuadraticProgramSpec([(b, dims[b]) for b in LIPMON_BLOCKS] + extra)
    var = spec.var
    one = spec.linear(spec.constant([1.0]))

    def unit_ball(name):
        X = var(name)
        if q == 2:
            return [QuadConstraint("geq", (one - spec.sum_of_squares(X)).tocsr(), f"{name}:l2")]
        return [QuadConstraint("geq", (one - spec.sum_of_squares(X[i])).tocsr(), f"{name}:linf[{i}]")
                for i in range(X.shape[0])]

    # (a) dual-pair constraints
    spec.add(unit_ball("t"))
    spec.add(unit_ball("w"))
    wv = sum(spec.coordinate_products(var("w"), var("v")))
    spec.add([QuadConstraint("geq", (one - wv).tocsr(), "wv<=1")])
    # v must lie in the dual unit ball; w = sign(v) certifies ||v||_1 <= 1 for q = inf
    if q == 2:
        spec.add([QuadConstraint("geq", (one - spec.sum_of_squares(var("v"))).tocsr(), "v:l2")])
    else:
        spec.add([QuadConstraint("eq", (spec.sum_of_squares(var("w")[i]) - one).tocsr(), f"w:sign[{i}]")
                  for i in range(K)])
        spec.add([QuadConstraint("geq", G, f"wv:sign[{i}]")
                  for i, G in enumerate(spec.coordinate_products(var("w"), var("v")))])
        spec.add([QuadConstraint("geq", (one - spec.sum_of_squares(var("v"))).tocsr(), "v:l2<=l1")])
    # (b) x in S
    spec.add(lq_ball(spec, "x", S.center, S.radius, S.q, lift="a" if S.q == 1 else None, label="S"))
    # (c) equilibrium and activation selection
    pre = spec.affine({"z": net.W, "x": net.U}, const=net.u)
    spec.add(relu_graph(spec, "z", pre))
    spec.add(relu_subgradient(spec, "s", pre))
    # (d) adjoint system
    adj = (var("r") - spec.affine({"y": net.W.T, "v": net.C.T})).tocsr()
    spec.add([QuadConstraint("eq", spec.linear(adj[i]), f"adj[{i}]") for i in range(p)])
    sr = spec.coordinate_products(var("s"), var("r"))
    spec.add([QuadConstraint("eq", (spec.linear(var("y")[i]) - sr[i]).tocsr(), f"y=sr[{i}]")
              for i in range(p)])
    # (e) norm bounds on y and r, see adjoint_norm_bounds
    vv = spec.sum_of_squares(var("v"))
    for name, k in zip(("y", "r"), adjoint_norm_bounds(net)):
        spec.add([QuadConstraint("geq", (k * k * vv - spec.sum_of_squares(var(name))).tocsr(),
                                 f"{name}:norm")])
    # (f) coordinate products of the adjoint system with s, z, y, r
    for name in ("s", "z", "y", "r"):
        spec.add([QuadConstraint("eq", G, f"adj*{name}[{i}]")
                  for i, G in enumerate(spec.coordinate_products(var(name), adj))])
    spec.set_objective(sum(spec.coordinate_products(var("t"), spec.affine({"y": net.U.T}))))
    spec.meta.update(model="lipschitz", q=q)
    return spec


def lipschitz_bound(net: MonDEQ, S: InputBall, q, settings: SolverSettings | None = None,
                    dump_path=None) -> LipschitzBound:
    q = parse_norm(q)
    prob = shor_relax(build_lipmon(net, S, q))
    if dump_path is not None:
        from .sdpcore import dump_problem
        dump_problem(prob, dump_path)
    sol = solve(prob, settings)
    value = None
    if sol.ok:
        value = max(0.0, sol.upper_bound)
    return LipschitzBound(q, S, value, sol.status, sol.solve_time)


def baseline_bounds(net: MonDEQ, q) -> float:
    """Closed-form bound ``|||C|||_q * |||U|||_2 / m`` (times sqrt(p0) for q = inf)."""
    q = parse_norm(q)
    if q not in (2, INF):
        raise UnsupportedNormError(f"baseline defined for q in {{2, inf}}, got {q}")
    ub_z = spectral_norm(net.U) / net.m
    if q == INF:
        ub_z *= math.sqrt(net.p0)
    return operator_norm(net.C, q) * ub_z


def clean_margin(net: MonDEQ, x0):
    scores = fixpoint.forward(net, x0)
    y0 = int(np.argmax(scores))
    rest = np.delete(scores, y0)
    tau = float(scores[y0] - rest.max()) if rest.size else math.inf
    return y0, tau


def certify_via_lipschitz(net: MonDEQ, x0, eps, q, bound: LipschitzBound,
                          tol_margin: float = TOL_MARGIN) -> dict:
    q = parse_norm(q)
    if bound.value is None:
        raise SolverError(f"no Lipschitz bound available (status {bound.status})")
    if bound.q != q:
        raise ValueError(f"bound is for q={norm_label(bound.q)}, query uses q={norm_label(q)}")
    if not bound.S.contains_ball(x0, eps, q):
        raise BallContainmentError("query ball is not contained in the bound's input set S")
    y0, tau = clean_margin(net, x0)
    delta = eps * bound.value
    return {"y0": y0, "delta": delta, "tau": tau, "certified": bool(2 * delta < tau - tol_margin)}


def sampled_lower_bound(net: MonDEQ, S: InputBall, q, n_pairs=10_000, seed=0, spread=None):
    """Largest difference quotient ``||F(x)-F(y)||_q / ||x-y||_q`` over random pairs in S.

    Half the pairs are close (``spread`` times the radius apart) to catch local slopes.
    """
    from .sampling import sample_ball
    q = parse_norm(q)
    rng = np.random.default_rng(seed)
    X = sample_ball(rng, S.center, S.radius, S.q, n_pairs)
    Y = sample_ball(rng, S.center, S.radius, S.q, n_pairs)
    half = n_pairs // 2
    spread = 1e-2 if spread is None else spread
    step = sample_ball(rng, np.zeros(net.p0), spread * S.radius, S.q, half)
    Y[:half] = X[:half] + step
    # keep the perturbed points in S
    for k in range(half):
        excess = vector_norm(Y[k] - S.center, S.q) / S.radius
        if excess > 1:
            Y[k] = S.center + (Y[k] - S.center) / excess
    FX = fixpoint.forward_batch(net, X)
    FY = fixpoint.forward_batch(net, Y)
    num = np.array([vector_norm(a - b, q) for a, b in zip(FX, FY)])
    den = np.array([vector_norm(a - b, q) for a, b in zip(X, Y)])
    keep = den > 1e-12
    return float(np.max(num[keep] / den[keep])) if keep.any() else 0.0
