"""Per-label gap bounds: maximize ``F_i - F_y0`` over the input ball via Shor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fixpoint
from .errors import UnsupportedNormError
from .netio import MonDEQ, PerturbationSpec
from .norms import INF
from .sdpcore import SolverSettings, shor_relax, solve
from .semialg import QuadraticProgramSpec, lq_ball, relu_graph

TOL_MARGIN = 1e-6


@dataclass
class LabelBound:
    label: int
    bound: float | None  # relaxation upper bound on max F_i - F_y0, None on failure
    status: str
    solve_time: float


@dataclass
class RobustnessReport:
    y0: int
    bounds: list = field(default_factory=list)  # LabelBound, in solve order
    certified: bool = False
    reason: str = ""
    skipped: list = field(default_factory=list)  # labels not solved after an early exit

    def to_dict(self):
        return {
            "y0": self.y0,
            "certified": self.certified,
            "reason": self.reason,
            "bounds": [{"label": b.label, "bound": b.bound, "status": b.status,
                        "solve_time_s": b.solve_time} for b in self.bounds],
            "skipped": list(self.skipped),
        }


def ball_blocks(pert: PerturbationSpec):
    return [("a", pert.dim)] if pert.q == 1 else []


def build_certmon(net: MonDEQ, pert: PerturbationSpec, y0: int, i: int) -> QuadraticProgramSpec:
    """Blocks ``x`` (p0) and ``z`` (p); objective ``F_i - F_y0 = (C_i - C_y0) z + c_i - c_y0``.

    The readout bias only cancels when ``c_i == c_y0``, so it is kept as a constant term.
    """
    if i == y0:
        raise ValueError("competing label must differ from y0")
    if pert.q not in (1, 2, INF):
        raise UnsupportedNormError(f"unsupported norm q={pert.q}")
    spec = QuadraticProgramSpec([("x", net.p0), ("z", net.p)] + ball_blocks(pert))
    pre = spec.affine({"z": net.W, "x": net.U}, const=net.u)
    spec.add(relu_graph(spec, "z", pre))
    spec.add(lq_ball(spec, "x", pert.x0, pert.eps, pert.q, lift="a" if pert.q == 1 else None))
    xi = net.C[i] - net.C[y0]
    spec.set_objective(spec.linear(spec.affine({"z": xi[None, :]}, const=net.c[i] - net.c[y0])))
    spec.meta.update(model="robustness", y0=y0, label=i)
    return spec


def label_order(net: MonDEQ, x0, y0: int):
    """Competing labels, closest clean score first."""
    scores = fixpoint.forward(net, x0)
    others = [k for k in range(net.K) if k != y0]
    return sorted(others, key=lambda k: (scores[y0] - scores[k], k))


def gap_bound(net, pert, y0, i, settings=None) -> LabelBound:
    prob = shor_relax(build_certmon(net, pert, y0, i))
    sol = solve(prob, settings)
    return LabelBound(i, sol.upper_bound, sol.status, sol.solve_time)


def certify_robustness(net: MonDEQ, pert: PerturbationSpec, settings: SolverSettings | None = None,
                       tol_margin: float = TOL_MARGIN, early_exit: bool = True,
                       y0: int | None = None) -> RobustnessReport:
    if y0 is None:
        y0 = fixpoint.predict(net, pert.x0)
    report = RobustnessReport(y0=y0)
    order = label_order(net, pert.x0, y0)
    for n, i in enumerate(order):
        lb = gap_bound(net, pert, y0, i, settings)
        report.bounds.append(lb)
        if lb.bound is None:
            report.reason = f"solver status {lb.status} for label {i}"
        elif lb.bound > -tol_margin and not report.reason:
            report.reason = f"label {i}: gap bound {lb.bound:.6g} >= -{tol_margin:g}"
        if report.reason and early_exit:
            report.skipped = order[n + 1:]
            break
    report.certified = not report.reason
    return report
