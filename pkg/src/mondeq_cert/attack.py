"""Projected gradient ascent on the logit margin, with gradients from the implicit Jacobian."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fixpoint
from .errors import ConvergenceError, UnsupportedNormError
from .norms import INF, norm_label, parse_norm, vector_norm
from .sampling import sample_ball

PIXEL_RANGE = (-0.42, 2.82)  # MNIST range after (v - 0.1307) / 0.3081


@dataclass
class AttackResult:
    success: bool
    y0: int
    x_adv: np.ndarray | None = None
    label: int | None = None
    iterations: int = 0
    restarts_run: int = 0
    margins: list = field(default_factory=list)  # best margin after each step of the best restart

    def to_dict(self):
        return {
            "success": self.success,
            "y0": self.y0,
            "x_adv": None if self.x_adv is None else self.x_adv.tolist(),
            "label": self.label,
            "iterations": self.iterations,
            "restarts_run": self.restarts_run,
            "margins": list(self.margins),
        }


def project(x, x0, eps, q):
    """Closest-point projection onto B(x0, eps) for q=inf, radial scaling for q=2."""
    d = x - x0
    if q == INF:
        return x0 + np.clip(d, -eps, eps)
    n = np.linalg.norm(d)
    return x if n <= eps else x0 + d * (eps / n)


def _margin_and_grad(net, x, y0, z0=None):
    r = fixpoint.solve_equilibrium(net, x, z0=z0)
    if not r.converged:
        raise ConvergenceError(f"equilibrium solve did not converge (residual {r.residual:.3g})")
    F = net.C @ r.z + net.c
    others = F.copy()
    others[y0] = -np.inf
    i = int(np.argmax(others))
    J = fixpoint.jacobian_at(net, r.z, x)
    return F[i] - F[y0], i, J[i] - J[y0], r.z


def _ascent_direction(g, q):
    if q == INF:
        return np.sign(g)
    n = np.linalg.norm(g)
    return g / n if n > 0 else g


def pgd_attack(net, x0, eps, q=2, steps=100, step_size=None, restarts=10, seed=0,
               clamp=False, y0=None) -> AttackResult:
    q = parse_norm(q)
    if q not in (2, INF):
        raise UnsupportedNormError(f"PGD supports q in {{2, inf}}, got {norm_label(q)}")
    x0 = np.asarray(x0, dtype=float)
    if y0 is None:
        y0 = fixpoint.predict(net, x0)
    out = AttackResult(False, y0)
    if net.K < 2 or eps <= 0:
        return out
    step_size = 2.5 * eps / steps if step_size is None else step_size
    rng = np.random.default_rng(seed)
    lo, hi = PIXEL_RANGE
    best = -np.inf

    def feasible(x):
        x = project(x, x0, eps, q)
        return np.clip(x, lo, hi) if clamp else x

    for rs in range(restarts):
        # first restart starts at x0, the others uniformly in the ball
        x = x0.copy() if rs == 0 else feasible(sample_ball(rng, x0, eps, q, 1)[0])
        z = None
        trace = []
        out.restarts_run = rs + 1
        try:
            for it in range(steps + 1):
                margin, i, g, z = _margin_and_grad(net, x, y0, z)
                trace.append(float(margin))
                if margin >= 0 and fixpoint.predict(net, x) != y0:
                    if _verified(net, x, x0, eps, q, y0):
                        out.success, out.x_adv, out.label = True, x.copy(), fixpoint.predict(net, x)
                        out.iterations, out.margins = it, trace
                        return out
                if it == steps:
                    break
                x = feasible(x + step_size * _ascent_direction(g, q))
        except ConvergenceError:
            continue
        if max(trace) > best:
            best = max(trace)
            out.iterations, out.margins = steps, trace
    return out


def _verified(net, x, x0, eps, q, y0) -> bool:
    """Fresh cold-start forward pass and ball check."""
    if vector_norm(x - x0, q) > eps + 1e-9:
        return False
    try:
        return fixpoint.predict(net, x) != y0
    except ConvergenceError:
        return False
