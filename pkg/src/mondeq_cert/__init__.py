"""SDP-based robustness, Lipschitz and reachability certificates for monotone equilibrium networks."""
from .netio import MonDEQ, NormalizationSpec, PerturbationSpec, generate_network, load_network, save_network
from .fixpoint import forward, predict, solve_equilibrium
from .robustness import certify_robustness
from .lipschitz import InputBall, lipschitz_bound, certify_via_lipschitz, baseline_bounds
from .ellipsoid import Ellipsoid, min_volume_ellipsoid, certify_via_ellipsoid
from .attack import pgd_attack
from .oracle import exact_gap, exact_gaps

__version__ = "0.1.0"
