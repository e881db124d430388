import numpy as np
import pytest

from mondeq_cert import oracle, robustness
from mondeq_cert.errors import UnsupportedNormError
from mondeq_cert.netio import MonDEQ, PerturbationSpec, generate_network
from mondeq_cert.sdpcore import SolverSettings

from conftest import identity_net

X0 = np.array([1.0, 0.0])


def test_build_certmon_blocks(ident):
    spec = robustness.build_certmon(ident, PerturbationSpec(X0, 0.1, "inf"), 0, 1)
    assert spec.n == 4 and list(spec.blocks) == ["x", "z"]
    # objective z_2 - z_1
    assert spec.objective_value(spec.pack(x=[0, 0], z=[1.0, 3.0])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        robustness.build_certmon(ident, PerturbationSpec(X0, 0.1), 0, 0)


def test_readout_bias_enters_the_gap():
    net = MonDEQ(np.zeros((2, 2)), np.eye(2), np.zeros(2), np.eye(2), np.array([0.0, 0.5]), 1.0)
    b = robustness.gap_bound(net, PerturbationSpec(X0, 0.1, "inf"), 0, 1)
    assert b.bound == pytest.approx(-0.3, abs=1e-6)


@pytest.mark.parametrize("q, eps, exact", [
    ("inf", 0.1, -0.8), ("inf", 2.0, 2.0),
    (2, 0.1, -1 + 0.1 * np.sqrt(2)),  # max x2 - x1 on the disk, all of it in x1 > 0
    (2, 2.0, np.sqrt(3.0)),
])
def test_identity_gap_bounds(ident, q, eps, exact):
    pert = PerturbationSpec(X0, eps, q)
    b = robustness.gap_bound(ident, pert, 0, 1)
    assert b.status == "optimal"
    assert b.bound >= exact - 1e-6
    assert b.bound == pytest.approx(exact, abs=1e-5)


def test_certify_examples(ident):
    rep = robustness.certify_robustness(ident, PerturbationSpec(X0, 0.1, "inf"))
    assert rep.y0 == 0 and rep.certified and rep.bounds[0].bound < 0
    rep = robustness.certify_robustness(ident, PerturbationSpec(X0, 2.0, "inf"))
    assert not rep.certified and "label 1" in rep.reason
    net1 = MonDEQ(np.zeros((1, 1)), [[1.0]], [0.0], [[1.0]], [0.0], 1.0)
    rep = robustness.certify_robustness(net1, PerturbationSpec([0.5], 1.0))
    assert rep.certified and rep.bounds == []


def test_early_exit_skips_labels():
    net = identity_net(4)
    x0 = np.array([1.0, 0.9, 0.0, -1.0])
    pert = PerturbationSpec(x0, 0.5, "inf")
    rep = robustness.certify_robustness(net, pert)
    assert not rep.certified
    assert [b.label for b in rep.bounds] == [1] and rep.skipped == [2, 3]
    full = robustness.certify_robustness(net, pert, early_exit=False)
    assert len(full.bounds) == 3 and not full.skipped


def test_solver_failure_is_not_certified(ident):
    rep = robustness.certify_robustness(ident, PerturbationSpec(X0, 0.1, "inf"),
                                        settings=SolverSettings(max_iter=1))
    assert not rep.certified and "solver status" in rep.reason


def test_l1_ball_is_sound(ident):
    for eps, exact in ((0.1, -0.9), (2.0, 1.0)):
        b = robustness.gap_bound(ident, PerturbationSpec(X0, eps, 1), 0, 1)
        assert b.bound >= exact - 1e-6


def test_unsupported_norm(ident):
    with pytest.raises(UnsupportedNormError):
        robustness.build_certmon(ident, PerturbationSpec(X0, 0.1, 3), 0, 1)


@pytest.mark.parametrize("seed", range(4))
def test_dominates_oracle(seed):
    net = generate_network(2, 5, 3, seed=seed)
    x0 = np.random.default_rng(seed).normal(size=2)
    for q in (2, np.inf):
        pert = PerturbationSpec(x0, 0.4, q)
        from mondeq_cert.fixpoint import predict
        y0 = predict(net, x0)
        exact = oracle.exact_gaps(net, pert, y0)
        for i, v in exact.items():
            assert robustness.gap_bound(net, pert, y0, i).bound >= v - 1e-6


def test_report_dict(ident):
    d = robustness.certify_robustness(ident, PerturbationSpec(X0, 0.1, "inf")).to_dict()
    assert set(d) == {"y0", "certified", "reason", "bounds", "skipped"}
    assert set(d["bounds"][0]) == {"label", "bound", "status", "solve_time_s"}
