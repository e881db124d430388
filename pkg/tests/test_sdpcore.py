import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mondeq_cert import lipschitz, robustness, sdpcore
from mondeq_cert.ellipsoid import build_ellipsoid_problem, core_var_count
from mondeq_cert.lipschitz import InputBall
from mondeq_cert.netio import PerturbationSpec, generate_network
from mondeq_cert.sdpcore import (
    ConicBuilder, ConicProblem, model_sizes, shor_relax, smat, solve, svec_coeffs, svec_index,
)
from mondeq_cert.semialg import QuadConstraint, QuadraticProgramSpec


def _box_qp(obj):
    spec = QuadraticProgramSpec([("x", 2)])
    one = spec.linear(spec.constant([1.0]))
    X = spec.var("x")
    spec.add([QuadConstraint("geq", (one - spec.sum_of_squares(X[i])).tocsr()) for i in range(2)])
    spec.set_objective(obj(spec, X))
    return spec


def test_shor_examples():
    spec = QuadraticProgramSpec([("x", 1)])
    one = spec.linear(spec.constant([1.0]))
    spec.add([QuadConstraint("geq", (one - spec.sum_of_squares(spec.var("x"))).tocsr())])
    spec.set_objective(spec.sum_of_squares(spec.var("x")))
    assert solve(shor_relax(spec)).value == pytest.approx(1.0, abs=1e-7)
    spec.set_objective(spec.linear(spec.var("x")))
    assert solve(shor_relax(spec)).value == pytest.approx(1.0, abs=1e-7)


def test_shor_bilinear_matches_corners():
    spec = _box_qp(lambda s, X: s.product(X[0], X[1]))
    corners = max(a * b for a, b in itertools.product([-1, 1], repeat=2))
    sol = solve(shor_relax(spec))
    assert sol.status == "optimal"
    assert sol.value == pytest.approx(corners, abs=1e-7)


def test_moment_matrix_layout():
    spec = _box_qp(lambda s, X: s.product(X[0], X[1]))
    prob = shor_relax(spec)
    sol = solve(prob)
    M = sdpcore.moment_matrix(prob, sol)
    assert M.shape == (3, 3) and M[0, 0] == pytest.approx(1.0)
    assert np.linalg.eigvalsh(M)[0] >= -1e-7
    layout = prob.meta["layout"]
    assert layout.side == 3 and layout.index("x") == slice(1, 3)


def test_solver_status_examples():
    b = ConicBuilder()
    idx = b.add_psd_variable("M", 2)
    b.add_zero(([0], [idx[0]], [1.0]), [-1.0])
    sol = solve(b.build())
    assert sol.status == "optimal"

    b = ConicBuilder()
    b.add_psd_variable("M", 2)
    sol = solve(b.build())
    assert sol.status == "optimal" and sol.value == pytest.approx(0.0, abs=1e-9)

    b = ConicBuilder()
    idx = b.add_psd_variable("M", 2)
    b.add_zero(([0, 1], [idx[0], idx[0]], [1.0, 1.0]), [-1.0, -2.0])
    sol = solve(b.build())
    assert sol.status == "infeasible" and sol.value is None and not sol.ok


def test_unbounded_status():
    b = ConicBuilder()
    x = b.add_variable("x", 1)
    b.add_nonneg(([0], x, [1.0]), [0.0])
    b.set_objective(x, [1.0], sense="max")
    assert solve(b.build()).status == "unbounded"


def test_svec_round_trip():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    A = A + A.T
    import scipy.sparse as sp
    x = np.zeros(15)
    c = svec_coeffs(sp.coo_matrix(np.triu(A)))
    # svec of the upper triangle carries sqrt(2) on off-diagonal entries
    iu = np.triu_indices(5)
    x[svec_index(iu[0], iu[1])] = np.where(iu[0] == iu[1], A[iu], np.sqrt(2) * A[iu])
    np.testing.assert_allclose(smat(x, 5), A)
    assert svec_index(0, 1) == svec_index(1, 0) == 1


def test_model_sizes_mnist_dims():
    assert model_sizes("robustness", 784, 87, 10) == {"num_vars": 871, "max_psd_side": 872}
    assert model_sizes("lipschitz", 784, 87, 10) == {"num_vars": 1936, "max_psd_side": 1937}
    assert model_sizes("ellipsoid", 784, 87, 10) == {"num_vars": 1155, "max_psd_side": 872}
    with pytest.raises(ValueError):
        model_sizes("other", 1, 1, 1)


@pytest.mark.parametrize("dims", [(2, 3, 2), (3, 5, 3), (4, 2, 4)])
def test_built_sizes_match(dims):
    p0, p, K = dims
    net = generate_network(p0, p, K, seed=sum(dims))
    pert = PerturbationSpec(np.zeros(p0), 0.1, 2)
    rs = robustness.build_certmon(net, pert, 0, 1)
    want = model_sizes("robustness", p0, p, K)
    assert rs.n == want["num_vars"] and shor_relax(rs).max_psd_side == want["max_psd_side"]
    ls = lipschitz.build_lipmon(net, InputBall(np.zeros(p0), 1.0, 2), 2)
    want = model_sizes("lipschitz", p0, p, K)
    assert ls.n == want["num_vars"] and shor_relax(ls).max_psd_side == want["max_psd_side"]
    prob, _ = build_ellipsoid_problem(net, pert)
    want = model_sizes("ellipsoid", p0, p, K)
    assert core_var_count(net, np.inf) == want["num_vars"]
    # the Schur LMI appends K rows to the Gram block
    assert prob.max_psd_side == want["max_psd_side"] + K


def test_concave_objective_is_exact():
    # max -||x - a||^2 s.t. ||x||^2 <= 1 has value -(||a|| - 1)^2 for ||a|| > 1
    a = np.array([2.0, 1.0, -0.5])
    spec = QuadraticProgramSpec([("x", 3)])
    one = spec.linear(spec.constant([1.0]))
    X = spec.var("x")
    spec.add([QuadConstraint("geq", (one - spec.sum_of_squares(X)).tocsr())])
    spec.set_objective(-spec.sum_of_squares(X - spec.constant(a)))
    sol = solve(shor_relax(spec))
    assert sol.value == pytest.approx(-(np.linalg.norm(a) - 1) ** 2, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_relaxation_upper_bounds_feasible_points(seed):
    rng = np.random.default_rng(seed)
    n = 3
    spec = QuadraticProgramSpec([("x", n)])
    X = spec.var("x")
    one = spec.linear(spec.constant([1.0]))
    spec.add([QuadConstraint("geq", (one - spec.sum_of_squares(X)).tocsr())])
    A = rng.normal(size=(n, n))
    G = np.zeros((n + 1, n + 1))
    G[1:, 1:] = A + A.T
    G[0, 1:] = G[1:, 0] = rng.normal(size=n)
    import scipy.sparse as sp
    spec.set_objective(sp.csr_matrix(G))
    ub = solve(shor_relax(spec)).upper_bound
    for _ in range(200):
        v = rng.normal(size=n)
        v *= rng.uniform() / np.linalg.norm(v)
        assert spec.objective_value(v) <= ub + 1e-7


def test_problem_validation():
    import scipy.sparse as sp
    with pytest.raises(Exception):
        ConicProblem(c=np.zeros(2), A=sp.csc_matrix((1, 3)), b=np.zeros(1), cones=[("zero", 1)])
    with pytest.raises(Exception):
        ConicProblem(c=np.zeros(1), A=sp.csc_matrix((2, 1)), b=np.zeros(2),
                     cones=[("nonneg", 1), ("zero", 1)])


def test_dump_problem(tmp_path):
    spec = _box_qp(lambda s, X: s.product(X[0], X[1]))
    prob = shor_relax(spec)
    path = tmp_path / "p.txt"
    sdpcore.dump_problem(prob, path)
    text = path.read_text()
    for section in ("SENSE", "VARIABLES", "CONES", "OBJECTIVE", "RHS", "MATRIX"):
        assert section in text
    assert "psd 3" in text


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("MONDEQ_SOLVER_TOL", "1e-6")
    assert sdpcore.SolverSettings.from_env().tol == 1e-6
    assert sdpcore.SolverSettings.from_env(tol=1e-9).tol == 1e-9
