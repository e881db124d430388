import numpy as np
import pytest

from mondeq_cert import fixpoint
from mondeq_cert.errors import ConvergenceError, DimensionError
from mondeq_cert.netio import MonDEQ, generate_network
from mondeq_cert.norms import spectral_norm

from conftest import identity_net, scalar_net


def test_identity_examples(ident):
    r = fixpoint.solve_equilibrium(ident, np.array([1.0, -2.0]))
    assert r.converged and r.iterations == 1
    np.testing.assert_array_equal(r.z, [1.0, 0.0])
    np.testing.assert_array_equal(fixpoint.forward(ident, [1.0, -2.0]), [1.0, 0.0])
    np.testing.assert_array_equal(fixpoint.implicit_jacobian(ident, [1.0, -2.0]), np.diag([1.0, 0.0]))


def test_scalar_examples(scalar):
    r = fixpoint.solve_equilibrium(scalar, [1.0])
    assert r.z == pytest.approx([2.0], abs=1e-12)
    assert fixpoint.forward(scalar, [1.0]) == pytest.approx([5.0])
    assert fixpoint.predict(scalar, [1.0]) == 0
    np.testing.assert_allclose(fixpoint.implicit_jacobian(scalar, [1.0]), [[6.0]])


def test_predict_ties_and_order():
    net = MonDEQ(np.zeros((1, 1)), [[1.0]], [0.0], [[0.1], [0.9]], [0.0, 0.0], 1.0)
    assert fixpoint.predict(net, [1.0]) == 1
    net = MonDEQ(np.zeros((1, 1)), [[1.0]], [0.0], [[0.5], [0.5]], [0.0, 0.0], 1.0)
    assert fixpoint.predict(net, [1.0]) == 0


def test_output_shape_and_dimension_error(small_net):
    assert fixpoint.forward(small_net, np.zeros(3)).shape == (3,)
    with pytest.raises(DimensionError):
        fixpoint.solve_equilibrium(small_net, np.zeros(4))


@pytest.mark.parametrize("seed", range(5))
def test_initialization_independence(seed):
    net = generate_network(4, 10, 3, m=0.5, seed=seed, scale=2.0)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=4)
    ref = fixpoint.solve_equilibrium(net, x)
    assert ref.converged and ref.residual <= 1e-10
    for _ in range(10):
        r = fixpoint.solve_equilibrium(net, x, z0=rng.normal(scale=5.0, size=10))
        assert r.converged
        assert np.max(np.abs(r.z - ref.z)) <= 1e-9


def test_non_convergence_returns_best_iterate():
    net = generate_network(3, 20, 2, m=0.05, seed=3, scale=3.0)
    r = fixpoint.solve_equilibrium(net, np.ones(3), max_iter=2, tol_fp=1e-14)
    assert not r.converged and r.iterations == 2
    with pytest.raises(ConvergenceError):
        fixpoint.forward(net, np.ones(3), max_iter=2, tol_fp=1e-14)


def test_batch_matches_single(small_net):
    X = np.random.default_rng(0).normal(size=(25, 3))
    F = fixpoint.forward_batch(small_net, X)
    for x, f in zip(X, F):
        np.testing.assert_allclose(fixpoint.forward(small_net, x), f, atol=1e-9)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 20:
        net = generate_network(3, 6, 2, seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=3)
        z = fixpoint.solve_equilibrium(net, x).z
        if np.min(np.abs(net.preact(z, x))) < 1e-3:
            continue
        J = fixpoint.implicit_jacobian(net, x)
        h = 1e-6
        fd = np.stack([(fixpoint.forward(net, x + h * e) - fixpoint.forward(net, x - h * e)) / (2 * h)
                       for e in np.eye(3)], axis=1)
        assert np.linalg.norm(J - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))
        checked += 1


def test_lipschitz_sanity(small_net):
    rng = np.random.default_rng(1)
    L = spectral_norm(small_net.U) / small_net.m * spectral_norm(small_net.C)
    X, Y = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
    FX, FY = fixpoint.forward_batch(small_net, X), fixpoint.forward_batch(small_net, Y)
    ratio = np.linalg.norm(FX - FY, axis=1) / np.linalg.norm(X - Y, axis=1)
    assert ratio.max() <= L * (1 + 1e-9)


def test_activation_at_kink_is_zero(ident):
    assert fixpoint.activation(ident, np.zeros(2), np.array([0.0, 1.0])).tolist() == [0.0, 1.0]
