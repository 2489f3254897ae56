import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowfilt.dirac import ParticleSet
from flowfilt.distance import (
    DistanceParams,
    distance,
    gradient,
    gradient_and_hessian,
    hessian,
    hessian_recursive,
)
from flowfilt.errors import CoincidenceError, ContractError

from oracles import distance_ref, gradient_ref

P = DistanceParams()


def instance(seed, L=None, M=None, N=None):
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(1, 4))
    L = L or int(rng.integers(1, 9))
    M = M or int(rng.integers(1, 9))
    approx = ParticleSet(rng.normal(size=(L, N)), rng.dirichlet(np.ones(L)))
    ref = ParticleSet(rng.normal(size=(M, N)), rng.dirichlet(np.ones(M)))
    return approx, ref


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_params_default_k2():
    assert DistanceParams().K2 == 196.0
    assert DistanceParams(K1=10).K2 == 16.0
    with pytest.raises(ContractError):
        DistanceParams(K1=2.0)


def test_distance_self_is_zero():
    approx, _ = instance(1)
    assert distance(approx, approx).total == pytest.approx(0.0, abs=1e-12)


def test_distance_two_singletons():
    a = ParticleSet([[0.0]], [1.0])
    b = ParticleSet([[1.0]], [1.0])
    assert distance(a, b).total == 100.0


@pytest.mark.parametrize("seed", range(10))
def test_distance_matches_loop_oracle(seed):
    a, r = instance(seed)
    ref = distance_ref(a.locations.tolist(), a.weights.tolist(), r.locations.tolist(), r.weights.tolist())
    assert distance(a, r).total == pytest.approx(ref, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_loop_oracle(seed):
    a, r = instance(seed)
    ref = gradient_ref(a.locations.tolist(), a.weights.tolist(), r.locations.tolist(), r.weights.tolist())
    np.testing.assert_allclose(gradient(a, r), ref, rtol=1e-12, atol=1e-12)


def test_dimension_mismatch():
    a, _ = instance(0, N=2)
    _, r = instance(0, N=3)
    for fn in (distance, gradient, hessian):
        with pytest.raises(ContractError):
            fn(a, r)


def test_gradient_single_offset():
    a = ParticleSet([[1.0, 0.0]], [1.0])
    r = ParticleSet([[0.0, 0.0]], [1.0])
    np.testing.assert_array_equal(gradient(a, r), [196.0, 0.0])


def test_gradient_zero_at_perfect_fit():
    rng = np.random.default_rng(5)
    s = ParticleSet.equal(rng.normal(size=(12, 3)))
    assert np.all(gradient(s, s) == 0.0)


def test_gradient_fd_example():
    a, r = instance(11, L=3, M=5, N=2)
    h = 1e-6
    x = a.locations.ravel()
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        hi = distance(ParticleSet((x + e).reshape(3, 2), a.weights), r).total
        lo = distance(ParticleSet((x - e).reshape(3, 2), a.weights), r).total
        fd[i] = (hi - lo) / (2 * h)
    assert rel(gradient(a, r), fd) <= 1e-5


def test_hessian_fd_example():
    a, r = instance(12, L=3, M=4, N=2)
    h = 1e-6
    x = a.locations.ravel()
    fd = np.empty((x.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[:, i] = (gradient(ParticleSet((x + e).reshape(3, 2), a.weights), r)
                    - gradient(ParticleSet((x - e).reshape(3, 2), a.weights), r)) / (2 * h)
    assert rel(hessian(a, r), fd) <= 1e-4


def test_hessian_single_particle_block():
    a = ParticleSet([[0.3, -0.2]], [1.0])
    r = ParticleSet([[0.0, 0.0], [1.0, 1.0]], [0.25, 0.75])
    # block formula by hand, checked against differences of the loop gradient
    frozen = [[193.1597293729846, -1.688322040653647], [-1.688322040653647, 190.9755922665677]]
    np.testing.assert_allclose(hessian(a, r), frozen, rtol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_hessian_symmetric_bit_exact(seed):
    a, r = instance(seed, L=6)
    h = hessian(a, r)
    assert np.array_equal(h, h.T)
    hr = hessian_recursive(ParticleSet.equal(a.locations))
    assert np.array_equal(hr, hr.T)


def test_hessian_recursive_two_particles():
    s = ParticleSet.equal([[0.0, 0.0], [1.0, 2.0]])
    h = hessian_recursive(s)
    np.testing.assert_array_equal(h[:2, :2], 49.0 * np.eye(2))
    np.testing.assert_array_equal(h[2:, 2:], 49.0 * np.eye(2))


@pytest.mark.parametrize("seed", range(5))
def test_hessian_recursive_is_hessian_against_itself(seed):
    rng = np.random.default_rng(seed)
    s = ParticleSet.equal(rng.normal(size=(7, 2)))
    full = hessian(s, s)
    assert np.max(np.abs(full - hessian_recursive(s))) <= 1e-10 * np.max(np.abs(full))


def test_hessian_coincidence():
    a = ParticleSet.equal([[0.0], [0.0], [1.0]])
    r = ParticleSet.equal([[0.5]])
    with pytest.raises(CoincidenceError):
        hessian(a, r)
    h = hessian(a, r, jitter=True)
    assert np.all(np.isfinite(h))


def test_gradient_and_hessian_agree_with_separate_calls():
    a, r = instance(21, L=6, M=8, N=2)
    g, h = gradient_and_hessian(a, r)
    np.testing.assert_allclose(g, gradient(a, r), rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(h, hessian(a, r), rtol=1e-13, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_decomposition_identity(seed):
    a, r = instance(seed)
    d = distance(a, r)
    rebuilt = d.term_ref_ref - 2 * d.term_cross + d.term_approx + P.K1 * d.term_mean
    assert abs(rebuilt - d.total) <= 1e-12 * max(1.0, abs(d.total))
    assert d.term_mean >= 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_translation_invariance(seed, c1, c2):
    a, r = instance(seed, N=2)
    c = np.array([c1, c2])
    moved = distance(ParticleSet(a.locations + c, a.weights), ParticleSet(r.locations + c, r.weights)).total
    base = distance(a, r).total
    assert abs(moved - base) <= 1e-10 * max(1.0, abs(base))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cross_term_symmetry(seed):
    a, r = instance(seed)
    assert distance(a, r).term_cross == pytest.approx(distance(r, a).term_cross, rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_directional_derivative(seed):
    a, r = instance(seed)
    rng = np.random.default_rng(seed + 1)
    u = rng.normal(size=a.locations.size)
    u /= np.linalg.norm(u)
    h = 1e-6
    x = a.locations.ravel()

    def at(v):
        return ParticleSet(v.reshape(a.locations.shape), a.weights)

    fd = (distance(at(x + h * u), r).total - distance(at(x - h * u), r).total) / (2 * h)
    proj = gradient(a, r) @ u
    assert abs(fd - proj) <= 1e-5 * max(abs(proj), np.linalg.norm(gradient(a, r)), 1e-8)

    fd_g = (gradient(at(x + h * u), r) - gradient(at(x - h * u), r)) / (2 * h)
    hu = hessian(a, r) @ u
    assert np.max(np.abs(fd_g - hu)) <= 1e-4 * max(np.max(np.abs(hu)), 1e-8)
