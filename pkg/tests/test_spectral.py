import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import jacobi_singular_values
from transject import tensor as T
from transject.optim import Adam
from transject.ortho import OrthogonalParam
from transject.spectral import (PreconditionError, approx_eigen, check_c1_lipschitz_bound,
                                check_linear_activation_bound, check_stochastic_eigenvalue, gram,
                                random_sigma, standardize, top_singular_value)
from transject.tensor import Tensor, backward


def test_gram_examples():
    assert np.array_equal(gram(Tensor(np.eye(3))).data, np.eye(3))
    assert np.array_equal(gram(Tensor([[1.0, 2.0]])).data, [[1, 2], [2, 4]])
    g = gram(Tensor(np.random.default_rng(0).normal(size=(7, 5)))).data
    assert np.abs(g - g.T).max() < 1e-12


def test_approx_eigen_examples():
    g = np.diag([3.0, 1.0, 2.0])
    s, err = approx_eigen(Tensor(g), Tensor(np.eye(3)))
    assert np.array_equal(s.data, [3, 1, 2]) and err.item() == 0.0
    # eigenbasis of [[2,1],[1,2]] is (1,1)/sqrt2, (1,-1)/sqrt2 with eigenvalues 3, 1
    q = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)
    s, err = approx_eigen(Tensor([[2.0, 1.0], [1.0, 2.0]]), Tensor(q))
    assert np.allclose(s.data, [3, 1], atol=1e-14) and err.item() < 1e-28


@given(st.integers(0, 10_000))
def test_recon_bounds_and_optimal_diagonal(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    g = x.T @ x
    q = OrthogonalParam(4, rng, 1.0).value()
    s, err = approx_eigen(Tensor(g), q)
    assert 0.0 <= err.item() <= (g * g).sum() + 1e-9
    # perturbing any diagonal entry away from diag(Q^T G Q) increases the error
    for i in range(4):
        for eps in (1e-3, -1e-3):
            s2 = s.data.copy()
            s2[i] += eps
            recon = q.data @ np.diag(s2) @ q.data.T
            assert ((g - recon) ** 2).sum() > err.item()


def test_approx_eigen_batched_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 4))
    q = OrthogonalParam(4, rng, 1.0).value()
    s, err = approx_eigen(gram(Tensor(x)), q)
    for b in range(3):
        sb, eb = approx_eigen(Tensor(x[b].T @ x[b]), q)
        assert np.allclose(s.data[b], sb.data) and np.isclose(err.data[b], eb.item())


def test_standardize_examples():
    assert np.allclose(standardize(Tensor([3.0, 1.0, 2.0])).data, [1, 0, 0.5])
    assert np.array_equal(standardize(Tensor([5.0, 5, 5])).data, [1, 1, 1])


@given(arrays(float, 7, elements=st.floats(-100, 100)))
def test_standardize_properties(v):
    out = standardize(Tensor(v)).data
    assert out.min() >= 0 and out.max() == 1.0
    if np.ptp(v) > 1e-9 * max(np.abs(v).max(), 1.0):
        assert out.min() == 0.0
    assert np.allclose(standardize(Tensor(out)).data, out, atol=1e-12)


def test_random_sigma():
    assert np.array_equal(random_sigma(8, 3), random_sigma(8, 3))
    s = random_sigma(8, 3)
    assert s.min() >= 0 and s.max() == 1.0
    assert np.array_equal(random_sigma(1, 0), [1.0])


def test_linear_activation_bound_examples():
    emp, s1 = check_linear_activation_bound(3 * np.eye(4))
    assert s1 == pytest.approx(3.0, abs=1e-12) and emp == pytest.approx(3.0, abs=1e-12)
    emp, s1 = check_linear_activation_bound(np.diag([1.0, 2.0]))
    assert s1 == pytest.approx(2.0, abs=1e-12) and emp <= 2.0


@pytest.mark.parametrize("seed", range(5))
def test_top_singular_value_matches_jacobi(seed):
    w = np.random.default_rng(seed).normal(size=(8, 8))
    assert abs(top_singular_value(w) - jacobi_singular_values(w)[0]) < 1e-6


def test_stochastic_eigenvalue():
    assert check_stochastic_eigenvalue(np.eye(3)) == pytest.approx(1.0, abs=1e-12)
    assert check_stochastic_eigenvalue(np.full((2, 2), 0.5)) == pytest.approx(1.0, abs=1e-12)
    m = np.random.default_rng(0).uniform(size=(10, 10))
    assert check_stochastic_eigenvalue(m / m.sum(axis=0)) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(PreconditionError):
        check_stochastic_eigenvalue(np.ones((3, 3)))


def test_c1_lipschitz_bound_elu_map():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 4)))
    f = lambda x: T.elu(T.matmul(T.reshape(x, (1, 4)), w))
    ratio, sup = check_c1_lipschitz_bound(f, rng.normal(size=4), rng.normal(size=4))
    assert ratio <= sup * (1 + 1e-6)


def test_basis_learns_eigenvectors():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 8))
    g = Tensor(x.T @ x)
    u = OrthogonalParam(8, rng, 1.0 / np.sqrt(8))
    opt = Adam({"u": u.raw}, lr=0.02)
    first = None
    for _ in range(500):
        opt.zero_grad()
        _, err = approx_eigen(g, u)
        first = err.item() if first is None else first
        backward(err)
        opt.step()
    with T.no_grad():
        final = approx_eigen(g, u)[1].item()
    assert final < 0.1 * first
