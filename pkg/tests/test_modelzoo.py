import numpy as np
import pytest
from hypothesis import given, strategies as st

from flatreg import modelzoo as mz
from flatreg import objective as obj
from flatreg.errors import NotPSD, TooLarge


def fd(fn, theta, h=1e-6):
    return np.stack([(fn(theta + h * e) - fn(theta - h * e)) / (2 * h) for e in np.eye(theta.size)], axis=-1)


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def zoo():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5, 4))
    H = rng.standard_normal((4, 4))
    yield mz.make_quadratic(H @ H.T)[0]
    yield mz.make_quad_param_regression(X, rng.uniform(0.5, 1.5, 4))[0]
    yield mz.make_redundant_quad_param()[0]
    yield mz.make_mlp([3, 4, 3], n_samples=6, seed=1)[0]
    yield mz.make_cycling_model()[0]
    yield mz.make_cycling_model(literal_f6=True)[0]


@pytest.mark.parametrize("model", list(zoo()), ids=lambda m: m.name)
def test_derivatives_match_finite_differences(model):
    rng = np.random.default_rng(1)
    for _ in range(20):
        i = int(rng.integers(model.sample_count))
        th = (model.reference if model.reference is not None else 0) + 0.5 * rng.standard_normal(model.param_dim)
        g = model.grad(i, th)
        assert rel(g, fd(lambda t: np.array(model.eval(i, t)), th)) <= 1e-6
        H = model.hess(i, th)
        assert np.max(np.abs(H - H.T)) <= 1e-10
        assert rel(H, fd(lambda t: model.grad(i, t), th)) <= 1e-5


@pytest.mark.parametrize("model", list(zoo()), ids=lambda m: m.name)
def test_batched_and_single_evaluators_agree(model):
    th = np.random.default_rng(2).standard_normal(model.param_dim)
    f, J, Hs = model.values(th), model.jacobian(th), model.hessians(th)
    for i in range(model.sample_count):
        assert model.eval(i, th) == pytest.approx(f[i], abs=1e-14)
        np.testing.assert_allclose(model.grad(i, th), J[i], atol=1e-14)
        np.testing.assert_allclose(model.hess(i, th), Hs[i], atol=1e-14)


def test_quadratic_examples():
    m, ds = mz.make_quadratic(np.eye(2))
    b = obj.regression_bundle(m, ds)
    assert obj.loss(b, np.array([1.0, 0.0])) == pytest.approx(0.5, abs=1e-15)
    m, ds = mz.make_quadratic(np.diag([2.0, 0.0]))
    b = obj.regression_bundle(m, ds)
    assert obj.loss(b, np.ones(2)) == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(obj.grad(b, np.ones(2)), [2.0, 0.0], atol=1e-14)
    m, ds = mz.make_quadratic(np.array([[2.0, 1.0], [1.0, 2.0]]))
    b = obj.regression_bundle(m, ds)
    assert obj.loss(b, np.array([1.0, -1.0])) == pytest.approx(1.0, abs=1e-14)


def test_quadratic_not_psd():
    with pytest.raises(NotPSD):
        mz.make_quadratic(np.diag([1.0, -1e-6]))


@given(st.integers(0, 2**31 - 1))
def test_quadratic_hessian_constant(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    H = A @ A.T
    m, ds = mz.make_quadratic(H, rng.standard_normal(3))
    b = obj.regression_bundle(m, ds)
    for _ in range(3):
        th = 3 * rng.standard_normal(3)
        assert np.max(np.abs(obj.hessian(b, th) - H)) <= 1e-10
        assert np.max(np.abs(obj.third_form(b, th, rng.standard_normal(3)))) <= 1e-8


def test_quad_param_examples():
    X = np.array([[1.0, 1.0]])
    w = np.array([1.0, 0.0])
    m, ds = mz.make_quad_param_regression(X, w)
    th = np.ones(2)
    assert m.eval(0, th) == 2.0
    assert ds.targets[0] == 1.0
    assert obj.loss(obj.regression_bundle(m, ds), th) == 0.5
    np.testing.assert_array_equal(m.grad(0, np.zeros(2)), [0.0, 0.0])
    np.testing.assert_array_equal(m.hess(0, np.zeros(2)), 2 * np.diag(X[0]))
    np.testing.assert_array_equal(m.grad(0, th), 2 * th * X[0])


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_quad_param_interpolates_at_sqrt_truth(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.uniform(0, 2, d)
    m, ds = mz.make_quad_param_regression(X, w)
    b = obj.regression_bundle(m, ds)
    assert obj.loss(b, np.sqrt(w)) <= 1e-28  # sqrt(w)**2 == w up to one rounding
    assert m.smoothness.rho_f == pytest.approx(2 * np.max(np.abs(X)))


def test_redundant_start_interpolates_and_is_sharp():
    m, ds, th0 = mz.make_redundant_quad_param(kappa=0.5)
    b = obj.regression_bundle(m, ds)
    assert obj.loss(b, th0) == 0.0
    # the same end-to-end map carried by the scaled copy is flatter
    p = m.params
    w = np.zeros(2 * p["m"])
    w[p["m"]:p["m"] + p["support"]] = 1.0 / p["kappa"]
    flat = np.sqrt(w)
    np.testing.assert_allclose(m.values(flat), ds.targets, atol=1e-12)
    # trace scales with kappa when the weight moves to the scaled copy
    assert np.trace(obj.hessian(b, flat)) < 0.55 * np.trace(obj.hessian(b, th0))


def test_mlp_zero_weights_identical_inputs():
    m, ds = mz.make_mlp([1, 1], n_samples=4, seed=0)
    f = m.values(np.zeros(m.param_dim))
    assert np.all(np.isfinite(f))
    np.testing.assert_allclose(f, f[0])


def test_mlp_budget():
    with pytest.raises(TooLarge):
        mz.make_mlp([20, 50, 50])


def test_mlp_reference_interpolates_and_is_reproducible():
    m1, d1 = mz.make_mlp([3, 5], seed=4)
    m2, d2 = mz.make_mlp([3, 5], seed=4)
    np.testing.assert_array_equal(d1.targets, d2.targets)
    assert obj.loss(obj.regression_bundle(m1, d1), m1.reference) == 0.0
    assert m1.smoothness.rho_f is None
    proxy = m1.measured_smoothness([m1.reference, m1.reference + 0.1])
    assert proxy.l_f > 0


def test_cycling_hand_values():
    m, ds = mz.make_cycling_model()
    assert m.param_dim == 6 and m.sample_count == 13
    np.testing.assert_array_equal(ds.targets, np.zeros(13))
    f = m.values(np.array([1.0, 0, 0, 0, 0, 0]))
    assert f[12] == 0 and f[8] == 0 and f[0] == -1 and f[1] == 1
    f0 = m.values(np.zeros(6))
    assert f0[12] == -1 and f0[0] == -1 and f0[1] == 1
    np.testing.assert_array_equal(f0[8:12], 0)
    th = np.array([0.3, -0.7, 1, 2, 3, 4])
    np.testing.assert_array_equal(m.grad(12, th), [0.6, -1.4, 0, 0, 0, 0])


def test_cycling_table_formulas():
    x, y, z1, z2, z3, z4 = th = np.array([0.3, -0.7, 0.2, -0.4, 0.9, 1.3])
    expected = [(1 - y) * z1 - 1, (1 - y) * z1 + 1, (1 + y) * z2 - 1, (1 + y) * z2 + 1,
                (1 - x) * z3 - 1, (1 - x) * z3 + 1, (1 + x) * z4 - 1, (1 + x) * z4 + 1,
                (1 - x) * z1, (1 + x) * z2, (1 + y) * z3, (1 - y) * z4, x * x + y * y - 1]
    m, _ = mz.make_cycling_model()
    np.testing.assert_allclose(m.values(th), expected, atol=1e-15)
    lit, _ = mz.make_cycling_model(literal_f6=True)
    expected[5] = (1 - x) * z4 + 1
    np.testing.assert_allclose(lit.values(th), expected, atol=1e-15)
