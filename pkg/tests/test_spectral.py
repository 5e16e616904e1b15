import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flatreg.errors import DomainError, NonSymmetric, StepTooLarge
from flatreg.spectral import (LEMMAS, check_symmetric, contraction_report, eig_sym, projector_onto_range,
                              spectral_apply)


def sym_matrices(max_d=6):
    return st.integers(1, max_d).flatmap(
        lambda d: arrays(np.float64, (d, d), elements=st.floats(-10, 10, allow_nan=False, width=64))
    ).map(lambda A: (A + A.T) / 2)


def test_eig_diag_sorted_descending():
    s = eig_sym(np.diag([1.0, 2.0]))
    np.testing.assert_allclose(s.eigenvalues, [2.0, 1.0])
    np.testing.assert_allclose(np.abs(s.basis), [[0, 1], [1, 0]], atol=1e-15)


def test_eig_identity():
    np.testing.assert_allclose(eig_sym(np.eye(3)).eigenvalues, [1, 1, 1])


def test_eig_two_by_two_hand_values():
    s = eig_sym(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(s.eigenvalues, [3.0, 1.0], atol=1e-15)
    r = 1 / np.sqrt(2)
    assert abs(abs(s.basis[:, 0] @ [r, r]) - 1) < 1e-14
    assert abs(abs(s.basis[:, 1] @ [r, -r]) - 1) < 1e-14


def test_nonsymmetric_rejected():
    with pytest.raises(NonSymmetric):
        eig_sym(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(NonSymmetric):
        check_symmetric(np.ones((2, 3)))


def test_symmetry_tolerance_is_relative():
    M = np.array([[1e6, 1.0], [1.0 + 1e-7, 1.0]])
    check_symmetric(M)  # 1e-7 <= 1e-12 * |M|_F


@given(sym_matrices())
def test_spectrum_invariants(M):
    s = eig_sym(M)
    nrm = max(1.0, np.linalg.norm(M))
    assert np.linalg.norm(s.reconstruct() - M) <= 1e-9 * nrm
    assert np.linalg.norm(s.basis.T @ s.basis - np.eye(M.shape[0])) <= 1e-10
    assert np.all(np.diff(s.eigenvalues) <= 0)


@given(sym_matrices())
def test_spectral_apply_identity(M):
    assert np.linalg.norm(spectral_apply(M, lambda x: x) - M) <= 1e-10 * max(1.0, np.linalg.norm(M))


@given(sym_matrices())
def test_spectral_apply_composition(M):
    h1 = np.tanh
    h2 = lambda x: x ** 2 + 1
    both = spectral_apply(M, lambda x: h1(h2(x)))
    nested = spectral_apply(spectral_apply(M, h2), h1)
    assert np.max(np.abs(both - nested)) <= 1e-9


def test_spectral_apply_examples():
    np.testing.assert_allclose(spectral_apply(np.diag([1.0, 4.0]), np.sqrt), np.diag([1.0, 2.0]))
    eta = 0.1
    out = spectral_apply(np.zeros((2, 2)), lambda x: -np.log1p(-eta * x / 2) / eta)
    np.testing.assert_array_equal(out, np.zeros((2, 2)))
    out = spectral_apply(np.diag([1.0, 0.5]), lambda x: 1 / (2 - 0.1 * x))
    np.testing.assert_allclose(np.diag(out), [1 / 1.9, 1 / 1.95], rtol=1e-14)
    np.testing.assert_allclose(np.diag(out), [0.5263157894736842, 0.5128205128205128], rtol=1e-14)


def test_spectral_apply_domain_error():
    with pytest.raises(DomainError):
        spectral_apply(np.diag([1.0, -1.0]), np.log)


def test_projector_examples():
    np.testing.assert_allclose(projector_onto_range(np.diag([1.0, 0.0])), np.diag([1.0, 0.0]))
    np.testing.assert_allclose(projector_onto_range(np.diag([1.0, 1e-14]), 1e-10), np.diag([1.0, 0.0]))
    g = np.array([1.0, 1.0]) / np.sqrt(2)
    np.testing.assert_allclose(projector_onto_range(np.outer(g, g)), np.outer(g, g), atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_projector_idempotent_symmetric(d, r, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((d, r))
    P = projector_onto_range(B @ B.T)
    assert np.max(np.abs(P @ P - P)) <= 1e-10
    assert np.max(np.abs(P - P.T)) <= 1e-10
    assert round(np.trace(P)) == min(d, r)


def test_contraction_scalar_example():
    rep = contraction_report(np.eye(1), 0.1, 0.1, 10, [np.ones(1)])
    c = rep.checks["G"]
    assert abs(c.measured[9] - 0.9 ** 10) < 1e-15
    assert abs(c.bound[9] - 10.0) < 1e-12
    assert rep.passed


def test_contraction_zero_matrix_trivial():
    rep = contraction_report(np.zeros((3, 3)), 0.1, 0.1, 50, [np.zeros(3)])
    assert rep.passed
    for c in rep.checks.values():
        assert np.all(c.measured == 0)


def test_contraction_random_sign_probes():
    rng = np.random.default_rng(8)
    d = n = 8
    P = rng.choice([-1.0, 1.0], size=(n, d)) / np.sqrt(d)
    G = P.T @ P / n
    eta = 1.9 / np.linalg.eigvalsh(G)[-1]
    rep = contraction_report(G, eta, 0.1, 1000, P)
    assert set(rep.checks) == set(LEMMAS)
    assert rep.passed, {k: c.violations for k, c in rep.checks.items()}


def test_contraction_step_too_large():
    with pytest.raises(StepTooLarge):
        contraction_report(np.eye(2), 1.95, 0.1, 10, [np.ones(2)])


@given(st.integers(1, 8), st.integers(1, 8), st.floats(0.05, 1.0), st.floats(0.05, 0.9),
       st.integers(0, 2**31 - 1))
def test_contraction_lemmas_fuzz(d, n, frac, nu, seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((n, d))
    G = P.T @ P / n
    eta = frac * (2 - nu) / np.linalg.eigvalsh(G)[-1]
    assert contraction_report(G, eta, nu, 300, P).violations == 0
