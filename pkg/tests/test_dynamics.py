import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatreg import modelzoo as mz
from flatreg import objective as obj
from flatreg.dynamics import (DIAG_COLUMNS, HyperParams, NoiseRecord, make_rng, noise_stream, phi_step, run,
                              run_phi, step_gaussian_cov, step_heavy_ball, step_label_noise, step_label_smoothing)
from flatreg.io import read_csv
from flatreg.regularizer import RegConfig

N_MC = 100_000


def qp(seed=0, n=6, d=4):
    rng = np.random.default_rng(seed)
    m, ds = mz.make_quad_param_regression(rng.standard_normal((n, d)) / np.sqrt(d), rng.uniform(0.5, 1.5, d))
    return obj.regression_bundle(m, ds), m.reference


def mc_steps(step, theta, draws, rng):
    out = np.empty((draws, theta.size))
    for j in range(draws):
        out[j] = step(theta, rng)[0] - theta
    return out


def within_3se(samples, target):
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    return np.all(np.abs(mean - target) <= 3 * se + 1e-15)


def test_hyperparams_validation():
    for bad in (dict(eta=0.0), dict(eta=0.1, B=0), dict(eta=0.1, beta=1.0), dict(eta=0.1, T=-1),
                dict(eta=0.1, sigma=-1.0), dict(eta=0.1, noise_kind="bogus"),
                dict(eta=0.1, noise_kind="label-flip", p=0.0)):
        with pytest.raises(ValueError):
            HyperParams(**bad)
    hp = HyperParams(eta=0.1, sigma=0.5, B=5, beta=0.9)
    assert hp.lam == pytest.approx(0.05)
    assert hp.reg_config().lam == hp.lam


def test_full_batch_noiseless_step():
    b, ref = qp()
    th = ref + 0.1
    hp = HyperParams(eta=0.05, B=b.n)
    new, _ = step_label_noise(b, th, hp, NoiseRecord(np.arange(b.n), np.zeros(b.n)))
    np.testing.assert_allclose(new, th - 0.05 * obj.grad(b, th), rtol=1e-14, atol=1e-16)


def test_quadratic_minimizer_fixed():
    b = obj.regression_bundle(*mz.make_quadratic(np.diag([1.0, 2.0])))
    new, _ = step_label_noise(b, np.zeros(2), HyperParams(eta=0.1, B=2), make_rng(0))
    np.testing.assert_array_equal(new, np.zeros(2))


def test_label_noise_unbiased():
    b, ref = qp(1)
    th = ref + 0.2
    hp = HyperParams(eta=0.05, sigma=0.5, B=2)
    s = mc_steps(lambda t, r: step_label_noise(b, t, hp, r), th, N_MC, make_rng(1))
    assert within_3se(s, -hp.eta * obj.grad(b, th))


def test_label_noise_covariance_at_interpolation():
    b, ref = qp(2)
    hp = HyperParams(eta=0.05, sigma=0.5, B=2)
    s = mc_steps(lambda t, r: step_label_noise(b, t, hp, r), ref, N_MC, make_rng(2))
    C = s.T @ s / s.shape[0]
    target = hp.eta * hp.lam * obj.gauss_newton(b, ref)
    assert np.linalg.norm(C - target) <= 0.05 * np.linalg.norm(target)


def cls_bundle(kind, p, n=4):
    c = obj.loss_constants(kind, p).c
    m, _ = mz.make_quadratic(np.eye(n), b=np.full(n, c))
    y = np.array([1.0, -1.0, 1.0, -1.0])[:n]
    # outputs y_i c give margins exactly c
    m2, _ = mz.make_quadratic(np.eye(n), b=y * c)
    return obj.classification_bundle(m2, mz.Dataset(y), kind, p)


@pytest.mark.parametrize("kind", ["logistic", "square"])
def test_label_smoothing_zero_mean_at_c(kind):
    b = cls_bundle(kind, 0.2)
    hp = HyperParams(eta=0.1, B=1, p=0.2, noise_kind="label-flip")
    s = mc_steps(lambda t, r: step_label_smoothing(b, t, hp, r), np.zeros(b.d), N_MC, make_rng(3))
    assert within_3se(s, np.zeros(b.d))
    # per-sample second moment in f units: eta^2 sigma^2 |grad f_i|^2 / n summed over samples
    g = np.sqrt(b.d) * np.ones(1)
    m2 = float(np.mean(np.sum(s * s, axis=1))) / (hp.eta ** 2 * g[0] ** 2)
    se = np.std(np.sum(s * s, axis=1), ddof=1) / np.sqrt(N_MC) / (hp.eta ** 2 * g[0] ** 2)
    assert abs(m2 - b.constants.sigma2) <= 3 * se + 1e-12


def test_label_smoothing_without_flips_is_plain_sgd():
    b = cls_bundle("exponential", 0.3)
    th = np.array([0.1, -0.2, 0.3, 0.0])
    hp = HyperParams(eta=0.1, B=2, p=0.3, noise_kind="label-flip")
    idx = np.array([0, 3])
    new, _ = step_label_smoothing(b, th, hp, NoiseRecord(idx, np.ones(2)))
    y = b.dataset.targets[idx]
    f = b.model.values(th, idx)
    coef = y * obj.margin_loss("exponential", y * f, 1)
    np.testing.assert_allclose(new, th - 0.1 * coef @ b.model.jacobian(th, idx) / 2, rtol=1e-14)


def test_label_smoothing_rejects_mismatch():
    b = cls_bundle("logistic", 0.2)
    with pytest.raises(ValueError):
        step_label_smoothing(b, np.zeros(4), HyperParams(eta=0.1, p=0.3, noise_kind="label-flip"), make_rng(0))
    breg, ref = qp()
    with pytest.raises(ValueError):
        step_label_smoothing(breg, ref, HyperParams(eta=0.1, noise_kind="label-flip"), make_rng(0))


def test_gaussian_cov_zero_is_gd():
    b, ref = qp(3)
    th = ref + 0.1
    hp = HyperParams(eta=0.05, sigma=0.3, noise_kind="gaussian-cov")
    new, _ = step_gaussian_cov(b, th, hp, lambda t: np.zeros((b.d, b.d)), make_rng(0))
    np.testing.assert_allclose(new, th - hp.eta * obj.grad(b, th), rtol=1e-15)


def test_gaussian_cov_covariance():
    b, ref = qp(4)
    A = np.random.default_rng(0).standard_normal((b.d, b.d))
    Sig = A @ A.T
    hp = HyperParams(eta=0.05, sigma=0.4, B=2, noise_kind="gaussian-cov")
    s = mc_steps(lambda t, r: step_gaussian_cov(b, t, hp, lambda _: Sig, r), ref, N_MC, make_rng(4))
    C = np.cov(s.T)
    target = hp.eta * hp.lam * Sig
    assert np.linalg.norm(C - target) <= 0.05 * np.linalg.norm(target)


def test_gaussian_cov_matches_gaussian_label_second_moments():
    b, ref = qp(5)
    G = obj.gauss_newton(b, ref)
    hpg = HyperParams(eta=0.05, sigma=0.4, B=b.n, noise_kind="gaussian-cov")
    hpl = HyperParams(eta=0.05, sigma=0.4, B=b.n, noise_kind="gaussian-label")
    a = mc_steps(lambda t, r: step_gaussian_cov(b, t, hpg, lambda _: G, r), ref, N_MC // 2, make_rng(5))
    c = mc_steps(lambda t, r: step_label_noise(b, t, hpl, r), ref, N_MC // 2, make_rng(6))
    Ca, Cc = a.T @ a / a.shape[0], c.T @ c / c.shape[0]
    target = hpg.eta * hpg.lam * G
    assert np.linalg.norm(Ca - target) <= 0.05 * np.linalg.norm(target)
    assert np.linalg.norm(Cc - target) <= 0.05 * np.linalg.norm(target)


def test_gaussian_cov_not_psd():
    from flatreg.errors import NotPSD
    b, ref = qp()
    with pytest.raises(NotPSD):
        step_gaussian_cov(b, ref, HyperParams(eta=0.1, noise_kind="gaussian-cov"),
                          lambda _: -np.eye(b.d), make_rng(0))


def test_heavy_ball_beta_zero_identity():
    b, ref = qp()
    th = ref + 0.1
    hp = HyperParams(eta=0.05, sigma=0.5, B=2)
    rec = NoiseRecord(np.array([1, 3]), np.array([0.5, -0.5]))
    plain, _ = step_label_noise(b, th, hp, rec)
    hb, _ = step_heavy_ball(lambda t, r: step_label_noise(b, t, hp, r), th, th - 1.0, hp, rec)
    np.testing.assert_array_equal(plain, hb)


@pytest.mark.parametrize("beta", [0.0, 0.5, 0.9])
def test_heavy_ball_quadratic_convergence(beta):
    H = np.diag([3.0, 1.0, 0.2])
    b = obj.regression_bundle(*mz.make_quadratic(H))
    eta = 0.95 * 2 * (1 + beta) / 3.0
    # full-batch heavy ball: the deterministic map with no regularizer
    path = run_phi(b, np.ones(3), RegConfig(eta, 0.0, beta=beta), 3000)
    assert np.linalg.norm(path[-1]) < 1e-3


def test_heavy_ball_diverges_beyond_edge():
    H = np.diag([3.0])
    b = obj.regression_bundle(*mz.make_quadratic(H))
    path = run_phi(b, np.ones(1), RegConfig(1.05 * 2 * 1.5 / 3.0, 0.0, beta=0.5), 200)
    assert np.linalg.norm(path[-1]) > 1.0


def test_heavy_ball_constant_gradient_velocity():
    g = np.array([1.0, -2.0])
    hp = HyperParams(eta=0.1, beta=0.8)
    step = lambda t, r: (t - hp.eta * g, None)
    prev = th = np.zeros(2)
    for _ in range(400):
        new, _ = step_heavy_ball(step, th, prev, hp, None)
        prev, th = th, new
    np.testing.assert_allclose(th - prev, -hp.eta * g / (1 - hp.beta), rtol=1e-12)


def test_run_zero_steps():
    b, ref = qp()
    tr = run(b, ref, HyperParams(eta=0.1, T=0))
    assert len(tr) == 1
    np.testing.assert_array_equal(tr.iterates[0], ref)
    assert set(tr.diagnostics) == set(DIAG_COLUMNS)


def test_run_deterministic_and_replayable(tmp_path):
    b, ref = qp(6)
    hp = HyperParams(eta=0.05, sigma=0.5, B=2, T=300, seed=9)
    a = run(b, ref + 0.1, hp, 7, keep_noise=True)
    c = run(b, ref + 0.1, hp, 7)
    np.testing.assert_array_equal(a.iterates, c.iterates)
    r = run(b, ref + 0.1, hp, 7, replay=a.noise_log)
    np.testing.assert_array_equal(a.iterates, r.iterates)
    assert list(a.steps[:3]) == [0, 7, 14] and a.steps[-1] == 300
    other = run(b, ref + 0.1, hp, 7, replica=1)
    assert not np.array_equal(a.iterates, other.iterates)
    p = a.to_csv(tmp_path / "t.csv", include_theta=True)
    header, data = read_csv(p)
    assert header[:6] == ["step", *DIAG_COLUMNS]
    np.testing.assert_array_equal(data[:, 6:], a.iterates)
    assert p.read_bytes() == a.to_csv(tmp_path / "u.csv", include_theta=True).read_bytes()


def test_run_replay_too_short():
    b, ref = qp()
    a = run(b, ref, HyperParams(eta=0.05, sigma=0.5, T=5), keep_noise=True)
    with pytest.raises(ValueError):
        run(b, ref, HyperParams(eta=0.05, sigma=0.5, T=6), replay=a.noise_log)


def test_noise_stream_matches_run():
    b, ref = qp(7)
    hp = HyperParams(eta=0.05, sigma=0.5, B=3, T=50, seed=4)
    st_ = noise_stream(b, hp, replica=2)
    recs = [st_.next() for _ in range(50)]
    a = run(b, ref, hp, 1, replay=recs, diagnostics=False)
    c = run(b, ref, hp, 1, replica=2, diagnostics=False)
    np.testing.assert_array_equal(a.iterates, c.iterates)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_minibatch_sgd_stuck_at_interpolation(seed, B):
    b, ref = qp(seed % 1000)
    hp = HyperParams(eta=0.1, B=B, T=200, seed=seed, noise_kind="none")
    tr = run(b, ref, hp, 1, diagnostics=False)
    assert np.max(np.linalg.norm(tr.iterates - ref, axis=1)) <= 1e-12


def test_phi_quadratic_matrix_power():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    b = obj.regression_bundle(*mz.make_quadratic(H))
    th0 = np.array([1.0, -1.0])
    path = run_phi(b, th0, RegConfig(0.1, 0.0), 25)
    for k in (0, 1, 10, 25):
        np.testing.assert_allclose(path[k], np.linalg.matrix_power(np.eye(2) - 0.1 * H, k) @ th0, atol=1e-14)


def test_phi_drifts_to_flatter_region():
    b, ref = qp(8)
    cfg = RegConfig(0.05, 0.01)
    path = run_phi(b, ref, cfg, 50)
    assert np.trace(obj.hessian(b, path[-1])) < np.trace(obj.hessian(b, ref))
    np.testing.assert_allclose(path[1], phi_step(b, ref, cfg), rtol=1e-15)


def test_phi_fixed_point():
    b = obj.regression_bundle(*mz.make_quadratic(np.diag([1.0, 2.0])))
    np.testing.assert_array_equal(phi_step(b, np.zeros(2), RegConfig(0.1, 0.3)), np.zeros(2))


def test_phi_momentum_zero_initial_velocity():
    H = np.diag([1.0])
    b = obj.regression_bundle(*mz.make_quadratic(H))
    cfg = RegConfig(0.1, 0.0, beta=0.5)
    path = run_phi(b, np.ones(1), cfg, 3)
    x0 = 1.0
    x1 = x0 - 0.1 * x0
    x2 = x1 - 0.1 * x1 + 0.5 * (x1 - x0)
    np.testing.assert_allclose(path[:3, 0], [x0, x1, x2], rtol=1e-15)
