from dataclasses import replace

import numpy as np
import pytest

from spipf.errors import DegenerateEnsembleError
from spipf.filter import (
    FilterConfig,
    GaussianPrior,
    effective_ratio,
    initial_ensemble,
    normalize_log,
    run,
    step_window,
    vote_and_estimate,
)
from spipf.hybrid import HybridState
from spipf.systems import bouncing_ball, linear_1d, simulate_truth, slip


def _bb_case(seed=0, T=0.6):
    bb = bouncing_ball()
    rng = np.random.default_rng(seed)
    tr = simulate_truth(bb, HybridState(0, np.array([1.0, 0.0])), T, 0.01, rng)
    prior = GaussianPrior.single(0, [1.0, 0.0], np.diag([0.05 ** 2] * 2))
    return bb, tr, prior


def test_normalize_and_effective_ratio_bounds():
    rng = np.random.default_rng(0)
    for K in (1, 5, 50):
        logw = normalize_log(rng.normal(size=K) * 5)
        assert np.exp(logw).sum() == pytest.approx(1.0, abs=1e-12)
        assert 1.0 / K - 1e-12 <= effective_ratio(logw) <= 1.0 + 1e-12
    assert effective_ratio(normalize_log(np.zeros(7))) == pytest.approx(1.0)
    one_hot = normalize_log(np.array([0.0, -np.inf, -np.inf, -np.inf]))
    assert effective_ratio(one_hot) == pytest.approx(0.25)
    with pytest.raises(DegenerateEnsembleError):
        normalize_log(np.full(3, -np.inf))


def test_vote_picks_heaviest_mode_and_renormalises():
    bb = bouncing_ball()
    X = np.array([[1.0, 0.0], [3.0, 0.0], [10.0, 0.0]])
    modes = np.array([0, 0, 1])
    logw = np.log([0.2, 0.2, 0.6])
    est = vote_and_estimate(bb, X, modes, logw)
    assert est.mode_hat == 1 and est.x_hat[0] == pytest.approx(10.0)
    est = vote_and_estimate(bb, X, modes, np.log([0.3, 0.1, 0.6 - 1e-9]))
    assert est.mode_hat == 1
    est = vote_and_estimate(bb, X, modes, np.log([0.45, 0.15, 0.4]))
    assert est.mode_hat == 0 and est.x_hat[0] == pytest.approx(0.75 * 1 + 0.25 * 3)
    tie = vote_and_estimate(bb, X[:2], np.array([0, 1]), np.log([0.5, 0.5]))
    assert tie.mode_hat == 0


def test_prior_sampling_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[0.04, 0.01], [0.01, 0.09]])
    prior = GaussianPrior((0, 1), (0.25, 0.75), (mean, mean + 5), (cov, cov))
    X, modes = prior.sample(np.random.default_rng(1), 40_000, 3)
    assert abs(np.mean(modes == 1) - 0.75) < 0.01
    sel = X[modes == 0, :2]
    np.testing.assert_allclose(sel.mean(0), mean, atol=0.01)
    np.testing.assert_allclose(np.cov(sel.T), cov, atol=0.004)
    assert np.all(X[:, 2] == 0)


def test_noiseless_point_mass_zero_control_tracks_truth():
    bb = bouncing_ball(noise_scale=1e-12)
    x0 = np.array([1.0, 0.0])
    tr = simulate_truth(bb, HybridState(0, x0), 0.6, 0.01, np.random.default_rng(0),
                        process_noise=False, measurement_noise=False)
    cfg = FilterConfig(K=8, H=10, epsilon=1e-12, prior=GaussianPrior.single(0, x0, np.zeros((2, 2))),
                       zero_control=True)
    recs = run(bb, tr.measurements, cfg)
    assert len(recs) == len(tr.measurements)
    for j, r in enumerate(recs, 1):
        assert r.mode_hat == tr.modes[j]
        np.testing.assert_allclose(r.x_hat, tr.states[j], atol=1e-5)


def test_records_have_valid_esse_and_grid():
    bb, tr, prior = _bb_case()
    recs = run(bb, tr.measurements, FilterConfig(K=20, prior=prior, seed=3))
    np.testing.assert_allclose([r.t for r in recs], tr.times[1:])
    for r in recs:
        assert 1 / 20 - 1e-12 <= r.esse <= 1 + 1e-12
        assert r.mode_hat in (0, 1)


def test_seeded_runs_are_bit_identical_across_thread_counts():
    bb, tr, prior = _bb_case(T=0.55)
    cfg = FilterConfig(K=24, prior=prior, seed=11)
    a = run(bb, tr.measurements, cfg)
    b = run(bb, tr.measurements, replace(cfg, threads=4))
    c = run(bb, tr.measurements, cfg)
    for x, y, z in zip(a, b, c):
        assert x.mode_hat == y.mode_hat == z.mode_hat
        assert x.esse == y.esse == z.esse
        np.testing.assert_array_equal(x.x_hat, y.x_hat)
        np.testing.assert_array_equal(x.x_hat, z.x_hat)


def test_different_seeds_differ():
    bb, tr, prior = _bb_case(T=0.2)
    a = run(bb, tr.measurements, FilterConfig(K=10, prior=prior, seed=1))
    b = run(bb, tr.measurements, FilterConfig(K=10, prior=prior, seed=2))
    assert any(not np.array_equal(x.x_hat, y.x_hat) for x, y in zip(a, b))


def test_window_weights_normalised_and_resampling_flag():
    bb, tr, prior = _bb_case()
    cfg = FilterConfig(K=30, prior=prior, seed=5, gamma_thres=1.0)
    system = replace(bb, noise_scale=cfg.epsilon)
    ens = initial_ensemble(system, cfg)
    ens2, snap = step_window(system, tr.measurements, (0, 10), ens, cfg)
    assert np.exp(ens2.log_w_filtered).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.exp(ens2.log_w_prior).sum() == pytest.approx(1.0, abs=1e-12)
    assert snap["resampled"] == (snap["gamma"] < 1.0)
    off = replace(cfg, resampling_enabled=False)
    _, snap = step_window(system, tr.measurements, (0, 10), ens, off)
    assert not snap["resampled"]


def test_prior_advances_only_once_the_window_is_full():
    bb, tr, prior = _bb_case()
    cfg = FilterConfig(K=10, H=5, prior=prior, seed=2, resampling_enabled=False)
    system = replace(bb, noise_scale=cfg.epsilon)
    ens = initial_ensemble(system, cfg)
    e1, _ = step_window(system, tr.measurements, (0, 3), ens, cfg)
    np.testing.assert_array_equal(e1.x, ens.x)
    e2, _ = step_window(system, tr.measurements, (0, 5), ens, cfg)
    assert not np.array_equal(e2.x, ens.x)


def test_slip_filter_runs_with_mixed_dimensions():
    sl = slip()
    x0 = np.array([0.0, 0.0, 2.05, 1.57, np.pi / 2])
    tr = simulate_truth(sl, HybridState(0, x0), 0.45, 0.001, np.random.default_rng(0))
    assert tr.transition_steps and tr.transition_steps[0][1:] == (0, 1)
    prior = GaussianPrior.single(0, x0, np.eye(5) * 1e-4)
    recs = run(sl, tr.measurements, FilterConfig(K=20, dt=0.001, epsilon=0.01, prior=prior,
                                                 resampling_enabled=False))
    assert {r.x_hat.size for r in recs} <= {4, 5}
    assert recs[-1].mode_hat == 1 and recs[-1].x_hat.size == 4


def test_config_validation_and_dt_mismatch():
    with pytest.raises(ValueError):
        FilterConfig(K=0)
    with pytest.raises(ValueError):
        FilterConfig(gamma_thres=0.0)
    with pytest.raises(ValueError):
        FilterConfig(resample_weights="other")
    bb, tr, prior = _bb_case(T=0.1)
    with pytest.raises(ValueError):
        run(bb, tr.measurements, FilterConfig(dt=0.02, prior=prior))
    with pytest.raises(ValueError):
        run(bb, tr.measurements, FilterConfig())


def test_linear_filter_tracks_kalman_mean():
    lin = linear_1d(sigma_B=0.1)
    tr = simulate_truth(lin, HybridState(0, np.array([1.0])), 0.5, 0.01, np.random.default_rng(0))
    prior = GaussianPrior.single(0, [1.0], [[0.25]])
    recs = run(lin, tr.measurements, FilterConfig(K=200, epsilon=1.0, prior=prior, seed=0))
    # scalar Kalman filter on the same discretisation
    m, P = 1.0, 0.25
    dev = []
    for i, r in enumerate(recs):
        z, R = tr.measurements.dY[i, 0] / 0.01, 0.01 / 0.01
        K = P / (P + R)
        m, P = m + K * (z - m), (1 - K) * P
        m, P = 0.99 * m, 0.99 ** 2 * P + 0.01
        dev.append(abs(r.x_hat[0] - m) / np.sqrt(P))
    assert np.mean(dev) < 0.15
