"""Reference estimators: multi-mode SIR, zero-control SPIPF and the salted Kalman filter."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import FilterFailureError, NumericalDivergenceError
from .filter import (
    Ensemble,
    EstimateRecord,
    FilterConfig,
    effective_ratio,
    initial_ensemble,
    normalize_log,
    run,
    vote_and_estimate,
)
from .hybrid import HybridState, HybridSystem, advance_batch, flow_jacobians, saltation_matrix, step
from .measurement import MeasurementPath

SIR_STREAM = 3
PSD_TOL = 1e-10


# ---------------------------------------------------------------------------
# salted Kalman filter

@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    mode: int
    t: float = 0.0
    aux: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))
        if self.aux is None:
            object.__setattr__(self, "aux", np.zeros(0))


def _clean_cov(P):
    P = 0.5 * (P + P.T)
    lam, V = np.linalg.eigh(P)
    if lam.min() < -PSD_TOL * max(1.0, abs(lam).max()):
        raise NumericalDivergenceError(f"covariance lost positive semi-definiteness (min eig {lam.min():.3e})")
    if lam.min() < 0:
        P = (V * np.clip(lam, 0.0, None)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def skf_update(system: HybridSystem, belief: GaussianBelief, dY_i, dt: float) -> GaussianBelief:
    """EKF update on the rate observation ``dY / dt`` with noise ``sigma_B^2 / dt``."""
    x, P, mode = belief.mean, belief.cov, belief.mode
    z = np.asarray(dY_i, dtype=float) / dt
    h = system.observe(mode, belief.t, x)
    H = system.observation_jac(mode, belief.t, x)
    R = system.obs_noise_sigma[mode] ** 2 / dt * np.eye(z.size)
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x_new = x + K @ (z - h)
    IKH = np.eye(x.size) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    return replace(belief, mean=x_new, cov=_clean_cov(P_new))


def skf_predict(system: HybridSystem, belief: GaussianBelief, dt: float) -> GaussianBelief:
    """Euler mean step with ``P' = A P A^T + eps sigma sigma^T dt``; ``Xi P Xi^T`` across a jump."""
    mode = system.modes[belief.mode]
    u = np.zeros(mode.control_dim)
    x = belief.mean
    aux = belief.aux if belief.aux.size == system.aux_dim else np.zeros(system.aux_dim)
    Ac, _ = flow_jacobians(mode, belief.t, x, u)
    A = np.eye(x.size) + Ac * dt
    S = np.asarray(mode.diffusion(belief.t, x), dtype=float)
    P = A @ belief.cov @ A.T + system.noise_scale * (S @ S.T) * dt
    s, ev = step(system, HybridState(belief.mode, x, belief.t, aux), u, dt, np.zeros(mode.noise_dim))
    if ev is not None:
        Xi = saltation_matrix(system, ev.transition, ev.t, ev.x_pre, u, aux=ev.aux_pre)
        P = Xi @ P @ Xi.T
    return GaussianBelief(s.x, _clean_cov(P), s.mode, s.t, s.aux)


def skf_step(system: HybridSystem, belief: GaussianBelief, dY_i, dt: float) -> GaussianBelief:
    """Condition on ``dY_i`` (generated at the belief's time) and predict one step."""
    return skf_predict(system, skf_update(system, belief, dY_i, dt), dt)


def run_skf(system: HybridSystem, meas: MeasurementPath, belief: GaussianBelief,
            epsilon: float = None) -> list:
    """One record per step ``j = 1 .. L`` (same alignment as :func:`spipf.filter.run`)."""
    if epsilon is not None:
        system = replace(system, noise_scale=epsilon)
    records = []
    b = belief
    for i in range(len(meas)):
        b = skf_step(system, b, meas.dY[i], meas.times[i + 1] - meas.times[i])
        records.append(EstimateRecord(float(meas.times[i + 1]), b.mean.copy(), b.mode, 1.0, b.aux.copy(),
                                      {"cov": b.cov.copy()}))
    return records


# ---------------------------------------------------------------------------
# multi-mode SIR

def _log_likelihood(system, meas, i, X, modes):
    dt = meas.times[i + 1] - meas.times[i]
    out = np.zeros(X.shape[0])
    for j, mode in enumerate(system.modes):
        idx = np.flatnonzero(modes == j)
        if idx.size == 0:
            continue
        h = system.observe(j, meas.times[i], X[idx, : mode.state_dim])
        sb = system.obs_noise_sigma[j]
        r = meas.dY[i] - h * dt
        out[idx] = -0.5 * np.sum(r * r, axis=-1) / (sb * sb * dt) - meas.obs_dim * np.log(sb)
    return out


def sir_multimode_step(system: HybridSystem, ens: Ensemble, meas: MeasurementPath, i: int,
                       config: FilterConfig, rng):
    """Weight by the likelihood of ``dY_i``, propagate uncontrolled, vote, resample.

    Returns ``(ensemble, estimate)`` where the estimate refers to ``t_{i+1}``.
    """
    K = ens.K
    dt = meas.times[i + 1] - meas.times[i]
    with np.errstate(invalid="ignore", over="ignore"):
        loglik = _log_likelihood(system, meas, i, ens.x, ens.modes)
    logw = np.where(np.isfinite(loglik), ens.log_w_prior + loglik, -np.inf)
    if not np.any(np.isfinite(logw)):
        raise FilterFailureError(f"every SIR particle died at step {i + 1}", step=i + 1)
    logw = normalize_log(logw)
    mmax = system.max_noise_dim
    dW = rng.standard_normal((K, mmax)) * np.sqrt(dt)
    res = advance_batch(system, meas.times[i], ens.x, ens.modes, ens.aux, np.zeros((K, mmax)), dt, dW)
    logw = np.where(res.finite, logw, -np.inf)
    if not np.any(np.isfinite(logw)):
        raise FilterFailureError(f"every SIR particle diverged at step {i + 1}", step=i + 1)
    logw = normalize_log(logw)
    X = np.where(res.finite[:, None], res.x, ens.x)
    modes, aux = res.modes, res.aux
    est = vote_and_estimate(system, X, modes, logw, aux)
    if effective_ratio(logw) < config.gamma_thres:
        anc = rng.choice(K, size=K, p=np.exp(logw))
        X, modes, aux = X[anc], modes[anc], aux[anc]
        logw = np.full(K, -np.log(K))
    return Ensemble(X, modes, aux, logw, X, modes, aux, logw), est


def run_sir(system: HybridSystem, meas: MeasurementPath, config: FilterConfig) -> list:
    """Bootstrap multi-mode particle filter; resamples whenever ``gamma < gamma_thres``."""
    system = replace(system, noise_scale=config.epsilon)
    ens = initial_ensemble(system, config)
    records = []
    for i in range(len(meas)):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, SIR_STREAM, i]))
        ens, est = sir_multimode_step(system, ens, meas, i, config, rng)
        records.append(EstimateRecord(float(meas.times[i + 1]), est.x_hat, est.mode_hat, est.esse, est.aux_hat))
    return records


def spipf_zero_control(system: HybridSystem, meas: MeasurementPath, config: FilterConfig) -> list:
    """SPIPF with every gain schedule forced to zero."""
    return run(system, meas, replace(config, zero_control=True))
