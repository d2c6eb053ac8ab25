"""Salted path integral particle filter (SPIPF)."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegenerateEnsembleError,
    FilterFailureError,
    HybridError,
    SolverStalledError,
)
from .hybrid import HybridState, HybridSystem
from .ilqr import GainSchedule, ILQRSettings, rollout_batch, solve_window, zero_schedule
from .measurement import CostEvaluator, MeasurementPath, path_cost_increment

NOISE_STREAM = 0
RESAMPLE_STREAM = 1
PRIOR_STREAM = 2


@dataclass(frozen=True)
class GaussianPrior:
    """Mixture of per-mode Gaussians over the initial hybrid state."""

    modes: tuple
    weights: tuple
    means: tuple
    covs: tuple

    def __post_init__(self):
        n = len(self.modes)
        if not (len(self.weights) == len(self.means) == len(self.covs) == n) or n == 0:
            raise ValueError("prior components need matching modes, weights, means and covariances")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("prior mode probabilities must be non-negative and not all zero")
        object.__setattr__(self, "means", tuple(np.asarray(m, dtype=float) for m in self.means))
        object.__setattr__(self, "covs", tuple(np.atleast_2d(np.asarray(c, dtype=float)) for c in self.covs))

    @classmethod
    def single(cls, mode: int, mean, cov) -> "GaussianPrior":
        return cls((mode,), (1.0,), (mean,), (cov,))

    def sample(self, rng, K: int, width: int):
        w = np.asarray(self.weights, dtype=float)
        comp = rng.choice(len(self.modes), size=K, p=w / w.sum())
        X = np.zeros((K, width))
        modes = np.empty(K, dtype=int)
        for c in range(len(self.modes)):
            idx = np.flatnonzero(comp == c)
            mean, cov = self.means[c], self.covs[c]
            lam, V = np.linalg.eigh(cov)
            L = V * np.sqrt(np.clip(lam, 0.0, None))
            z = rng.standard_normal((idx.size, mean.size))
            X[idx, : mean.size] = mean + z @ L.T
            modes[idx] = self.modes[c]
        return X, modes


@dataclass(frozen=True)
class FilterConfig:
    K: int = 50
    H: int = 10
    dt: float = 0.01
    epsilon: float = 0.1
    gamma_thres: float = 0.5
    resampling_enabled: bool = True
    prior: Optional[GaussianPrior] = None
    seed: int = 0
    zero_control: bool = False
    resample_weights: str = "full_window"  # or "auxiliary"
    ilqr: ILQRSettings = field(default_factory=ILQRSettings)
    threads: int = 1
    keep_particles: bool = False

    def __post_init__(self):
        if self.K < 1 or self.H < 1:
            raise ValueError("K and H must be at least 1")
        if self.dt <= 0 or self.epsilon <= 0:
            raise ValueError("dt and epsilon must be positive")
        if not 0 < self.gamma_thres <= 1:
            raise ValueError("gamma_thres must lie in (0, 1]")
        if self.resample_weights not in ("full_window", "auxiliary"):
            raise ValueError("resample_weights must be 'full_window' or 'auxiliary'")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")


@dataclass
class Ensemble:
    """Prior particles of the current window plus the latest filtered set.

    ``log_w_prior`` and ``log_w_filtered`` are normalised log-weights; dead
    particles carry ``-inf``.
    """

    x: np.ndarray
    modes: np.ndarray
    aux: np.ndarray
    log_w_prior: np.ndarray
    x_filtered: Optional[np.ndarray] = None
    modes_filtered: Optional[np.ndarray] = None
    aux_filtered: Optional[np.ndarray] = None
    log_w_filtered: Optional[np.ndarray] = None
    warm_start: Optional[list] = None

    @property
    def K(self) -> int:
        return self.x.shape[0]


class Estimate(NamedTuple):
    x_hat: np.ndarray
    mode_hat: int
    esse: float
    aux_hat: np.ndarray


@dataclass(frozen=True)
class EstimateRecord:
    t: float
    x_hat: np.ndarray
    mode_hat: int
    esse: float
    aux_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_particle: Optional[dict] = None


# ---------------------------------------------------------------------------
# weights

def normalize_log(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if not np.any(np.isfinite(logw)):
        raise DegenerateEnsembleError("every particle weight is zero or invalid")
    return logw - logsumexp(logw)


def effective_ratio(logw) -> float:
    """``gamma = 1 / (K sum w_k^2)`` for normalised log-weights."""
    w = np.exp(np.asarray(logw, dtype=float))
    return float(1.0 / (w.size * np.sum(w * w)))


def vote_and_estimate(system: HybridSystem, X, modes, logw, aux=None) -> Estimate:
    """Pick the mode with the largest total weight and average its particles.

    Ties go to the lower mode index.  ``X`` is zero-padded; the estimate has
    the winning mode's dimension.
    """
    logw = normalize_log(logw)
    w = np.exp(logw)
    totals = np.array([w[modes == j].sum() for j in range(system.n_modes)])
    mode_hat = int(np.argmax(totals))
    sel = np.flatnonzero((modes == mode_hat) & (w > 0))
    ws = w[sel] / w[sel].sum()
    n = system.modes[mode_hat].state_dim
    x_hat = (ws[:, None] * X[sel, :n]).sum(axis=0)
    if aux is None or system.aux_dim == 0:
        aux_hat = np.zeros(system.aux_dim)
    else:
        aux_hat = (ws[:, None] * aux[sel]).sum(axis=0)
    return Estimate(x_hat, mode_hat, effective_ratio(logw), aux_hat)


def _nominal_start(system, ens: Ensemble, t: float) -> HybridState:
    """Prior-weighted mean of the particles in the prior's majority mode."""
    est = vote_and_estimate(system, ens.x, ens.modes, ens.log_w_prior, ens.aux)
    return HybridState(est.mode_hat, est.x_hat, t, est.aux_hat)


# ---------------------------------------------------------------------------
# window step

def _noise(config: FilterConfig, window: int, K: int, N: int, m: int, dt: float) -> np.ndarray:
    dW = np.empty((K, N, m))
    for k in range(K):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, NOISE_STREAM, window, k]))
        dW[k] = rng.standard_normal((N, m))
    return dW * np.sqrt(dt)


def _parallel_rollout(system, gains, ens, dW, threads):
    K = ens.K
    if threads <= 1 or K < 2:
        return rollout_batch(system, gains, ens.x, ens.modes, ens.aux, dW)
    chunks = np.array_split(np.arange(K), min(threads, K))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda idx: rollout_batch(system, gains, ens.x[idx], ens.modes[idx], ens.aux[idx], dW[idx]),
            chunks))
    first = parts[0]
    merged = {name: np.concatenate([getattr(p, name) for p in parts], axis=0)
              for name in first.__dataclass_fields__}
    return type(first)(**merged)


def _solve_gains(system, meas, window, ens, config, t_start):
    i, j = window
    ev = CostEvaluator(system, meas, i, j)
    nominal = _nominal_start(system, ens, t_start)
    if config.zero_control:
        return zero_schedule(system, ev, nominal)
    try:
        return solve_window(system, ev, nominal, config.ilqr, ens.warm_start)
    except SolverStalledError as exc:
        if exc.schedule is not None:
            return exc.schedule
        return zero_schedule(system, ev, nominal)
    except (HybridError, FloatingPointError):
        return zero_schedule(system, ev, nominal)


def step_window(system: HybridSystem, meas: MeasurementPath, window, ens: Ensemble,
                config: FilterConfig, window_index: Optional[int] = None):
    """One SPIPF window ``[t_i, t_j]``: gains, particle rollouts, weights, resampling.

    Returns ``(ensemble, snapshot)``; the snapshot dict carries the gains,
    path costs and the effective ratio.
    """
    i, j = window
    N = j - i
    if N < 1:
        raise ValueError("window must contain at least one step")
    w_idx = j if window_index is None else window_index
    gains = _solve_gains(system, meas, window, ens, config, float(meas.times[i]))

    dW = _noise(config, w_idx, ens.K, N, system.max_noise_dim, meas.dt)
    ro = _parallel_rollout(system, gains, ens, dW, config.threads)

    S_steps = np.zeros((ens.K, N))
    for k in range(N):
        with np.errstate(invalid="ignore", over="ignore"):
            S_steps[:, k] = path_cost_increment(system, meas, i + k, ro.states[:, k], ro.modes[:, k],
                                                ro.controls[:, k], dW[:, k])
    alive = ro.alive & np.all(np.isfinite(S_steps), axis=1)
    S_steps[~alive] = np.inf
    S = S_steps.sum(axis=1)

    log_hat = np.where(alive, ens.log_w_prior - S, -np.inf)
    if not np.any(np.isfinite(log_hat)):
        raise FilterFailureError(f"every particle died in window ending at step {j}", step=j)
    log_hat = normalize_log(log_hat)
    gamma = effective_ratio(log_hat)

    advance = j >= config.H
    if advance:
        px, pm, pa = ro.states[:, 1].copy(), ro.modes[:, 1].copy(), ro.aux[:, 1].copy()
        log_prior = np.where(alive, ens.log_w_prior - S_steps[:, 0], -np.inf)
        warm = list(gains.k_ff[1:]) + [None]
    else:
        px, pm, pa = ens.x.copy(), ens.modes.copy(), ens.aux.copy()
        log_prior = np.where(alive, ens.log_w_prior, -np.inf)
        warm = list(gains.k_ff)
    if not np.any(np.isfinite(log_prior)):
        raise FilterFailureError(f"prior weights collapsed at step {j}", step=j)
    log_prior = normalize_log(log_prior)

    resampled = False
    if config.resampling_enabled and gamma < config.gamma_thres:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, RESAMPLE_STREAM, w_idx]))
        anc = rng.choice(ens.K, size=ens.K, p=np.exp(log_hat))
        if config.resample_weights == "auxiliary" and advance:
            corr = S - S_steps[:, 0]
        else:
            corr = S
        px, pm, pa = px[anc], pm[anc], pa[anc]
        log_prior = normalize_log(corr[anc])
        resampled = True

    new = Ensemble(px, pm, pa, log_prior, ro.states[:, N].copy(), ro.modes[:, N].copy(),
                   ro.aux[:, N].copy(), log_hat, warm)
    snapshot = {"gains": gains, "S": S, "gamma": gamma, "resampled": resampled, "alive": alive}
    return new, snapshot


def initial_ensemble(system: HybridSystem, config: FilterConfig) -> Ensemble:
    if config.prior is None:
        raise ValueError("FilterConfig.prior is required")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, PRIOR_STREAM]))
    X, modes = config.prior.sample(rng, config.K, system.max_state_dim)
    aux = np.zeros((config.K, system.aux_dim))
    return Ensemble(X, modes, aux, np.full(config.K, -np.log(config.K)))


def run(system: HybridSystem, meas: MeasurementPath, config: FilterConfig,
        ensemble: Optional[Ensemble] = None) -> list:
    """Filter the whole measurement path; one record per step ``j = 1 .. L``.

    The record for step ``j`` estimates the state at ``t_j`` from the
    increments ``dY_0 .. dY_{j-1}``.
    """
    if len(meas) and abs(meas.dt - config.dt) > 1e-12 * max(1.0, config.dt):
        raise ValueError(f"measurement dt {meas.dt} differs from config dt {config.dt}")
    system = replace(system, noise_scale=config.epsilon)
    ens = ensemble if ensemble is not None else initial_ensemble(system, config)
    records = []
    for j in range(1, len(meas) + 1):
        i = max(0, j - config.H)
        try:
            ens, snap = step_window(system, meas, (i, j), ens, config)
        except DegenerateEnsembleError as exc:
            raise FilterFailureError(f"degenerate ensemble at step {j}", step=j) from exc
        est = vote_and_estimate(system, ens.x_filtered, ens.modes_filtered, ens.log_w_filtered,
                                ens.aux_filtered)
        extra = None
        if config.keep_particles:
            extra = {"x": ens.x_filtered.copy(), "modes": ens.modes_filtered.copy(),
                     "log_w": ens.log_w_filtered.copy(), "resampled": snap["resampled"]}
        records.append(EstimateRecord(float(meas.times[j]), est.x_hat, est.mode_hat, est.esse,
                                      est.aux_hat, extra))
    return records


def records_to_csv(records, path, include_weights: bool = False) -> None:
    """Columns ``t, mode_hat, x_hat_1.., esse`` (+ ``logw_k`` when requested)."""
    width = max((r.x_hat.size for r in records), default=0)
    n_w = 0
    if include_weights and records and records[0].per_particle is not None:
        n_w = records[0].per_particle["log_w"].size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mode_hat"] + [f"x_hat_{k + 1}" for k in range(width)] + ["esse"]
                   + [f"logw_{k + 1}" for k in range(n_w)])
        for r in records:
            row = [repr(r.t), r.mode_hat] + [repr(float(v)) for v in r.x_hat] + [""] * (width - r.x_hat.size)
            row.append(repr(float(r.esse)))
            if n_w:
                row += [repr(float(v)) for v in r.per_particle["log_w"]]
            w.writerow(row)
