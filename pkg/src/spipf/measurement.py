"""Observation increments and the path costs built from them."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModeMismatchError
from .hybrid import HybridSystem, euler_flow


@dataclass(frozen=True)
class MeasurementPath:
    """Increments ``dY[i] = h(t_i, x_i) dt + sigma_B dB_i`` on a uniform grid.

    ``times`` has one more entry than ``dY``.  ``mode_labels[i]`` is the mode
    of the generating state at ``t_i``; it is kept for diagnostics and is never
    read by any filter.
    """

    times: np.ndarray
    dY: np.ndarray
    sigma_B: tuple
    mode_labels: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        dY = np.asarray(self.dY, dtype=float)
        if dY.ndim == 1:
            dY = dY.reshape(-1, 1) if dY.size else dY.reshape(0, 0)
        labels = np.asarray(self.mode_labels, dtype=int)
        if times.size and dY.shape[0] != times.size - 1:
            raise ValueError("dY needs exactly one row per time step")
        if labels.size != dY.shape[0]:
            raise ValueError("mode_labels needs one entry per increment")
        if not np.all(np.isfinite(dY)):
            raise ValueError("measurement increments must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "dY", dY)
        object.__setattr__(self, "mode_labels", labels)
        object.__setattr__(self, "sigma_B", tuple(float(s) for s in self.sigma_B))

    def __len__(self) -> int:
        return self.dY.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def obs_dim(self) -> int:
        return self.dY.shape[1]

    def Y(self) -> np.ndarray:
        """Cumulative observation path with ``Y_0 = 0``."""
        out = np.zeros((len(self) + 1, self.obs_dim))
        np.cumsum(self.dY, axis=0, out=out[1:])
        return out

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"dY_{k + 1}" for k in range(self.obs_dim)] + ["true_mode"])
            for i in range(len(self)):
                w.writerow([repr(float(self.times[i]))] + [repr(float(v)) for v in self.dY[i]]
                           + [int(self.mode_labels[i])])

    @classmethod
    def from_csv(cls, path, sigma_B, dt: float) -> "MeasurementPath":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        if not body:
            return cls(np.zeros(0), np.zeros((0, 0)), sigma_B, np.zeros(0, dtype=int))
        t = np.array([float(r[0]) for r in body])
        dY = np.array([[float(v) for v in r[1:-1]] for r in body])
        labels = np.array([int(r[-1]) for r in body])
        return cls(np.append(t, t[-1] + dt), dY, sigma_B, labels)


def generate_measurements(system: HybridSystem, times, states, modes, rng,
                          noiseless: bool = False) -> MeasurementPath:
    """Sample one increment per step of a truth trajectory.

    ``states`` is a sequence of per-step state vectors (their length may vary
    with the mode) and ``modes`` the matching mode labels; both have one entry
    per time in ``times``.  The last state produces no increment.
    """
    times = np.asarray(times, dtype=float)
    n_inc = max(times.size - 1, 0)
    p = system.obs_dim
    if n_inc == 0:
        return MeasurementPath(times, np.zeros((0, p)), system.obs_noise_sigma, np.zeros(0, dtype=int))
    dts = np.diff(times)
    dY = np.empty((n_inc, p))
    for i in range(n_inc):
        mode = int(modes[i])
        h = system.observe(mode, times[i], np.asarray(states[i], dtype=float))
        dY[i] = h * dts[i]
        if not noiseless:
            dY[i] += system.obs_noise_sigma[mode] * rng.standard_normal(p) * np.sqrt(dts[i])
    return MeasurementPath(times, dY, system.obs_noise_sigma, np.asarray(modes[:n_inc], dtype=int))


@dataclass(frozen=True)
class CostEvaluator:
    """Measurement costs over the window of increments ``[start, end)``.

    A window of ``N = end - start`` steps spans the states ``x_start .. x_end``
    and uses the increments ``dY[start] .. dY[end - 1]``.
    """

    system: HybridSystem
    measurements: MeasurementPath
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end <= len(self.measurements):
            raise IndexError(f"window [{self.start}, {self.end}) outside the measurement path")

    @property
    def n_steps(self) -> int:
        return self.end - self.start

    @property
    def dt(self) -> float:
        return self.measurements.dt

    def _check(self, i: int):
        if not self.start <= i < self.end:
            raise IndexError(f"step {i} outside window [{self.start}, {self.end})")

    def step_cost(self, i: int, x, mode: int):
        """``(1/sigma_B^2) (0.5 |h|^2 dt - h . dY_i)``; broadcasts over leading axes of ``x``."""
        self._check(i)
        return step_cost(self.system, self.measurements, i, x, mode)

    def step_cost_derivatives(self, i: int, x, mode: int):
        """Gradient and Gauss-Newton Hessian of :meth:`step_cost` in ``x``."""
        self._check(i)
        x = np.asarray(x, dtype=float)
        t = self.measurements.times[i]
        h = self.system.observe(mode, t, x)
        H = self.system.observation_jac(mode, t, x)
        inv = 1.0 / self.system.obs_noise_sigma[mode] ** 2
        dt = self.measurements.times[i + 1] - t
        grad = inv * H.T @ (h * dt - self.measurements.dY[i])
        hess = inv * dt * H.T @ H
        return grad, hess


def step_cost(system: HybridSystem, meas: MeasurementPath, i: int, x, mode: int):
    x = np.asarray(x, dtype=float)
    t = meas.times[i]
    dt = meas.times[i + 1] - t
    h = system.observe(mode, t, x)
    val = 0.5 * np.sum(h * h, axis=-1) * dt - h @ meas.dY[i]
    return val / system.obs_noise_sigma[mode] ** 2


def path_cost_increment(system: HybridSystem, meas: MeasurementPath, i: int, X, modes, U, dW):
    """Per-particle increment of ``S_u`` for step ``i``.

    ``X``, ``U`` and ``dW`` are zero-padded batches; ``modes`` gives each row's
    mode.  Returns ``(1/2eps)|u|^2 dt + (1/sqrt eps) u . dW + step_cost``.
    """
    eps = system.noise_scale
    dt = meas.times[i + 1] - meas.times[i]
    out = 0.5 / eps * np.sum(U * U, axis=-1) * dt + np.sum(U * dW, axis=-1) / np.sqrt(eps)
    for j, mode in enumerate(system.modes):
        idx = np.flatnonzero(modes == j)
        if idx.size:
            out[idx] += step_cost(system, meas, i, X[idx, :mode.state_dim], j)
    return out


def accumulate_Su(ev: CostEvaluator, trajectory, controls, noise_increments, mode_sequence) -> float:
    """Path cost ``S_u`` of one rollout over the evaluator's window.

    ``trajectory[k]`` is the state at step ``start + k`` (``N`` or ``N + 1``
    entries; a trailing terminal state is ignored), ``controls[k]`` and
    ``noise_increments[k]`` the control and raw Wiener increment applied over
    that step, and ``mode_sequence[k]`` the mode of ``trajectory[k]``.
    """
    N = ev.n_steps
    if len(controls) != N or len(noise_increments) != N or len(mode_sequence) < N:
        raise ValueError(f"expected {N} controls, noises and modes for the window")
    if len(trajectory) not in (N, N + 1):
        raise ValueError(f"expected {N} or {N + 1} states for the window")
    eps = ev.system.noise_scale
    total = 0.0
    for k in range(N):
        u = np.atleast_1d(np.asarray(controls[k], dtype=float))
        w = np.atleast_1d(np.asarray(noise_increments[k], dtype=float))
        if u.shape != w.shape:
            raise ValueError(f"control and noise shapes differ at step {k}")
        total += 0.5 / eps * float(u @ u) * ev.dt + float(u @ w) / np.sqrt(eps)
        total += float(ev.step_cost(ev.start + k, trajectory[k], int(mode_sequence[k])))
    return total


def extend_reference(system: HybridSystem, ref_states, ref_modes, target_mode: int, direction: str,
                     n_steps: int, dt: float, t0: float = 0.0):
    """Continue a nominal trajectory in ``target_mode`` across its transition.

    ``forward`` flows the last ``target_mode`` state of the reference under
    that mode's deterministic drift for ``n_steps`` more steps, with no guard
    checks.  ``backward`` integrates the drift in reverse time from the first
    ``target_mode`` state.  Both return ``n_steps + 1`` states in
    chronological order, boundary state included.  A reference that never
    leaves ``target_mode`` is returned unchanged.
    """
    modes = np.asarray(ref_modes, dtype=int)
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    if np.all(modes == target_mode):
        return ref_states
    hits = np.flatnonzero(modes == target_mode)
    if hits.size == 0:
        raise ModeMismatchError(f"reference never visits mode {target_mode}")
    mode = system.modes[target_mode]
    zero_u = np.zeros(mode.control_dim)
    if direction == "forward":
        b = int(hits[-1])
        if b + 1 < modes.size and system.transition_between(target_mode, int(modes[b + 1])) is None:
            raise ModeMismatchError(f"no transition {target_mode}->{modes[b + 1]} to extend across")
        x = np.asarray(ref_states[b], dtype=float)[: mode.state_dim]
        out = [x]
        for k in range(n_steps):
            x = euler_flow(mode, t0 + (b + k) * dt, x, zero_u, dt)
            out.append(x)
        return np.array(out)
    a = int(hits[0])
    if a > 0 and system.transition_between(int(modes[a - 1]), target_mode) is None:
        raise ModeMismatchError(f"no transition {modes[a - 1]}->{target_mode} to extend across")
    x = np.asarray(ref_states[a], dtype=float)[: mode.state_dim]
    out = [x]
    for k in range(n_steps):
        x = euler_flow(mode, t0 + (a - k) * dt, x, zero_u, -dt)
        out.append(x)
    return np.array(out[::-1])
