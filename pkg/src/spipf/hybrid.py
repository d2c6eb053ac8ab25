"""Hybrid stochastic systems: per-mode flows, guards, resets and saltation matrices.

Conventions used throughout the package:

* ``drift(t, x, u)`` is the *controlled* vector field of a mode, i.e.
  ``F_j(t, x) + sigma_j(t, x) @ u``.  The control enters through the same
  channel matrix as the noise, so the control dimension of a mode equals the
  column count of its diffusion matrix.
* Every per-mode callable must broadcast over leading batch axes: ``x`` may be
  ``(n,)`` or ``(B, n)``, ``u`` likewise, and ``t`` may be a scalar or a
  ``(B,)`` array.
* A system may carry a small auxiliary vector alongside the continuous state
  (``aux_dim > 0``).  It has no dynamics; resets may read and rewrite it.  The
  SLIP benchmark keeps the toe position there.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    GrazingContactError,
    MultipleGuardError,
    NumericalDivergenceError,
    OracleInapplicableError,
    SingularConfigurationError,
)

FD_STEP = 1e-6
GRAZING_TOL = 1e-9


@dataclass(frozen=True)
class ModeDynamics:
    """Controlled stochastic flow ``dx = drift(t, x, u) dt + diffusion(t, x) sqrt(eps) dW``."""

    state_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    jacobians: Optional[Callable] = None
    singular: Optional[Callable] = None  # x -> bool mask of configurations where the flow is undefined
    name: str = ""

    @property
    def control_dim(self) -> int:
        return self.noise_dim


@dataclass(frozen=True)
class Transition:
    """Directed edge ``source -> target`` fired when ``guard(t, x) <= 0``.

    ``reset(t, x, aux)`` maps a source-mode state to the target mode.
    ``reset_aux(t, x, aux)`` optionally rewrites the auxiliary vector.
    Analytic derivatives are optional; finite differences fill the gaps.
    """

    source: int
    target: int
    guard: Callable
    reset: Callable
    guard_gradient: Optional[Callable] = None
    reset_jacobian: Optional[Callable] = None
    reset_aux: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", f"{self.source}->{self.target}")


@dataclass(frozen=True)
class HybridSystem:
    """A hybrid automaton with per-mode observation models.

    ``observation[j](t, x)`` returns the observation vector ``h^j`` of length
    ``obs_dim`` for mode ``j``; ``obs_noise_sigma[j]`` is its noise intensity.
    ``noise_scale`` is the process-noise scaling ``eps``.
    """

    modes: tuple
    transitions: tuple
    observation: tuple
    obs_noise_sigma: tuple
    noise_scale: float
    obs_dim: int
    aux_dim: int = 0
    observation_jacobian: Optional[tuple] = None
    name: str = ""
    _outgoing: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "observation", tuple(self.observation))
        object.__setattr__(self, "obs_noise_sigma", tuple(float(s) for s in self.obs_noise_sigma))
        n_modes = len(self.modes)
        if n_modes == 0:
            raise ValueError("a hybrid system needs at least one mode")
        if len(self.observation) != n_modes or len(self.obs_noise_sigma) != n_modes:
            raise ValueError("observation and obs_noise_sigma need one entry per mode")
        if any(s <= 0 for s in self.obs_noise_sigma):
            raise ValueError("obs_noise_sigma must be positive")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        outgoing = {j: [] for j in range(n_modes)}
        for tr in self.transitions:
            if not (0 <= tr.source < n_modes and 0 <= tr.target < n_modes):
                raise ValueError(f"transition {tr.name} references an unknown mode")
            outgoing[tr.source].append(tr)
        object.__setattr__(self, "_outgoing", {j: tuple(v) for j, v in outgoing.items()})

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def max_state_dim(self) -> int:
        return max(m.state_dim for m in self.modes)

    @property
    def max_noise_dim(self) -> int:
        return max(m.noise_dim for m in self.modes)

    def outgoing(self, mode: int) -> tuple:
        return self._outgoing[mode]

    def transition_between(self, source: int, target: int) -> Optional[Transition]:
        for tr in self._outgoing[source]:
            if tr.target == target:
                return tr
        return None

    def with_noise_scale(self, noise_scale: float) -> "HybridSystem":
        return replace(self, noise_scale=float(noise_scale))

    def observe(self, mode: int, t, x):
        return np.asarray(self.observation[mode](t, x), dtype=float)

    def observation_jac(self, mode: int, t, x) -> np.ndarray:
        if self.observation_jacobian is not None and self.observation_jacobian[mode] is not None:
            return np.asarray(self.observation_jacobian[mode](t, x), dtype=float)
        return central_difference(lambda z: self.observe(mode, t, z), np.asarray(x, dtype=float))


@dataclass(frozen=True)
class HybridState:
    mode: int
    x: np.ndarray
    t: float = 0.0
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "aux", np.asarray(self.aux, dtype=float))


@dataclass(frozen=True)
class TransitionEvent:
    """Record of one guard crossing; ``x_pre`` is the flowed state before the reset."""

    transition: Transition
    t: float
    x_pre: np.ndarray
    x_post: np.ndarray
    aux_pre: np.ndarray
    aux_post: np.ndarray

    @property
    def source(self) -> int:
        return self.transition.source

    @property
    def target(self) -> int:
        return self.transition.target


# ---------------------------------------------------------------------------
# finite differences

def central_difference(fun: Callable, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Jacobian of ``fun`` at ``x`` with relative step ``step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))).ravel() / (2.0 * h)
    return jac


def flow_jacobians(mode: ModeDynamics, t: float, x, u, step: float = FD_STEP):
    """Return ``(A, B) = (d drift/dx, d drift/du)`` at one point."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise NumericalDivergenceError("flow_jacobians called with a non-finite point")
    if mode.jacobians is not None:
        A, B = mode.jacobians(t, x, u)
        A = np.asarray(A, dtype=float).reshape(mode.state_dim, mode.state_dim)
        B = np.asarray(B, dtype=float).reshape(mode.state_dim, mode.control_dim)
    else:
        A = central_difference(lambda z: mode.drift(t, z, u), x, step)
        B = central_difference(lambda v: mode.drift(t, x, v), u, step)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericalDivergenceError("non-finite flow Jacobian")
    return A, B


def guard_gradient(tr: Transition, t: float, x) -> tuple:
    """``(dg/dt, dg/dx)`` of a transition guard, analytic when registered."""
    x = np.asarray(x, dtype=float)
    if tr.guard_gradient is not None:
        gt, gx = tr.guard_gradient(t, x)
        return float(gt), np.asarray(gx, dtype=float).ravel()
    gx = central_difference(lambda z: tr.guard(t, z), x).ravel()
    h = FD_STEP * max(1.0, abs(t))
    gt = (float(tr.guard(t + h, x)) - float(tr.guard(t - h, x))) / (2.0 * h)
    return gt, gx


def reset_jacobian(tr: Transition, t: float, x, aux=None) -> tuple:
    """``(dR/dt, dR/dx)`` of a reset map, analytic when registered."""
    x = np.asarray(x, dtype=float)
    aux = np.zeros(0) if aux is None else np.asarray(aux, dtype=float)
    if tr.reset_jacobian is not None:
        rt, rx = tr.reset_jacobian(t, x, aux)
        return np.asarray(rt, dtype=float).ravel(), np.atleast_2d(np.asarray(rx, dtype=float))
    rx = central_difference(lambda z: tr.reset(t, z, aux), x)
    h = FD_STEP * max(1.0, abs(t))
    rt = (np.asarray(tr.reset(t + h, x, aux)) - np.asarray(tr.reset(t - h, x, aux))) / (2.0 * h)
    return np.asarray(rt, dtype=float).ravel(), rx


# ---------------------------------------------------------------------------
# stepping

def apply_diffusion(S: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise ``S @ v`` that gives identical bits regardless of batch size."""
    return (S * v[..., None, :]).sum(axis=-1)


def euler_flow(mode: ModeDynamics, t, x, u, dt, dW=None, noise_scale=1.0):
    """One Euler-Maruyama step inside a single mode, no guard check."""
    x_new = x + mode.drift(t, x, u) * dt
    if dW is not None:
        x_new = x_new + apply_diffusion(mode.diffusion(t, x), np.sqrt(noise_scale) * dW)
    return x_new


@dataclass
class BatchStep:
    """Result of advancing a padded batch of states by one step."""

    x: np.ndarray
    modes: np.ndarray
    aux: np.ndarray
    x_pre: np.ndarray
    fired: np.ndarray  # index into system.transitions, -1 when no jump
    finite: np.ndarray


def advance_batch(system: HybridSystem, t: float, X, modes, aux, U, dt: float, dW) -> BatchStep:
    """Advance a batch of states, possibly in different modes, by one step.

    States are stored zero-padded to ``system.max_state_dim`` columns; controls
    and noise to ``system.max_noise_dim``.  Guards are evaluated only at the
    step end and the reset is applied there.  Rows that turn non-finite are
    flagged in ``finite`` and left untouched otherwise.
    """
    X = np.asarray(X, dtype=float)
    modes = np.asarray(modes, dtype=int)
    B = X.shape[0]
    sqrt_eps = np.sqrt(system.noise_scale)
    flowed = np.zeros_like(X)
    for j, mode in enumerate(system.modes):
        idx = np.flatnonzero(modes == j)
        if idx.size == 0:
            continue
        n, m = mode.state_dim, mode.noise_dim
        x = X[idx, :n]
        u = U[idx, :m]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            dx = mode.drift(t, x, u) * dt
            dx = dx + apply_diffusion(mode.diffusion(t, x), sqrt_eps * dW[idx, :m])
        flowed[idx, :n] = x + dx
        if mode.singular is not None:
            bad = np.asarray(mode.singular(x), dtype=bool).reshape(-1)
            flowed[idx[bad]] = np.nan

    with np.errstate(invalid="ignore", over="ignore"):
        finite = np.all(np.isfinite(flowed), axis=1)
    t_new = t + dt
    fired = np.full(B, -1, dtype=int)
    for k, tr in enumerate(system.transitions):
        idx = np.flatnonzero((modes == tr.source) & finite)
        if idx.size == 0:
            continue
        n = system.modes[tr.source].state_dim
        g = np.asarray(tr.guard(t_new, flowed[idx, :n]), dtype=float).reshape(-1)
        hit = idx[g <= 0.0]
        if hit.size:
            if np.any(fired[hit] >= 0):
                raise MultipleGuardError(
                    f"more than one guard fired from mode {tr.source} at t={t_new:g}")
            fired[hit] = k

    X_new = flowed.copy()
    modes_new = modes.copy()
    aux_new = np.array(aux, dtype=float, copy=True)
    for k, tr in enumerate(system.transitions):
        idx = np.flatnonzero(fired == k)
        if idx.size == 0:
            continue
        n_src = system.modes[tr.source].state_dim
        n_dst = system.modes[tr.target].state_dim
        x_pre = flowed[idx, :n_src]
        a_pre = aux_new[idx]
        x_post = np.asarray(tr.reset(t_new, x_pre, a_pre), dtype=float).reshape(idx.size, n_dst)
        if tr.reset_aux is not None:
            aux_new[idx] = np.asarray(tr.reset_aux(t_new, x_pre, a_pre)).reshape(idx.size, -1)
        X_new[idx] = 0.0
        X_new[idx, :n_dst] = x_post
        modes_new[idx] = tr.target
    with np.errstate(invalid="ignore"):
        finite &= np.all(np.isfinite(X_new), axis=1)
    return BatchStep(X_new, modes_new, aux_new, flowed, fired, finite)


def pad(x, width: int) -> np.ndarray:
    out = np.zeros(width)
    x = np.asarray(x, dtype=float).ravel()
    out[: x.size] = x
    return out


def step(system: HybridSystem, s: HybridState, u, dt: float, dW):
    """Euler-Maruyama step of one hybrid state with end-of-step guard detection.

    Returns ``(new_state, event)`` where ``event`` is ``None`` when no guard
    fired.  ``dW`` is the Wiener increment already scaled by ``sqrt(dt)``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    mode = system.modes[s.mode]
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if s.x.shape != (mode.state_dim,):
        raise ValueError(f"state has shape {s.x.shape}, mode {s.mode} expects ({mode.state_dim},)")
    if dW.shape != (mode.noise_dim,) or u.shape != (mode.control_dim,):
        raise ValueError("control and noise must match the mode's noise dimension")
    if mode.singular is not None and bool(np.any(mode.singular(s.x))):
        raise SingularConfigurationError(f"mode {s.mode} is singular at x={s.x}")
    nmax, mmax = system.max_state_dim, system.max_noise_dim
    aux = s.aux if s.aux.size == system.aux_dim else np.zeros(system.aux_dim)
    res = advance_batch(system, s.t, pad(s.x, nmax)[None], np.array([s.mode]), aux[None],
                        pad(u, mmax)[None], dt, pad(dW, mmax)[None])
    if not res.finite[0]:
        raise NumericalDivergenceError(f"state became non-finite at t={s.t + dt:g}")
    new_mode = int(res.modes[0])
    n_new = system.modes[new_mode].state_dim
    new_state = HybridState(new_mode, res.x[0, :n_new].copy(), s.t + dt, res.aux[0].copy())
    if res.fired[0] < 0:
        return new_state, None
    tr = system.transitions[res.fired[0]]
    event = TransitionEvent(tr, s.t + dt, res.x_pre[0, :mode.state_dim].copy(),
                            new_state.x.copy(), aux.copy(), new_state.aux.copy())
    return new_state, event


# ---------------------------------------------------------------------------
# saltation matrix

def _post_control(dst: ModeDynamics, u, u_post):
    if u_post is not None:
        return np.atleast_1d(np.asarray(u_post, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return u if u.size == dst.control_dim else np.zeros(dst.control_dim)


def _transversality(system, tr, t, x_pre, u):
    src = system.modes[tr.source]
    gt, gx = guard_gradient(tr, t, x_pre)
    F_pre = np.asarray(src.drift(t, x_pre, u), dtype=float)
    denom = gt + gx @ F_pre
    if abs(denom) < GRAZING_TOL:
        raise GrazingContactError(
            f"guard {tr.name} is grazed (dg/dt + dg/dx . F = {denom:.3e})")
    return gt, gx, F_pre, denom


def saltation_matrix(system: HybridSystem, tr: Transition, t: float, x_pre, u,
                     u_post=None, aux=None, guard_tol: Optional[float] = None) -> np.ndarray:
    """Saltation matrix of ``tr`` at the pre-impact point ``(t, x_pre)``.

    Xi = D_xR + (F_k(x+) - D_xR F_j(x-) - d_tR) (d_x g) / (d_t g + d_x g . F_j)

    ``u`` drives the source flow; ``u_post`` the target flow (defaults to
    ``u`` when the control dimensions agree, zero otherwise).
    """
    x_pre = np.asarray(x_pre, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    aux = np.zeros(system.aux_dim) if aux is None else np.asarray(aux, dtype=float)
    if guard_tol is not None:
        g = float(tr.guard(t, x_pre))
        if abs(g) > guard_tol:
            raise ValueError(f"guard {tr.name} is not active at x_pre (g={g:.3e})")
    dst = system.modes[tr.target]
    _, gx, F_pre, denom = _transversality(system, tr, t, x_pre, u)
    x_post = np.asarray(tr.reset(t, x_pre, aux), dtype=float)
    rt, rx = reset_jacobian(tr, t, x_pre, aux)
    F_post = np.asarray(dst.drift(t, x_post, _post_control(dst, u, u_post)), dtype=float)
    xi = rx + np.outer(F_post - rx @ F_pre - rt, gx) / denom
    if not np.all(np.isfinite(xi)):
        raise NumericalDivergenceError(f"non-finite saltation matrix for {tr.name}")
    return xi


def _rk4(f, t, x, h):
    hc = h[:, None]
    k1 = f(t, x)
    k2 = f(t + h / 2, x + hc / 2 * k1)
    k3 = f(t + h / 2, x + hc / 2 * k2)
    k4 = f(t + h, x + hc * k3)
    return x + hc / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def hybrid_flow_map(system: HybridSystem, tr: Transition, t: float, X, u, u_post=None,
                    aux=None, horizon: float = 1.0, max_step: float = 1e-3,
                    event_tol: float = 1e-10) -> np.ndarray:
    """Exact (RK4 + bisection) hybrid flow of a batch of states through ``tr``.

    Each row of ``X`` is a source-mode state at time ``t``.  Rows with
    ``g > 0`` flow forward until the guard is hit; rows with ``g < 0`` are
    flowed backward to the crossing.  The crossing time is bisected to
    ``event_tol``, the reset applied there, and the target flow integrated back
    to time ``t``.  The result is the target-mode state at ``t``, so the
    Jacobian of this map at a guard point is the saltation matrix.
    """
    src, dst = system.modes[tr.source], system.modes[tr.target]
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = X.shape[0]
    u = np.atleast_1d(np.asarray(u, dtype=float))
    up = _post_control(dst, u, u_post)
    aux = np.zeros(system.aux_dim) if aux is None else np.asarray(aux, dtype=float)
    A = np.broadcast_to(aux, (B, system.aux_dim)).copy()
    U = np.broadcast_to(u, (B, u.size))
    Up = np.broadcast_to(up, (B, up.size))

    def f_src(s, x, rows):
        return np.asarray(src.drift(s, x, U[rows]), dtype=float)

    def f_dst(s, x, rows):
        return np.asarray(dst.drift(s, x, Up[rows]), dtype=float)

    def guard(s, x):
        return np.asarray(tr.guard(s, x), dtype=float).reshape(-1)

    g0 = guard(np.full(B, t), X)
    direction = np.where(g0 > 0, 1.0, -1.0)
    elapsed = np.zeros(B)
    xs = X.copy()
    t_hit = np.full(B, float(t))
    x_hit = X.copy()
    active = g0 != 0.0
    n_search = int(np.ceil(horizon / max_step))
    for _ in range(n_search):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        h = direction[rows] * max_step
        t0 = t + elapsed[rows]
        x0 = xs[rows]
        xn = _rk4(lambda s, x: f_src(s, x, rows), t0, x0, h)
        gn = guard(t0 + h, xn)
        crossed = np.where(direction[rows] > 0, gn <= 0.0, gn > 0.0)
        if np.any(crossed):
            c = rows[crossed]
            lo = np.zeros(c.size)
            hi = h[crossed].copy()
            tc = t0[crossed]
            xc = x0[crossed]
            dirc = direction[c]
            while np.max(np.abs(hi - lo)) > event_tol:
                mid = 0.5 * (lo + hi)
                xm = _rk4(lambda s, x: f_src(s, x, c), tc, xc, mid)
                gm = guard(tc + mid, xm)
                inside = np.where(dirc > 0, gm <= 0.0, gm > 0.0)
                hi = np.where(inside, mid, hi)
                lo = np.where(inside, lo, mid)
            tau = 0.5 * (lo + hi)
            x_hit[c] = _rk4(lambda s, x: f_src(s, x, c), tc, xc, tau)
            t_hit[c] = tc + tau
            active[c] = False
        keep = rows[~crossed]
        xs[keep] = xn[~crossed]
        elapsed[keep] += h[~crossed]
        if not np.all(np.isfinite(xs[rows])):
            raise NumericalDivergenceError("perturbed trajectory diverged before reaching the guard")
    if np.any(active):
        raise OracleInapplicableError(
            f"{int(active.sum())} perturbed trajectories missed guard {tr.name} within {horizon} s")

    x_plus = np.asarray(tr.reset(t_hit, x_hit, A), dtype=float).reshape(B, dst.state_dim)
    back = t - t_hit
    n_sub = max(1, int(np.ceil(np.max(np.abs(back)) / max_step)))
    h = back / n_sub
    all_rows = np.arange(B)
    for k in range(n_sub):
        x_plus = _rk4(lambda s, x: f_dst(s, x, all_rows), t_hit + k * h, x_plus, h)
    return x_plus


def saltation_fd_oracle(system: HybridSystem, tr: Transition, t: float, x_pre, u, delta: float,
                        u_post=None, aux=None, horizon: float = 1.0) -> np.ndarray:
    """Central-difference Jacobian of :func:`hybrid_flow_map` at ``x_pre``.

    Independent of the saltation formula; used as ground truth in tests.
    """
    if not 1e-6 <= delta <= 1e-3:
        raise ValueError(f"delta must lie in [1e-6, 1e-3], got {delta!r}")
    x_pre = np.asarray(x_pre, dtype=float)
    _transversality(system, tr, t, x_pre, np.atleast_1d(np.asarray(u, dtype=float)))
    n = x_pre.size
    E = delta * np.eye(n)
    X = np.vstack([x_pre + E, x_pre - E])
    out = hybrid_flow_map(system, tr, t, X, u, u_post=u_post, aux=aux, horizon=horizon)
    return ((out[:n] - out[n:]) / (2.0 * delta)).T
