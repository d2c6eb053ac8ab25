"""Sliding-window iLQR whose backward pass crosses hybrid transitions through saltation matrices."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    GrazingContactError,
    HybridError,
    ModeMismatchError,
    NumericalDivergenceError,
    SolverStalledError,
)
from .hybrid import (
    HybridState,
    HybridSystem,
    advance_batch,
    flow_jacobians,
    reset_jacobian,
    saltation_matrix,
    step,
)
from .measurement import CostEvaluator, extend_reference

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ILQRSettings:
    max_iters: int = 30
    cost_tol: float = 1e-6
    reg_init: float = 1e-6
    reg_max: float = 1e6
    line_search_alphas: tuple = tuple(np.geomspace(1.0, 1e-3, 7))
    jump_jacobian: str = "saltation"  # "reset" drops the impact-time correction

    def __post_init__(self):
        if self.max_iters < 1 or self.cost_tol <= 0 or self.reg_init <= 0:
            raise ValueError("max_iters, cost_tol and reg_init must be positive")
        if self.reg_init > self.reg_max:
            raise ValueError("reg_init must not exceed reg_max")
        if self.jump_jacobian not in ("saltation", "reset"):
            raise ValueError("jump_jacobian must be 'saltation' or 'reset'")


@dataclass(frozen=True)
class Branch:
    """Per-step reference, feedforward and feedback for particles in one mode.

    Arrays are zero-padded to the system's largest state/control dimension.
    ``valid[k]`` is false where the nominal never reaches this mode within
    the window and no extension exists.
    """

    ref: np.ndarray
    k_ff: np.ndarray
    K_fb: np.ndarray
    valid: np.ndarray
    source: np.ndarray  # "nominal", "forward" or "backward" per step


@dataclass(frozen=True)
class GainSchedule:
    """Feedforward/feedback gains over a window of ``N`` steps.

    ``k_ff[k]`` is the nominal control and ``K_fb[k]`` the feedback on the
    deviation from ``ref_states[k]``; dimensions follow ``ref_modes[k]``.
    ``branches`` holds the same data re-expressed for each mode, using
    reference extensions where the nominal is in a different mode.
    """

    times: np.ndarray
    k_ff: tuple
    K_fb: tuple
    ref_states: tuple
    ref_modes: np.ndarray
    dt: float
    start: int = 0
    branches: dict = field(default_factory=dict)
    terminal_state: Optional[np.ndarray] = None
    cost_history: tuple = ()
    transition_steps: tuple = ()

    def __len__(self) -> int:
        return len(self.times)

    @property
    def cost(self) -> float:
        return self.cost_history[-1] if self.cost_history else float("nan")


@dataclass
class _Nominal:
    states: list
    modes: np.ndarray
    aux: list
    controls: list
    events: list
    cost: float


# ---------------------------------------------------------------------------
# rollouts

def _fit_control(u, dim):
    u = np.zeros(dim) if u is None else np.atleast_1d(np.asarray(u, dtype=float))
    return u if u.size == dim else np.zeros(dim)


def _rollout(system, ev, init_state, policy):
    """Deterministic rollout; ``policy(k, state)`` returns the control."""
    eps = system.noise_scale
    dt = ev.dt
    s = init_state
    states, modes, aux, controls, events = [s.x], [s.mode], [s.aux], [], []
    cost = 0.0
    for k in range(ev.n_steps):
        mode = system.modes[s.mode]
        u = policy(k, s)
        cost += 0.5 / eps * float(u @ u) * dt + float(ev.step_cost(ev.start + k, s.x, s.mode))
        s, e = step(system, s, u, dt, np.zeros(mode.noise_dim))
        states.append(s.x)
        modes.append(s.mode)
        aux.append(s.aux)
        controls.append(u)
        events.append(e)
    return _Nominal(states, np.array(modes), aux, controls, events, cost)


def _safe_rollout(system, ev, init_state, policy):
    try:
        nom = _rollout(system, ev, init_state, policy)
    except (HybridError, FloatingPointError):
        return None
    return nom if np.isfinite(nom.cost) else None


# ---------------------------------------------------------------------------
# backward pass

def _jump_jacobian(system, event, u, aux, kind):
    tr = event.transition
    if kind == "saltation":
        try:
            return saltation_matrix(system, tr, event.t, event.x_pre, u, aux=aux)
        except GrazingContactError:
            pass
    return reset_jacobian(tr, event.t, event.x_pre, aux)[1]


def _backward(system, ev, nom, reg, kind):
    eps = system.noise_scale
    dt = ev.dt
    N = ev.n_steps
    n_last = system.modes[nom.modes[N]].state_dim
    Vx = np.zeros(n_last)
    Vxx = np.zeros((n_last, n_last))
    ks, Ks = [None] * N, [None] * N
    dV = np.zeros(2)
    for k in range(N - 1, -1, -1):
        mode_id = int(nom.modes[k])
        mode = system.modes[mode_id]
        x, u = nom.states[k], nom.controls[k]
        if nom.events[k] is not None:
            J = _jump_jacobian(system, nom.events[k], u, nom.aux[k], kind)
            Vx = J.T @ Vx
            Vxx = J.T @ Vxx @ J
        Ac, Bc = flow_jacobians(mode, ev.measurements.times[ev.start + k], x, u)
        n, m = mode.state_dim, mode.control_dim
        A = np.eye(n) + Ac * dt
        B = Bc * dt
        lx, lxx = ev.step_cost_derivatives(ev.start + k, x, mode_id)
        lu = dt / eps * u
        luu = dt / eps * np.eye(m)
        Qx = lx + A.T @ Vx
        Qu = lu + B.T @ Vx
        Qxx = lxx + A.T @ Vxx @ A
        Quu = luu + B.T @ Vxx @ B
        Qux = B.T @ Vxx @ A
        Vreg = Vxx + reg * np.eye(n)
        Quu_r = luu + B.T @ Vreg @ B
        Qux_r = B.T @ Vreg @ A
        Quu_r = 0.5 * (Quu_r + Quu_r.T)
        try:
            L = np.linalg.cholesky(Quu_r)
        except np.linalg.LinAlgError:
            return None
        kk = -_chol_solve(L, Qu)
        KK = -_chol_solve(L, Qux_r)
        Vx = Qx + KK.T @ Quu @ kk + KK.T @ Qu + Qux.T @ kk
        Vxx = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
        Vxx = 0.5 * (Vxx + Vxx.T)
        dV += [kk @ Qu, 0.5 * kk @ Quu @ kk]
        ks[k], Ks[k] = kk, KK
        if not (np.all(np.isfinite(Vx)) and np.all(np.isfinite(Vxx))):
            return None
    return ks, Ks, dV, Vx


def _chol_solve(L, b):
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


def value_gradient(system, ev, nom: "_Nominal", kind="saltation"):
    """``V_x`` at the window start for a given nominal (used by gradient checks)."""
    out = _backward(system, ev, nom, 0.0, kind)
    if out is None:
        raise NumericalDivergenceError("backward pass failed")
    return out[3]


# ---------------------------------------------------------------------------
# solver

def _policy(nom, ks, Ks, alpha, system):
    def pol(k, s):
        dim = system.modes[s.mode].control_dim
        if s.mode == nom.modes[k]:
            return nom.controls[k] + alpha * ks[k] + Ks[k] @ (s.x - nom.states[k])
        return _fit_control(nom.controls[k] + alpha * ks[k], dim)
    return pol


def solve_window(system: HybridSystem, ev: CostEvaluator, init_state: HybridState,
                 settings: ILQRSettings = ILQRSettings(), u_init=None) -> GainSchedule:
    """Minimise ``sum_k (dt/2eps)|u_k|^2 + step_cost(x_k)`` over the evaluator's window.

    ``u_init`` optionally warm-starts the controls (entries whose size does
    not fit the mode reached at that step are replaced by zeros).
    """
    N = ev.n_steps
    if N < 1:
        raise ValueError("window must contain at least one step")
    if not 0 <= init_state.mode < system.n_modes:
        raise ValueError(f"unknown mode {init_state.mode}")
    if init_state.aux.size != system.aux_dim:
        init_state = HybridState(init_state.mode, init_state.x, init_state.t, np.zeros(system.aux_dim))
    u0 = list(u_init) if u_init is not None else [None] * N
    u0 += [None] * (N - len(u0))

    nom = _rollout(system, ev, init_state,
                   lambda k, s: _fit_control(u0[k], system.modes[s.mode].control_dim))
    if not np.isfinite(nom.cost):
        raise NumericalDivergenceError("non-finite cost on the initial rollout")

    reg = settings.reg_init
    history = [nom.cost]
    gains = None
    for it in range(settings.max_iters):
        bw = _backward(system, ev, nom, reg, settings.jump_jacobian)
        if bw is None:
            reg *= 10.0
            if reg > settings.reg_max:
                raise SolverStalledError("regularization exhausted in backward pass",
                                         _schedule(system, ev, nom, gains, history))
            continue
        ks, Ks, dV, _ = bw
        gains = (ks, Ks)
        accepted = None
        for alpha in settings.line_search_alphas:
            trial = _safe_rollout(system, ev, init_state, _policy(nom, ks, Ks, alpha, system))
            if trial is not None and trial.cost < nom.cost:
                accepted = trial
                break
        expected = -(dV[0] + dV[1])
        log.debug("iter=%d cost=%.10g reg=%.3g transitions=%s", it, nom.cost, reg,
                  [k for k, e in enumerate(nom.events) if e is not None])
        if accepted is None:
            if expected < settings.cost_tol * max(1.0, abs(nom.cost)):
                break
            reg *= 10.0
            if reg > settings.reg_max:
                raise SolverStalledError("regularization exhausted in line search",
                                         _schedule(system, ev, nom, gains, history))
            continue
        decrease = nom.cost - accepted.cost
        nom = accepted
        history.append(nom.cost)
        reg = max(reg / 3.0, 1e-12)
        if decrease < settings.cost_tol * max(1.0, abs(nom.cost)):
            break

    while True:
        bw = _backward(system, ev, nom, reg, settings.jump_jacobian)
        if bw is not None:
            gains = (bw[0], bw[1])
            break
        reg *= 10.0
        if reg > settings.reg_max:
            raise SolverStalledError("regularization exhausted on the final nominal",
                                     _schedule(system, ev, nom, gains, history))
    return _schedule(system, ev, nom, gains, history)


def _schedule(system, ev, nom, gains, history):
    N = ev.n_steps
    Ks = []
    for k in range(N):
        mode = system.modes[nom.modes[k]]
        K = None if gains is None else gains[1][k]
        if K is None or K.shape != (mode.control_dim, mode.state_dim):
            K = np.zeros((mode.control_dim, mode.state_dim))
        Ks.append(K)
    times = ev.measurements.times[ev.start:ev.end]
    sched = GainSchedule(times, tuple(nom.controls), tuple(Ks), tuple(nom.states[:N]),
                         nom.modes[:N].copy(), ev.dt, ev.start, {}, nom.states[N], tuple(history),
                         tuple(k for k, e in enumerate(nom.events) if e is not None))
    object.__setattr__(sched, "branches", build_branches(system, sched, ev.dt))
    return sched


def zero_schedule(system: HybridSystem, ev: CostEvaluator, ref: HybridState) -> GainSchedule:
    """Gains that are identically zero; every mode branch is valid with zero control."""
    N = ev.n_steps
    mode = system.modes[ref.mode]
    times = ev.measurements.times[ev.start:ev.end]
    sched = GainSchedule(times, tuple(np.zeros(mode.control_dim) for _ in range(N)),
                         tuple(np.zeros((mode.control_dim, mode.state_dim)) for _ in range(N)),
                         tuple(ref.x for _ in range(N)), np.full(N, ref.mode), ev.dt, ev.start)
    nmax, mmax = system.max_state_dim, system.max_noise_dim
    branches = {j: Branch(np.zeros((N, nmax)), np.zeros((N, mmax)), np.zeros((N, mmax, nmax)),
                          np.ones(N, dtype=bool), np.array(["nominal"] * N))
                for j in range(system.n_modes)}
    object.__setattr__(sched, "branches", branches)
    return sched


def build_branches(system: HybridSystem, sched: GainSchedule, dt: float) -> dict:
    """Re-express the schedule for every mode using reference extensions.

    A particle in mode ``j`` at step ``k`` tracks the nominal when the nominal
    is also in ``j``.  Otherwise it tracks the forward extension of the most
    recent ``j`` segment (gains held from that segment's last step) or, if
    the nominal has not reached ``j`` yet, the backward extension of the
    first ``j`` segment (gains held from its first step).
    """
    N = len(sched)
    nmax, mmax = system.max_state_dim, system.max_noise_dim
    states = list(sched.ref_states)
    out = {}
    for j in range(system.n_modes):
        ref = np.zeros((N, nmax))
        kff = np.zeros((N, mmax))
        K = np.zeros((N, mmax, nmax))
        valid = np.zeros(N, dtype=bool)
        src = np.array(["none"] * N, dtype=object)
        hits = np.flatnonzero(sched.ref_modes == j)
        n, m = system.modes[j].state_dim, system.modes[j].control_dim
        for k in range(N):
            if sched.ref_modes[k] == j:
                b, kind, path = k, "nominal", None
            else:
                before = hits[hits < k]
                after = hits[hits > k]
                if before.size:
                    b = int(before[-1])
                    try:
                        path = extend_reference(system, states[: b + 2], sched.ref_modes[: b + 2], j,
                                                "forward", k - b, dt, sched.times[0])
                    except ModeMismatchError:
                        continue
                    kind = "forward"
                elif after.size:
                    b = int(after[0])
                    try:
                        path = extend_reference(system, states[b - 1: b + 1], sched.ref_modes[b - 1: b + 1],
                                                j, "backward", b - k, dt, sched.times[0] + (b - 1) * dt)
                    except ModeMismatchError:
                        continue
                    kind = "backward"
                else:
                    continue
            x_ref = states[k] if kind == "nominal" else (path[-1] if kind == "forward" else path[0])
            ref[k, :n] = x_ref
            kff[k, :m] = sched.k_ff[b]
            K[k, :m, :n] = sched.K_fb[b]
            valid[k] = True
            src[k] = kind
        out[j] = Branch(ref, kff, K, valid, src)
    return out


# ---------------------------------------------------------------------------
# controlled rollouts

@dataclass
class Rollout:
    """Batched controlled rollout; arrays are zero-padded per row."""

    states: np.ndarray   # (B, N + 1, nmax)
    modes: np.ndarray    # (B, N + 1)
    aux: np.ndarray      # (B, N + 1, aux_dim)
    controls: np.ndarray  # (B, N, mmax)
    noises: np.ndarray   # (B, N, mmax)
    alive: np.ndarray    # (B,)
    fired: np.ndarray    # (B, N) transition index or -1
    used_branch: np.ndarray  # (B, N) "nominal" / "forward" / "backward" / "none"


def rollout_batch(system: HybridSystem, gains: GainSchedule, X0, modes0, aux0, dW,
                  on_mismatch: str = "zero") -> Rollout:
    """Roll a padded batch forward under ``u = k_ff + K (x - ref)``.

    ``dW`` has shape ``(B, N, mmax)`` and holds raw Wiener increments.  Rows
    that diverge are marked dead and frozen.  A row whose mode has no valid
    branch at some step gets zero control (``on_mismatch="zero"``) or raises
    :class:`ModeMismatchError` (``"raise"``).
    """
    X = np.array(X0, dtype=float)
    B, nmax = X.shape
    N = len(gains)
    mmax = system.max_noise_dim
    modes = np.array(modes0, dtype=int)
    aux = np.array(aux0, dtype=float).reshape(B, system.aux_dim)
    states = np.zeros((B, N + 1, nmax))
    mode_hist = np.zeros((B, N + 1), dtype=int)
    aux_hist = np.zeros((B, N + 1, system.aux_dim))
    controls = np.zeros((B, N, mmax))
    fired = np.full((B, N), -1, dtype=int)
    used = np.empty((B, N), dtype=object)
    alive = np.ones(B, dtype=bool)
    states[:, 0], mode_hist[:, 0], aux_hist[:, 0] = X, modes, aux
    for k in range(N):
        U = np.zeros((B, mmax))
        for j, br in gains.branches.items():
            idx = np.flatnonzero(modes == j)
            if idx.size == 0:
                continue
            if br.valid[k]:
                dx = X[idx] - br.ref[k]
                U[idx] = br.k_ff[k] + (br.K_fb[k] * dx[:, None, :]).sum(axis=-1)
                used[idx, k] = br.source[k]
            else:
                if on_mismatch == "raise":
                    raise ModeMismatchError(f"no reference branch for mode {j} at step {k}")
                used[idx, k] = "none"
        U[~alive] = 0.0
        res = advance_batch(system, gains.times[k], X, modes, aux, U, gains.dt, dW[:, k])
        ok = res.finite & alive
        alive = ok
        X = np.where(ok[:, None], res.x, X)
        modes = np.where(ok, res.modes, modes)
        aux = np.where(ok[:, None], res.aux, aux)
        fired[:, k] = np.where(ok, res.fired, -1)
        controls[:, k] = U
        states[:, k + 1], mode_hist[:, k + 1], aux_hist[:, k + 1] = X, modes, aux
    return Rollout(states, mode_hist, aux_hist, controls, np.asarray(dW, dtype=float), alive, fired, used)


def rollout_controlled(system: HybridSystem, gains: GainSchedule, x0: HybridState, noise):
    """Single-particle controlled rollout.

    ``noise`` is either an ``(N, noise_dim)`` array of raw Wiener increments
    or a numpy Generator to draw them from.  Returns
    ``(states, controls, noises, modes, transitions)`` where ``transitions``
    lists ``(step, source, target)``.
    """
    N = len(gains)
    nmax, mmax = system.max_state_dim, system.max_noise_dim
    if isinstance(noise, np.random.Generator):
        dW = noise.standard_normal((N, mmax)) * np.sqrt(gains.dt)
    else:
        dW = np.zeros((N, mmax))
        arr = np.asarray(noise, dtype=float).reshape(N, -1)
        dW[:, : arr.shape[1]] = arr
    X0 = np.zeros((1, nmax))
    X0[0, : x0.x.size] = x0.x
    aux = x0.aux if x0.aux.size == system.aux_dim else np.zeros(system.aux_dim)
    ro = rollout_batch(system, gains, X0, [x0.mode], aux[None], dW[None], on_mismatch="raise")
    if not ro.alive[0]:
        raise NumericalDivergenceError("controlled rollout diverged")
    states, controls, noises = [], [], []
    for k in range(N + 1):
        n = system.modes[ro.modes[0, k]].state_dim
        states.append(ro.states[0, k, :n].copy())
        if k < N:
            m = system.modes[ro.modes[0, k]].control_dim
            controls.append(ro.controls[0, k, :m].copy())
            noises.append(ro.noises[0, k, :m].copy())
    transitions = [(k + 1, system.transitions[f].source, system.transitions[f].target)
                   for k, f in enumerate(ro.fired[0]) if f >= 0]
    return states, controls, noises, ro.modes[0].copy(), transitions
