"""Benchmark hybrid systems and ground-truth simulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalDivergenceError
from .hybrid import HybridState, HybridSystem, ModeDynamics, Transition, step
from .measurement import MeasurementPath, generate_measurements


def _const(mat, x):
    mat = np.asarray(mat, dtype=float)
    return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)


# ---------------------------------------------------------------------------
# bouncing ball

@dataclass(frozen=True)
class BouncingBallParams:
    m: float = 1.0
    g: float = 9.81
    e: float = 1.0

    def __post_init__(self):
        if self.m <= 0 or self.g <= 0:
            raise ValueError("m and g must be positive")
        if not 0 < self.e <= 1:
            raise ValueError("restitution e must lie in (0, 1]")


def bouncing_ball(params: BouncingBallParams = BouncingBallParams(), noise_scale: float = 0.1,
                  sigma_B: float = 0.1) -> HybridSystem:
    """Vertical ball. Mode 0 falls (v <= 0), mode 1 rises; both share the same flow.

    State ``[z, v]``; control is a vertical force.
    """
    m, g, e = params.m, params.g, params.e
    chan = np.array([[0.0], [1.0 / m]])

    def drift(t, x, u):
        return np.stack([x[..., 1], (u[..., 0] - m * g) / m], axis=-1)

    def diffusion(t, x):
        return _const(chan, x)

    def jac(t, x, u):
        return np.array([[0.0, 1.0], [0.0, 0.0]]), chan

    falling = ModeDynamics(2, 1, drift, diffusion, jac, name="falling")
    rising = ModeDynamics(2, 1, drift, diffusion, jac, name="rising")

    impact = Transition(
        0, 1,
        guard=lambda t, x: x[..., 0],
        reset=lambda t, x, a: np.stack([x[..., 0], -e * x[..., 1]], axis=-1),
        guard_gradient=lambda t, x: (0.0, np.array([1.0, 0.0])),
        reset_jacobian=lambda t, x, a: (np.zeros(2), np.diag([1.0, -e])),
        name="impact",
    )
    apex = Transition(
        1, 0,
        guard=lambda t, x: x[..., 1],
        reset=lambda t, x, a: np.array(x, dtype=float, copy=True),
        guard_gradient=lambda t, x: (0.0, np.array([0.0, 1.0])),
        reset_jacobian=lambda t, x, a: (np.zeros(2), np.eye(2)),
        name="apex",
    )
    obs = lambda t, x: np.asarray(x, dtype=float)
    obs_jac = lambda t, x: np.eye(2)
    return HybridSystem((falling, rising), (impact, apex), (obs, obs), (sigma_B, sigma_B),
                        noise_scale, obs_dim=2, observation_jacobian=(obs_jac, obs_jac),
                        name="bouncing_ball")


def bouncing_ball_saltation(params: BouncingBallParams, v_pre: float, u: float = 0.0) -> np.ndarray:
    """Closed-form impact saltation matrix from the general formula.

    ``[[-e, 0], [(1 + e)(u - m g)/(m v-), -e]]``; the position row picks up
    ``-e`` because the guard is a position guard.
    """
    m, g, e = params.m, params.g, params.e
    return np.array([[-e, 0.0], [(1.0 + e) * (u - m * g) / (m * v_pre), -e]])


# ---------------------------------------------------------------------------
# spring-loaded inverted pendulum

@dataclass(frozen=True)
class SlipParams:
    m: float = 1.0
    k: float = 40.0
    r0: float = 2.0
    g: float = 9.81
    coriolis: float = 3.0  # coefficient of theta_dot * r_dot in the stance angle equation
    r_min: float = 1e-6

    def __post_init__(self):
        if min(self.m, self.k, self.r0, self.g) <= 0:
            raise ValueError("SLIP parameters must be positive")


FLIGHT_CHANNEL = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0],
                           [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def slip(params: SlipParams = SlipParams(), noise_scale: float = 0.01,
         sigma_B: float = 0.1) -> HybridSystem:
    """Two-mode SLIP hopper.

    Flight (mode 0): ``[p_x, v_x, p_z, v_z, theta]``.
    Stance (mode 1): ``[theta, theta_dot, r, r_dot]``; the toe position is kept
    in the auxiliary vector.  Both modes observe ``[v_x, p_z, v_z, theta]`` of
    the body so the observation dimension is shared.
    """
    m, k, r0, g, c = params.m, params.k, params.r0, params.g, params.coriolis

    def flight_drift(t, x, u):
        zero = np.zeros(np.shape(x)[:-1])
        return np.stack([x[..., 1], u[..., 0], x[..., 3], -g + u[..., 1], u[..., 2] + zero], axis=-1)

    def flight_diffusion(t, x):
        return _const(FLIGHT_CHANNEL, x)

    flight_A = np.zeros((5, 5))
    flight_A[0, 1] = flight_A[2, 3] = 1.0

    def flight_jac(t, x, u):
        return flight_A, FLIGHT_CHANNEL

    def stance_drift(t, x, u):
        th, thd, r, rd = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        return np.stack([
            thd,
            (-c * thd * rd - g * np.cos(th)) / r,
            rd + m / r ** 2 * u[..., 0],
            k * (r0 - r) / m - g * np.sin(th) + thd ** 2 * r + k / m * u[..., 1],
        ], axis=-1)

    def stance_diffusion(t, x):
        r = x[..., 2]
        out = np.zeros(np.shape(x)[:-1] + (4, 2))
        out[..., 2, 0] = m / r ** 2
        out[..., 3, 1] = k / m
        return out

    def stance_jac(t, x, u):
        th, thd, r, rd = x
        A = np.array([
            [0.0, 1.0, 0.0, 0.0],
            [g * np.sin(th) / r, -c * rd / r, (c * thd * rd + g * np.cos(th)) / r ** 2, -c * thd / r],
            [0.0, 0.0, -2.0 * m * u[0] / r ** 3, 1.0],
            [-g * np.cos(th), 2.0 * thd * r, -k / m + thd ** 2, 0.0],
        ])
        B = np.array([[0.0, 0.0], [0.0, 0.0], [m / r ** 2, 0.0], [0.0, k / m]])
        return A, B

    flight = ModeDynamics(5, 3, flight_drift, flight_diffusion, flight_jac, name="flight")
    stance = ModeDynamics(4, 2, stance_drift, stance_diffusion, stance_jac,
                          singular=lambda x: np.abs(np.asarray(x)[..., 2]) < params.r_min,
                          name="stance")

    def touchdown_reset(t, x, a):
        px, vx, pz, vz, th = (x[..., i] for i in range(5))
        return np.stack([
            th,
            (px * vz - pz * vx) / r0 ** 2,
            np.full(np.shape(th), r0),
            -vx * np.cos(th) + vz * np.sin(th),
        ], axis=-1)

    def touchdown_jac(t, x, a):
        px, vx, pz, vz, th = x
        J = np.zeros((4, 5))
        J[0, 4] = 1.0
        J[1, :4] = [vz / r0 ** 2, -pz / r0 ** 2, -vx / r0 ** 2, px / r0 ** 2]
        J[3, 1] = -np.cos(th)
        J[3, 3] = np.sin(th)
        J[3, 4] = vx * np.sin(th) + vz * np.cos(th)
        return np.zeros(4), J

    def touchdown_aux(t, x, a):
        return (x[..., 0] - r0 * np.cos(x[..., 4]))[..., None]

    def liftoff_reset(t, x, a):
        th, thd, r, rd = (x[..., i] for i in range(4))
        toe = np.asarray(a, dtype=float)[..., 0]
        return np.stack([
            toe + r0 * np.cos(th),
            rd * np.cos(th) - r * thd * np.sin(th),
            r0 * np.sin(th),
            r0 * thd * np.cos(th) + rd * np.sin(th),
            th,
        ], axis=-1)

    def liftoff_jac(t, x, a):
        th, thd, r, rd = x
        s, co = np.sin(th), np.cos(th)
        J = np.array([
            [-r0 * s, 0.0, 0.0, 0.0],
            [-rd * s - r * thd * co, -r * s, -thd * s, co],
            [r0 * co, 0.0, 0.0, 0.0],
            [-r0 * thd * s + rd * co, r0 * co, 0.0, s],
            [1.0, 0.0, 0.0, 0.0],
        ])
        return np.zeros(5), J

    touchdown = Transition(
        0, 1,
        guard=lambda t, x: x[..., 2] - r0 * np.sin(x[..., 4]),
        reset=touchdown_reset,
        guard_gradient=lambda t, x: (0.0, np.array([0.0, 0.0, 1.0, 0.0, -r0 * np.cos(x[4])])),
        reset_jacobian=touchdown_jac,
        reset_aux=touchdown_aux,
        name="touchdown",
    )
    liftoff = Transition(
        1, 0,
        guard=lambda t, x: r0 - x[..., 2],
        reset=liftoff_reset,
        guard_gradient=lambda t, x: (0.0, np.array([0.0, 0.0, -1.0, 0.0])),
        reset_jacobian=liftoff_jac,
        name="liftoff",
    )

    def flight_obs(t, x):
        return np.asarray(x, dtype=float)[..., 1:5]

    flight_H = np.eye(5)[1:5]

    def stance_obs(t, x):
        x = np.asarray(x, dtype=float)
        th, thd, r, rd = (x[..., i] for i in range(4))
        return np.stack([rd * np.cos(th) - r * thd * np.sin(th), r * np.sin(th),
                         r * thd * np.cos(th) + rd * np.sin(th), th], axis=-1)

    def stance_obs_jac(t, x):
        th, thd, r, rd = x
        s, co = np.sin(th), np.cos(th)
        return np.array([
            [-rd * s - r * thd * co, -r * s, -thd * s, co],
            [r * co, 0.0, s, 0.0],
            [-r * thd * s + rd * co, r * co, thd * co, s],
            [1.0, 0.0, 0.0, 0.0],
        ])

    return HybridSystem((flight, stance), (touchdown, liftoff), (flight_obs, stance_obs),
                        (sigma_B, sigma_B), noise_scale, obs_dim=4, aux_dim=1,
                        observation_jacobian=(lambda t, x: flight_H, stance_obs_jac), name="slip")


# ---------------------------------------------------------------------------
# guardless linear test system

def linear_1d(a: float = -1.0, sigma: float = 1.0, noise_scale: float = 1.0,
              sigma_B: float = 0.1) -> HybridSystem:
    """Single-mode ``dx = (a x + sigma u) dt + sigma sqrt(eps) dW`` observed through ``h(x) = x``."""

    def drift(t, x, u):
        return a * x + sigma * u

    mode = ModeDynamics(1, 1, drift, lambda t, x: _const([[sigma]], x),
                        lambda t, x, u: (np.array([[a]]), np.array([[sigma]])), name="linear")
    return HybridSystem((mode,), (), (lambda t, x: np.asarray(x, dtype=float),), (sigma_B,),
                        noise_scale, obs_dim=1, observation_jacobian=(lambda t, x: np.eye(1),),
                        name="linear")


# ---------------------------------------------------------------------------
# truth simulation

@dataclass
class TruthTrajectory:
    """A simulated ground truth on the grid ``times`` (``L + 1`` points)."""

    times: np.ndarray
    states: list
    modes: np.ndarray
    aux: np.ndarray
    transition_steps: list = field(default_factory=list)  # (step index, source, target)
    measurements: MeasurementPath = None

    def state(self, i: int) -> HybridState:
        return HybridState(int(self.modes[i]), self.states[i], float(self.times[i]), self.aux[i])

    @property
    def first_transition_time(self) -> float:
        if not self.transition_steps:
            return float("inf")
        return float(self.times[self.transition_steps[0][0]])

    def padded(self, width: int) -> np.ndarray:
        out = np.zeros((len(self.states), width))
        for i, x in enumerate(self.states):
            out[i, : x.size] = x
        return out

    def to_csv(self, path, transitions_path=None) -> None:
        import csv

        width = max(x.size for x in self.states)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mode"] + [f"x_{k + 1}" for k in range(width)])
            for t, mode, x in zip(self.times, self.modes, self.states):
                vals = [repr(float(v)) for v in x] + [""] * (width - x.size)
                w.writerow([repr(float(t)), int(mode)] + vals)
        if transitions_path is not None:
            with open(transitions_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "from", "to"])
                for row in self.transition_steps:
                    w.writerow(list(row))


def simulate_truth(system: HybridSystem, x0: HybridState, T: float, dt: float, rng,
                   process_noise: bool = True, measurement_noise: bool = True) -> TruthTrajectory:
    """Uncontrolled noisy rollout plus measurements on ``round(T/dt)`` steps.

    ``transition_steps`` lists the grid index of the first post-jump state of
    every transition.  With both noise switches off the generator is never
    touched.
    """
    L = int(round(T / dt))
    s = HybridState(x0.mode, x0.x, x0.t,
                    x0.aux if x0.aux.size == system.aux_dim else np.zeros(system.aux_dim))
    times = x0.t + dt * np.arange(L + 1)
    states, modes, aux, events = [s.x.copy()], [s.mode], [s.aux.copy()], []
    for i in range(L):
        mode = system.modes[s.mode]
        dW = rng.standard_normal(mode.noise_dim) * np.sqrt(dt) if process_noise else np.zeros(mode.noise_dim)
        try:
            s, ev = step(system, s, np.zeros(mode.control_dim), dt, dW)
        except FloatingPointError as exc:
            raise NumericalDivergenceError(f"truth simulation diverged at step {i + 1}") from exc
        s = HybridState(s.mode, s.x, float(times[i + 1]), s.aux)
        if ev is not None:
            events.append((i + 1, ev.source, ev.target))
        states.append(s.x.copy())
        modes.append(s.mode)
        aux.append(s.aux.copy())
    modes = np.array(modes, dtype=int)
    meas = generate_measurements(system, times, states, modes, rng, noiseless=not measurement_noise)
    return TruthTrajectory(times, states, modes, np.array(aux).reshape(L + 1, system.aux_dim),
                           events, meas)
