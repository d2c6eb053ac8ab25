import numpy as np
import pytest
from scipy.optimize import minimize

from spipf.errors import ModeMismatchError
from spipf.hybrid import HybridState
from spipf.ilqr import (
    ILQRSettings,
    _rollout,
    rollout_batch,
    rollout_controlled,
    solve_window,
    value_gradient,
    zero_schedule,
)
from spipf.measurement import CostEvaluator, accumulate_Su
from spipf.systems import bouncing_ball, linear_1d, simulate_truth, slip

TIGHT = ILQRSettings(max_iters=200, cost_tol=1e-14)


def _fixed(controls):
    return lambda k, s: controls[k]


def _bb_window(seed=0, start=38, end=52):
    bb = bouncing_ball()
    tr = simulate_truth(bb, HybridState(0, np.array([1.0, 0.0])), 0.8, 0.01, np.random.default_rng(seed))
    return bb, tr, CostEvaluator(bb, tr.measurements, start, end)


def _open_loop_cost(system, ev, x0, U):
    return _rollout(system, ev, x0, _fixed([np.atleast_1d(u) for u in U])).cost


def test_linear_quadratic_window_matches_direct_minimisation():
    lin = linear_1d(noise_scale=0.5)
    tr = simulate_truth(lin, HybridState(0, np.array([1.0])), 0.2, 0.01, np.random.default_rng(0))
    ev = CostEvaluator(lin, tr.measurements, 0, 20)
    x0 = HybridState(0, np.array([0.8]))
    sched = solve_window(lin, ev, x0, TIGHT)
    res = minimize(lambda U: _open_loop_cost(lin, ev, x0, U), np.zeros(20), method="BFGS",
                   options={"gtol": 1e-10})
    np.testing.assert_allclose(np.ravel(sched.k_ff), res.x, atol=1e-5)
    assert sched.cost == pytest.approx(res.fun, rel=1e-9)


def test_cost_history_descends_monotonically_across_impact():
    bb, tr, ev = _bb_window()
    sched = solve_window(bb, ev, tr.state(ev.start), ILQRSettings(max_iters=50))
    h = np.array(sched.cost_history)
    assert len(h) >= 2
    assert np.all(np.diff(h) <= 0)
    assert sched.transition_steps, "nominal should cross the impact inside the window"


def test_cost_history_descends_for_slip_touchdown():
    sl = slip()
    x0 = HybridState(0, np.array([0.0, 0.0, 2.05, 1.57, np.pi / 2]))
    tr = simulate_truth(sl, x0, 0.4, 0.001, np.random.default_rng(1))
    s = tr.transition_steps[0][0]
    ev = CostEvaluator(sl, tr.measurements, s - 6, s + 4)
    sched = solve_window(sl, ev, tr.state(s - 6), ILQRSettings(max_iters=40))
    assert np.all(np.diff(sched.cost_history) <= 0)


def _fd_grad(system, ev, state, controls, h=1e-6):
    g = np.zeros(state.x.size)
    for i in range(state.x.size):
        e = np.zeros(state.x.size)
        e[i] = h
        plus = _rollout(system, ev, HybridState(state.mode, state.x + e, state.t, state.aux), _fixed(controls))
        minus = _rollout(system, ev, HybridState(state.mode, state.x - e, state.t, state.aux), _fixed(controls))
        assert [x is None for x in plus.events] == [x is None for x in minus.events]
        g[i] = (plus.cost - minus.cost) / (2 * h)
    return g


def test_value_gradient_matches_fd_in_a_smooth_window():
    sl = slip()
    x0 = HybridState(1, np.array([1.5, 0.1, 1.8, -0.3]), aux=np.zeros(1))
    tr = simulate_truth(sl, x0, 0.02, 0.001, np.random.default_rng(2))
    ev = CostEvaluator(sl, tr.measurements, 0, 15)
    sched = solve_window(sl, ev, x0, TIGHT)
    nom = _rollout(sl, ev, x0, _fixed(list(sched.k_ff)))
    vx = value_gradient(sl, ev, nom)
    fd = _fd_grad(sl, ev, x0, list(sched.k_ff))
    assert np.linalg.norm(vx - fd) < 1e-4 * np.linalg.norm(fd)


def test_value_gradient_matches_fd_across_a_discrete_reset():
    # the discrete rollout resets at the step end, so its derivative uses D_xR
    bb, tr, ev = _bb_window(start=40, end=50)
    x0 = tr.state(40)
    sched = solve_window(bb, ev, x0, ILQRSettings(max_iters=200, cost_tol=1e-14, jump_jacobian="reset"))
    nom = _rollout(bb, ev, x0, _fixed(list(sched.k_ff)))
    assert any(e is not None for e in nom.events)
    vx = value_gradient(bb, ev, nom, kind="reset")
    fd = _fd_grad(bb, ev, x0, list(sched.k_ff))
    assert np.linalg.norm(vx - fd) < 1e-4 * np.linalg.norm(fd)


def test_zero_noise_controlled_rollout_reproduces_nominal():
    bb, tr, ev = _bb_window()
    sched = solve_window(bb, ev, tr.state(ev.start), ILQRSettings(max_iters=20))
    states, controls, noises, modes, transitions = rollout_controlled(
        bb, sched, tr.state(ev.start), np.zeros((ev.n_steps, 1)))
    for k in range(ev.n_steps):
        np.testing.assert_allclose(states[k], sched.ref_states[k], atol=1e-12)
        np.testing.assert_allclose(controls[k], sched.k_ff[k], atol=1e-12)
    assert modes[: ev.n_steps].tolist() == sched.ref_modes.tolist()
    assert [t[0] - 1 for t in transitions] == list(sched.transition_steps)
    # rollout cost equals the iLQR objective when the noise is zero
    su = accumulate_Su(ev, states, controls, noises, modes)
    assert su == pytest.approx(sched.cost, rel=1e-12)


def test_branches_cover_both_modes_with_extensions():
    bb, tr, ev = _bb_window()
    sched = solve_window(bb, ev, tr.state(ev.start), ILQRSettings(max_iters=20))
    k_jump = sched.transition_steps[0]
    fall, rise = sched.branches[0], sched.branches[1]
    assert np.all(fall.valid) and np.all(rise.valid)
    assert set(fall.source[: k_jump + 1]) == {"nominal"}
    assert set(fall.source[k_jump + 1:]) == {"forward"}
    assert set(rise.source[: k_jump + 1]) == {"backward"}
    assert set(rise.source[k_jump + 1:]) == {"nominal"}
    # the falling extension keeps falling below the ground
    assert fall.ref[-1, 0] < 0


def test_mismatch_policy_zero_versus_raise():
    sl = slip()
    x0 = HybridState(0, np.array([0.0, 0.0, 2.05, 1.0, np.pi / 2]))
    tr = simulate_truth(sl, x0, 0.02, 0.001, np.random.default_rng(3))
    ev = CostEvaluator(sl, tr.measurements, 0, 10)
    sched = solve_window(sl, ev, x0, ILQRSettings(max_iters=5))
    # the nominal never touches down, so a stance particle has no branch
    assert not np.any(sched.branches[1].valid)
    stance = np.zeros((1, 5))
    stance[0, :4] = [1.5, 0.0, 1.9, 0.0]
    ro = rollout_batch(sl, sched, stance, [1], np.zeros((1, 1)), np.zeros((1, 10, 3)))
    assert np.all(ro.controls == 0) and set(ro.used_branch[0]) == {"none"}
    with pytest.raises(ModeMismatchError):
        rollout_controlled(sl, sched, HybridState(1, stance[0, :4], aux=np.zeros(1)), np.zeros((10, 2)))


def test_zero_schedule_gives_zero_control():
    bb, tr, ev = _bb_window()
    sched = zero_schedule(bb, ev, tr.state(ev.start))
    ro = rollout_batch(bb, sched, np.array([[1.0, 0.0], [0.5, 1.0]]), [0, 1], np.zeros((2, 0)),
                       np.zeros((2, ev.n_steps, 1)))
    assert np.all(ro.controls == 0)


def test_generator_noise_is_reproducible():
    bb, tr, ev = _bb_window()
    sched = solve_window(bb, ev, tr.state(ev.start), ILQRSettings(max_iters=5))
    a = rollout_controlled(bb, sched, tr.state(ev.start), np.random.default_rng(9))
    b = rollout_controlled(bb, sched, tr.state(ev.start), np.random.default_rng(9))
    for x, y in zip(a[0], b[0]):
        np.testing.assert_array_equal(x, y)


def test_settings_validation():
    with pytest.raises(ValueError):
        ILQRSettings(max_iters=0)
    with pytest.raises(ValueError):
        ILQRSettings(jump_jacobian="magic")
    with pytest.raises(ValueError):
        ILQRSettings(reg_init=1.0, reg_max=0.1)
