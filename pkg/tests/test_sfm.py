import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedcov import sfm
from pedcov.sfm import V_MAX, AgentState, SfmNeighbor, SfmParams, jacobian, rollout, social_force, step

P = SfmParams()


def rot(theta):
    return np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])


def test_relaxation_only_force():
    s = AgentState([0, 0], [0, 0])
    np.testing.assert_allclose(social_force(s, [], [10, 0], P), [2.68, 0.0], atol=1e-12)


def test_at_goal_at_rest_has_zero_force():
    s = AgentState([3, 4], [0, 0])
    assert np.all(social_force(s, [], [3.01, 4.0], P) == 0.0)


def test_face_to_face_forces_mirror():
    a = AgentState([-1.0, 0.1], [1.0, 0.0])
    b = AgentState([1.0, -0.1], [-1.0, 0.0])
    fa = social_force(a, [b], [10, 0.1], P)
    fb = social_force(b, [a], [-10, -0.1], P)
    np.testing.assert_allclose(fb, -fa, atol=1e-12)
    # reflecting the whole scene across the x axis reflects the force
    M = np.diag([1.0, -1.0])
    ra = AgentState(M @ a.pos, M @ a.vel)
    rb = AgentState(M @ b.pos, M @ b.vel)
    np.testing.assert_allclose(social_force(ra, [rb], M @ [10, 0.1], P), M @ fa, atol=1e-12)


def test_coincident_neighbor_is_finite():
    s = AgentState([0, 0], [0.5, 0])
    f = social_force(s, [AgentState([0, 0], [0, 0])], [5, 0], P)
    assert np.all(np.isfinite(f))


def test_coincident_neighbor_pushes_back_along_heading():
    s = AgentState([1, 1], [0.5, 0])
    nb = [AgentState([1, 1], [0, 0])]
    f = social_force(s, nb, [1, 6], P) - social_force(s, [], [1, 6], P)
    assert f[0] == 0.0 and f[1] < 0.0
    # at the goal and at rest there is no heading, so no push at all
    rest = AgentState([2, 2], [0, 0])
    assert np.all(social_force(rest, [AgentState([2, 2], [0, 0])], [2, 2], P) == 0.0)
    R = rot(1.0)
    moved = social_force(AgentState(R @ s.pos, R @ s.vel), [AgentState(R @ nb[0].pos, nb[0].vel)], R @ [1, 6], P)
    np.testing.assert_allclose(moved, R @ social_force(s, nb, [1, 6], P), atol=1e-9)


def test_zero_force_step_advances_by_velocity():
    p = SfmParams(v_desired=1.0, A=0.0)
    s = step(AgentState([0, 0], [1, 0]), [], [100, 0], p)
    np.testing.assert_allclose(s.pos, [0.4, 0.0], atol=1e-12)
    np.testing.assert_allclose(s.vel, [1.0, 0.0], atol=1e-12)


def test_speed_clipped_to_v_max():
    p = SfmParams(v_desired=2.5, tau=0.05)
    s = step(AgentState([0, 0], [2.4, 0]), [], [100, 0], p)
    assert np.linalg.norm(s.vel) == pytest.approx(V_MAX, abs=1e-12)


def test_single_step_from_rest_matches_hand_computation():
    s = step(AgentState([0, 0], [0, 0]), [], [10, 0], P)
    # F = 1.34 / 0.5 = 2.68; vel' = F dt; pos' = vel' dt
    np.testing.assert_allclose(s.vel, [2.68 * 0.4, 0.0], atol=1e-12)
    np.testing.assert_allclose(s.pos, [2.68 * 0.4 * 0.4, 0.0], atol=1e-12)


def test_free_rollout_reaches_desired_speed():
    out = rollout(AgentState([0, 0], [0, 0]), [], [100, 0], 12, P)
    speeds = np.linalg.norm(np.diff(out, axis=0), axis=1) / P.dt
    assert np.all(np.abs(speeds[7:] - 1.34) < 0.01)


def test_rollout_at_goal_stays_put():
    out = rollout(AgentState([2, -1], [0, 0]), [], [2, -1], 12, P)
    np.testing.assert_allclose(out, np.tile([2, -1], (12, 1)), atol=1e-9)


def test_rollout_zero_horizon():
    assert rollout(AgentState([0, 0], [0, 0]), [], [5, 0], 0, P).shape == (0, 2)


def test_joint_rollout_uses_previous_snapshot():
    pos = np.array([[0.0, 0.0], [1.0, 0.2]])
    vel = np.array([[1.0, 0.0], [-1.0, 0.0]])
    goals = np.array([[10.0, 0.0], [-10.0, 0.2]])
    out_pos, _ = sfm.joint_rollout(pos, vel, goals, [1.3, 1.3], 1, P)
    # each agent steps against the other's *initial* state
    a = step(AgentState(pos[0], vel[0]), [AgentState(pos[1], vel[1])], goals[0], SfmParams(v_desired=1.3))
    b = step(AgentState(pos[1], vel[1]), [AgentState(pos[0], vel[0])], goals[1], SfmParams(v_desired=1.3))
    np.testing.assert_allclose(out_pos[0], [a.pos, b.pos], atol=1e-12)


def test_jacobian_without_forces_is_euler_structure():
    p = SfmParams(tau=1e9, A=0.0)
    J = jacobian(AgentState([0, 0], [0, 0]), [], [0, 0], p)
    dt = p.dt
    expected = np.block([[np.eye(2), dt * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    np.testing.assert_allclose(J, expected, atol=1e-4)


def test_jacobian_relaxation_derivative():
    J = jacobian(AgentState([0, 0], [0.3, 0.1]), [], [50, 0], P)
    np.testing.assert_allclose(J[2:, 2:], (1 - P.dt / P.tau) * np.eye(2), atol=1e-4)


def test_jacobian_converges_when_h_halved():
    s = AgentState([0, 0], [0.8, 0.2])
    nb = [AgentState([1.0, 0.6], [-0.5, 0.0])]
    J1 = jacobian(s, nb, [6, 1], P, h=1e-5)
    J2 = jacobian(s, nb, [6, 1], P, h=5e-6)
    assert np.max(np.abs(J1 - J2)) < 1e-6


def test_params_validation_and_round_trip():
    with pytest.raises(ValueError):
        SfmParams(tau=0)
    with pytest.raises(ValueError):
        SfmParams(A=-1)
    assert SfmParams.from_dict(P.to_dict()) == P


def test_scene_from_window_goals_and_speeds(rng):
    from tests.conftest import random_window

    w = random_window(rng, n_neighbors=2)
    scene = sfm.scene_from_window(w, P, neighbor_goal_fn=lambda track: track[-1] + 1.0)
    np.testing.assert_allclose(scene.agent.pos, w.obs[-1])
    np.testing.assert_allclose(scene.agent.vel, (w.obs[-1] - w.obs[-2]) / w.dt)
    expected_speed = np.mean(np.linalg.norm(np.diff(w.obs, axis=0), axis=1)) / w.dt
    assert scene.v_desired == pytest.approx(expected_speed)
    for nb, sn in zip([n for n in w.neighbors if n.mask[-1]], scene.neighbors):
        if nb.mask.all():
            np.testing.assert_allclose(sn.goal, nb.pos[-1] + 1.0)
        else:
            np.testing.assert_allclose(sn.goal, nb.pos[-1] + sn.state.vel * 12 * w.dt)


coords = st.floats(-5, 5)


@st.composite
def scenes(draw):
    n = draw(st.integers(0, 3))
    agent = AgentState([draw(coords), draw(coords)], [draw(st.floats(-1.5, 1.5)), draw(st.floats(-1.5, 1.5))])
    nbs = [
        SfmNeighbor(AgentState([draw(coords), draw(coords)], [draw(st.floats(-1, 1)), draw(st.floats(-1, 1))]),
                    np.array([draw(coords), draw(coords)]) * 3, draw(st.floats(0, 2)))
        for _ in range(n)
    ]
    goal = np.array([draw(coords), draw(coords)]) * 3
    return agent, nbs, goal


def _shift(agent, nbs, goal, f):
    a = AgentState(f(agent.pos), agent.vel)
    n = [SfmNeighbor(AgentState(f(x.state.pos), x.state.vel), f(x.goal), x.v_desired) for x in nbs]
    return a, n, f(goal)


@settings(max_examples=60, deadline=None)
@given(scenes(), st.floats(-100, 100), st.floats(-100, 100))
def test_rollout_translation_equivariant(scene, cx, cy):
    agent, nbs, goal = scene
    c = np.array([cx, cy])
    base = rollout(agent, nbs, goal, 12, P)
    moved = rollout(*_shift(agent, nbs, goal, lambda x: np.asarray(x) + c), 12, P)
    np.testing.assert_allclose(moved, base + c, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(scenes(), st.floats(0, 2 * math.pi))
def test_rollout_rotation_equivariant(scene, theta):
    agent, nbs, goal = scene
    R = rot(theta)
    base = rollout(agent, nbs, goal, 12, P)
    ra = AgentState(R @ agent.pos, R @ agent.vel)
    rn = [SfmNeighbor(AgentState(R @ x.state.pos, R @ x.state.vel), R @ x.goal, x.v_desired) for x in nbs]
    moved = rollout(ra, rn, R @ goal, 12, P)
    np.testing.assert_allclose(moved, base @ R.T, atol=1e-9)
    f = social_force(agent, [x.state for x in nbs], goal, P)
    np.testing.assert_allclose(social_force(ra, [x.state for x in rn], R @ goal, P), R @ f, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(scenes(), st.floats(0.5, 3.0))
def test_rollout_never_exceeds_v_max(scene, v_des):
    agent, nbs, goal = scene
    p = SfmParams(v_desired=v_des, tau=0.2, A=8.0)
    n = len(nbs) + 1
    pos = [agent.pos] + [x.state.pos for x in nbs]
    vel = [agent.vel] + [x.state.vel for x in nbs]
    goals = [goal] + [x.goal for x in nbs]
    _, vels = sfm.joint_rollout(pos, vel, goals, [v_des] * n, 12, p)
    assert np.all(np.linalg.norm(vels, axis=-1) <= V_MAX + 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_repulsion_decreases_with_distance(direction, vx, vy):
    s = AgentState([0, 0], [vx, vy])
    u = np.array([math.cos(direction), math.sin(direction)])
    base = social_force(s, [], [20, 5], P)
    mags = [np.linalg.norm(social_force(s, [AgentState(d * u, [0, 0])], [20, 5], P) - base)
            for d in np.linspace(0.2, 4.0, 20)]
    assert np.all(np.diff(mags) < 0)
