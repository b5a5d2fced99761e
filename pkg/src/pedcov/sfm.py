"""Social Force Model transition, joint rollout and numerical Jacobian.

The core force routine is vectorised over leading batch dimensions so the
same code serves single-agent calls, joint multi-agent rollouts and Monte-Carlo
sampling in the FP tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dataset import T_PRED, TrackletWindow

V_MAX = 2.5
GOAL_TOL = 0.05
COINCIDENT_EPS = 1e-6
JACOBIAN_H = 1e-5


@dataclass(frozen=True)
class SfmParams:
    tau: float = 0.5
    v_desired: float = 1.34
    A: float = 2.1
    B: float = 0.3
    lambda_aniso: float = 0.4
    dt: float = 0.4
    radius: float = 0.4
    v_max: float = V_MAX

    def __post_init__(self):
        if self.tau <= 0 or self.B <= 0 or self.dt <= 0:
            raise ValueError("tau, B and dt must be positive")
        if self.A < 0:
            raise ValueError("A must be non-negative")
        if not 0.0 <= self.lambda_aniso <= 1.0:
            raise ValueError("lambda_aniso must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SfmParams":
        return cls(**d)


@dataclass(frozen=True)
class AgentState:
    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=np.float64).reshape(2)
        vel = np.asarray(self.vel, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("agent state must be finite")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "vel", vel)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    @classmethod
    def from_vector(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:2], x[2:4])


@dataclass(frozen=True)
class SfmNeighbor:
    """A neighbour taking part in a joint rollout."""

    state: AgentState
    goal: np.ndarray
    v_desired: float


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def force_arrays(pos, vel, goal, v_des, nb_pos, nb_mask, p: SfmParams) -> np.ndarray:
    """Total social force.

    Shapes: ``pos``, ``vel``, ``goal`` (..., 2); ``v_des`` (...);
    ``nb_pos`` (..., M, 2); ``nb_mask`` (..., M).
    """
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    to_goal = np.asarray(goal, dtype=np.float64) - pos
    dist_goal = _norm(to_goal)
    at_goal = dist_goal < GOAL_TOL
    e_goal = np.where(at_goal[..., None], 0.0, to_goal / np.maximum(dist_goal, 1e-300)[..., None])
    desired = np.asarray(v_des, dtype=np.float64)[..., None] * e_goal
    force = (desired - vel) / p.tau

    nb_pos = np.asarray(nb_pos, dtype=np.float64)
    if nb_pos.shape[-2] == 0:
        return force
    diff = pos[..., None, :] - nb_pos
    d = _norm(diff)

    # Anisotropy uses the desired direction; at the goal fall back to the
    # velocity direction, and to isotropic weighting when at rest there.
    speed = _norm(vel)
    moving = speed > 1e-9
    e_vel = np.where(moving[..., None], vel / np.maximum(speed, 1e-300)[..., None], 0.0)
    e_motion = np.where(at_goal[..., None], e_vel, e_goal)
    has_dir = ~at_goal | moving

    # A neighbour on top of the agent pushes it straight back along its own
    # heading (zero without one), which keeps the force rotation-covariant.
    coincident = d < 1e-12
    n_hat = diff / np.maximum(d, 1e-300)[..., None]
    if np.any(coincident):
        n_hat = np.where(coincident[..., None], -e_motion[..., None, :], n_hat)
        d = np.where(coincident, COINCIDENT_EPS, d)
    cos_phi = -np.sum(e_motion[..., None, :] * n_hat, axis=-1)
    cos_phi = np.where(has_dir[..., None], cos_phi, 1.0)
    lam = p.lambda_aniso
    w = lam + (1.0 - lam) * (1.0 + cos_phi) / 2.0

    mag = p.A * np.exp((p.radius - d) / p.B) * w
    mag = np.where(np.asarray(nb_mask, dtype=bool), mag, 0.0)
    return force + np.sum(mag[..., None] * n_hat, axis=-2)


def clip_speed(vel: np.ndarray, v_max: float) -> np.ndarray:
    speed = _norm(vel)
    scale = np.where(speed > v_max, v_max / np.maximum(speed, 1e-300), 1.0)
    return vel * scale[..., None]


def step_arrays(pos, vel, goal, v_des, nb_pos, nb_mask, p: SfmParams):
    f = force_arrays(pos, vel, goal, v_des, nb_pos, nb_mask, p)
    new_vel = clip_speed(np.asarray(vel) + f * p.dt, p.v_max)
    return np.asarray(pos) + new_vel * p.dt, new_vel


def _neighbor_arrays(neighbors: Sequence[AgentState]):
    if not neighbors:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    return np.stack([n.pos for n in neighbors]), np.ones(len(neighbors), dtype=bool)


def social_force(s: AgentState, neighbors: Sequence[AgentState], goal, p: SfmParams) -> np.ndarray:
    nb_pos, nb_mask = _neighbor_arrays(neighbors)
    return force_arrays(s.pos, s.vel, goal, p.v_desired, nb_pos, nb_mask, p)


def step(s: AgentState, neighbors: Sequence[AgentState], goal, p: SfmParams) -> AgentState:
    nb_pos, nb_mask = _neighbor_arrays(neighbors)
    pos, vel = step_arrays(s.pos, s.vel, goal, p.v_desired, nb_pos, nb_mask, p)
    return AgentState(pos, vel)


def joint_rollout(pos, vel, goals, v_des, horizon: int, p: SfmParams):
    """Advance N agents together; each step uses the previous-step snapshot.

    Returns positions and velocities of shape (horizon, N, 2).
    """
    pos = np.array(pos, dtype=np.float64).reshape(-1, 2)
    vel = np.array(vel, dtype=np.float64).reshape(-1, 2)
    goals = np.asarray(goals, dtype=np.float64).reshape(-1, 2)
    v_des = np.asarray(v_des, dtype=np.float64).reshape(-1)
    n = len(pos)
    others = ~np.eye(n, dtype=bool)
    out_pos = np.zeros((horizon, n, 2))
    out_vel = np.zeros((horizon, n, 2))
    for t in range(horizon):
        nb_pos = np.broadcast_to(pos[None, :, :], (n, n, 2))
        pos, vel = step_arrays(pos, vel, goals, v_des, nb_pos, others, p)
        out_pos[t] = pos
        out_vel[t] = vel
    return out_pos, out_vel


def rollout(
    last_obs_state: AgentState,
    neighbor_tracks: Sequence[SfmNeighbor],
    goal,
    horizon: int,
    p: SfmParams,
) -> np.ndarray:
    """Mean future positions of the agent, shape (horizon, 2)."""
    if horizon <= 0:
        return np.zeros((0, 2))
    pos = [last_obs_state.pos] + [n.state.pos for n in neighbor_tracks]
    vel = [last_obs_state.vel] + [n.state.vel for n in neighbor_tracks]
    goals = [np.asarray(goal, dtype=np.float64)] + [np.asarray(n.goal) for n in neighbor_tracks]
    v_des = [p.v_desired] + [n.v_desired for n in neighbor_tracks]
    out_pos, _ = joint_rollout(pos, vel, goals, v_des, horizon, p)
    return out_pos[:, 0, :]


def jacobian(s: AgentState, neighbors: Sequence[AgentState], goal, p: SfmParams, h: float = JACOBIAN_H) -> np.ndarray:
    """Central-difference Jacobian of ``step`` w.r.t. (pos.x, pos.y, vel.x, vel.y)."""
    x0 = s.as_vector()
    jac = np.zeros((4, 4))
    for k in range(4):
        dx = np.zeros(4)
        dx[k] = h
        plus = step(AgentState.from_vector(x0 + dx), neighbors, goal, p).as_vector()
        minus = step(AgentState.from_vector(x0 - dx), neighbors, goal, p).as_vector()
        jac[:, k] = (plus - minus) / (2.0 * h)
    return jac


# ---------------------------------------------------------------------------
# Window -> SFM scene
# ---------------------------------------------------------------------------

def mean_observed_speed(track: np.ndarray, mask: np.ndarray | None, dt: float, v_max: float = V_MAX) -> float:
    if mask is None:
        mask = np.ones(len(track), dtype=bool)
    pair = mask[1:] & mask[:-1]
    if not np.any(pair):
        return 0.0
    speeds = _norm(np.diff(track, axis=0))[pair] / dt
    return float(np.clip(speeds.mean(), 0.0, v_max))


@dataclass
class SfmScene:
    agent: AgentState
    v_desired: float
    neighbors: list[SfmNeighbor] = field(default_factory=list)


GoalFn = Callable[[np.ndarray], np.ndarray]


def scene_from_window(w: TrackletWindow, p: SfmParams, neighbor_goal_fn: GoalFn | None = None) -> SfmScene:
    """Initial SFM states for the agent and the neighbours present at the last observed step.

    Neighbour goals come from ``neighbor_goal_fn`` (applied to fully observed
    neighbour tracks) or from constant-velocity extrapolation.
    """
    agent_vel = (w.obs[-1] - w.obs[-2]) / w.dt
    agent = AgentState(w.obs[-1], agent_vel)
    v_des = mean_observed_speed(w.obs, None, w.dt, p.v_max)
    neighbors = []
    for nb in w.neighbors:
        if not nb.mask[-1]:
            continue
        if nb.mask[-2]:
            vel = (nb.pos[-1] - nb.pos[-2]) / w.dt
        else:
            vel = np.zeros(2)
        if neighbor_goal_fn is not None and np.all(nb.mask):
            goal = np.asarray(neighbor_goal_fn(nb.pos), dtype=np.float64)
        else:
            goal = nb.pos[-1] + vel * (T_PRED * w.dt)
        nb_vdes = mean_observed_speed(nb.pos, nb.mask, w.dt, p.v_max)
        neighbors.append(SfmNeighbor(AgentState(nb.pos[-1], vel), goal, nb_vdes))
    return SfmScene(agent, v_des, neighbors)


def rollout_window(
    w: TrackletWindow,
    goal,
    p: SfmParams,
    horizon: int = T_PRED,
    neighbor_goal_fn: GoalFn | None = None,
) -> np.ndarray:
    scene = scene_from_window(w, p, neighbor_goal_fn)
    return rollout(scene.agent, scene.neighbors, goal, horizon, replace(p, v_desired=scene.v_desired))

