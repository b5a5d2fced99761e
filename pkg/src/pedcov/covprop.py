"""First-order (Jacobian) covariance propagation through the SFM transition."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import sfm
from .gauss import SIGMA_FLOOR, Gaussian2D, Vec2
from .sfm import AgentState, SfmNeighbor, SfmParams

INIT_POS_STD = 0.05
INIT_VEL_STD = 0.1
PD_INFLATE = 1e-6


@dataclass(frozen=True)
class StateGaussian:
    mean: np.ndarray  # (4,) = pos, vel
    cov: np.ndarray  # (4, 4)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(4, 4)
        if not np.allclose(cov, cov.T, atol=1e-9, rtol=0.0):
            raise ValueError("state covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-9:
            raise ValueError("state covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def default_initial_cov(pos_std: float = INIT_POS_STD, vel_std: float = INIT_VEL_STD) -> np.ndarray:
    return np.diag([pos_std**2, pos_std**2, vel_std**2, vel_std**2])


class Transition(Protocol):
    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...


class SfmTransition:
    """One SFM step on the 4-vector state with neighbours and goal held fixed."""

    def __init__(self, neighbors: Sequence[AgentState], goal, p: SfmParams):
        self.neighbors = list(neighbors)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.p = p

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return sfm.step(AgentState.from_vector(x), self.neighbors, self.goal, self.p).as_vector()

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return sfm.jacobian(AgentState.from_vector(x), self.neighbors, self.goal, self.p)


class AffineTransition:
    """x -> A x + b, with its exact Jacobian."""

    def __init__(self, A, b=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.zeros(len(self.A)) if b is None else np.asarray(b, dtype=np.float64)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.A


def propagate(sg: StateGaussian, transition: Transition) -> StateGaussian:
    G = transition.jacobian(sg.mean)
    cov = G @ sg.cov @ G.T
    return StateGaussian(transition(sg.mean), 0.5 * (cov + cov.T))


def propagate_step(sg: StateGaussian, neighbors: Sequence[AgentState], goal, p: SfmParams) -> StateGaussian:
    return propagate(sg, SfmTransition(neighbors, goal, p))


def position_gaussian(sg: StateGaussian) -> Gaussian2D:
    block = sg.cov[:2, :2].copy()
    sx2 = max(block[0, 0], SIGMA_FLOOR**2)
    sy2 = max(block[1, 1], SIGMA_FLOOR**2)
    if sx2 * sy2 - block[0, 1] * block[1, 0] <= 0.0:
        warnings.warn("position covariance not positive definite; inflating diagonal", RuntimeWarning, stacklevel=2)
        block = block + PD_INFLATE * np.eye(2)
    return Gaussian2D.from_cov(Vec2.of(sg.mean[:2]), block)


def rollout_with_covariance(
    initial: StateGaussian,
    neighbor_tracks: Sequence[SfmNeighbor],
    goal,
    horizon: int,
    p: SfmParams,
) -> list[Gaussian2D]:
    """Propagate the agent's state Gaussian while neighbours follow the joint mean rollout."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = len(neighbor_tracks)
    if n:
        nb_pos, nb_vel = sfm.joint_rollout(
            [initial.mean[:2]] + [t.state.pos for t in neighbor_tracks],
            [initial.mean[2:]] + [t.state.vel for t in neighbor_tracks],
            [goal] + [t.goal for t in neighbor_tracks],
            [p.v_desired] + [t.v_desired for t in neighbor_tracks],
            horizon - 1,
            p,
        )
    snapshots: list[list[AgentState]] = [[t.state for t in neighbor_tracks]]
    for k in range(horizon - 1):
        snapshots.append([AgentState(nb_pos[k, j + 1], nb_vel[k, j + 1]) for j in range(n)])

    out = []
    sg = initial
    for t in range(horizon):
        sg = propagate_step(sg, snapshots[t], goal, p)
        out.append(position_gaussian(sg))
    return out


def fp_predict(
    initial_state: AgentState,
    neighbor_tracks: Sequence[SfmNeighbor],
    goal,
    horizon: int,
    p: SfmParams,
    init_cov: np.ndarray | None = None,
) -> list[Gaussian2D]:
    cov = default_initial_cov() if init_cov is None else init_cov
    return rollout_with_covariance(StateGaussian(initial_state.as_vector(), cov), neighbor_tracks, goal, horizon, p)

