import time

import numpy as np
import pytest
import torch

from pedcov import covnet as cn
from pedcov.dataset import T_OBS, T_PRED, NeighborTrack, TrackletWindow
from pedcov.goalnet import GoalTrainConfig, train_goal
from pedcov.pipeline import compute_goals, compute_sfm_means
from pedcov.sfm import SfmParams
from pedcov.train import SyntheticSpec, TrainConfig, make_synthetic, train_on_means

TINY = cn.CovNetConfig(hidden=5, latent=3, attn=4, nb_embed=4, dropout=0.1)


def random_window(rng: np.random.Generator, n_neighbors: int = 2, agent_id: int = 0) -> TrackletWindow:
    """A walker with small random heading changes plus partially observed neighbours."""
    start = rng.uniform(-5, 5, size=2)
    heading = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.6, 1.6)
    angles = heading + np.cumsum(rng.normal(0, 0.1, T_OBS + T_PRED))
    steps = 0.4 * speed * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    track = start + np.cumsum(steps, axis=0)
    neighbors = []
    for j in range(n_neighbors):
        pos = track[:T_OBS] + rng.uniform(-4, 4, size=2) + rng.normal(0, 0.2, size=(T_OBS, 2))
        mask = np.ones(T_OBS, dtype=bool)
        mask[: rng.integers(0, 4)] = False
        pos[~mask] = 0.0
        neighbors.append(NeighborTrack(agent_id + 100 + j, pos, mask))
    return TrackletWindow(agent_id, track[:T_OBS], track[T_OBS:], neighbors)


def straight_means(windows) -> np.ndarray:
    """Constant-velocity extrapolation of each window, (B, T_PRED, 2)."""
    out = []
    for w in windows:
        v = w.obs[-1] - w.obs[-2]
        out.append(w.obs[-1] + np.arange(1, T_PRED + 1)[:, None] * v)
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return cn.CovNetModel(TINY, seed=3)


class SyntheticRun:
    """Goal model + CovarianceNet trained on the heteroscedastic generator."""

    def __init__(self):
        t0 = time.perf_counter()
        self.spec = SyntheticSpec(seed=1, count=2000)
        self.train = make_synthetic(self.spec)
        self.test = make_synthetic(SyntheticSpec(seed=2, count=1000))
        self.params = SfmParams()
        self.goal = train_goal(self.train, GoalTrainConfig()).model
        goals = compute_goals(self.train, self.goal)
        means = compute_sfm_means(self.train, goals, self.params, self.goal)
        self.result = train_on_means(self.train, means, TrainConfig(epochs=50, seed=0))
        self.model = self.result.model
        test_goals = compute_goals(self.test, self.goal)
        self.test_means = compute_sfm_means(self.test, test_goals, self.params, self.goal)
        self.seconds = time.perf_counter() - t0


_RUN = {}


@pytest.fixture(scope="session")
def synthetic_run() -> SyntheticRun:
    if "run" not in _RUN:
        torch.set_num_threads(1)
        _RUN["run"] = SyntheticRun()
    return _RUN["run"]


def calibration_oracle(n_records: int, seed: int = 0, sigma_scale: float = 1.0):
    """Records whose ground truths are drawn from the predicted Gaussians themselves.

    Sampling uses a Cholesky factor built here, independently of the gauss module.
    ``sigma_scale`` inflates the reported sigmas after sampling.
    """
    from pedcov.metrics import records_from_arrays

    rng = np.random.default_rng(seed)
    shape = (n_records, T_PRED)
    mu = rng.uniform(-20, 20, size=shape + (2,))
    sx = rng.uniform(0.05, 3.0, size=shape)
    sy = rng.uniform(0.05, 3.0, size=shape)
    rho = rng.uniform(-0.9, 0.9, size=shape)
    z = rng.standard_normal(shape + (2,))
    dx = sx * z[..., 0]
    dy = sy * (rho * z[..., 0] + np.sqrt(1 - rho**2) * z[..., 1])
    truth = mu + np.stack([dx, dy], axis=-1)
    return records_from_arrays(mu, sx * sigma_scale, sy * sigma_scale, rho, truth)
