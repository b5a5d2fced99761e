"""CovarianceNet: a CVAE that predicts per-step (sigma_x, sigma_y, rho) around SFM means.

Every positional input is expressed relative to the agent's last observed
position, so predicted uncertainties do not depend on where the scene sits
in the world frame.  Means are never produced by the network; they are the
SFM rollout passed through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import neural as nn
from .dataset import T_OBS, T_PRED, TrackletWindow, derive_kinematics
from .gauss import RHO_MAX, SIGMA_FLOOR, DiagGaussianN, Gaussian2D, Vec2

POS_SCALE = 5.0
LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0

Mode = Literal["prior-mean", "prior-sample"]


@dataclass(frozen=True)
class CovNetConfig:
    hidden: int = 64
    latent: int = 16
    attn: int = 32
    nb_embed: int = 32
    dropout: float = 0.1


class CovNetModel:
    def __init__(self, cfg: CovNetConfig | None = None, seed: int = 0, dtype=nn.DTYPE):
        self.cfg = cfg or CovNetConfig()
        c = self.cfg
        H, L = c.hidden, c.latent
        self.enc_traj = nn.LstmCellSpec("cov.enc_traj", 2, H)
        self.enc_vel = nn.LstmCellSpec("cov.enc_vel", 2, H)
        self.enc_acc = nn.LstmCellSpec("cov.enc_acc", 2, H)
        self.enc_fut = nn.LstmCellSpec("cov.enc_fut", 2, H)
        self.nb_embed = nn.DenseSpec("cov.nb_embed", 3, c.nb_embed)
        self.attention = nn.AttentionSpec("cov.attention", H, c.nb_embed, c.attn)
        self.nb_lstm = nn.LstmCellSpec("cov.nb_lstm", c.nb_embed, H)
        self.prior_mu = nn.MlpSpec("cov.prior_mu", H, H, L, c.dropout)
        self.prior_logsig = nn.MlpSpec("cov.prior_logsig", H, H, L, c.dropout)
        self.post_mu = nn.MlpSpec("cov.post_mu", 2 * H, H, L, c.dropout)
        self.post_logsig = nn.MlpSpec("cov.post_logsig", 2 * H, H, L, c.dropout)
        self.dec_init = nn.MlpSpec("cov.dec_init", H, H, H, c.dropout)
        self.dec_gru = nn.GruCellSpec("cov.dec_gru", 2 + L, H)
        self.sigma_head = nn.MlpSpec("cov.sigma_head", H, H, 2, c.dropout)
        self.rho_head = nn.MlpSpec("cov.rho_head", H, H, 1, c.dropout)
        self.store = nn.ParamStore(dtype)
        gen = torch.Generator().manual_seed(seed)
        for spec in self.specs():
            spec.init(self.store, gen)

    def specs(self):
        return (
            self.enc_traj, self.enc_vel, self.enc_acc, self.enc_fut,
            self.nb_embed, self.attention, self.nb_lstm,
            self.prior_mu, self.prior_logsig, self.post_mu, self.post_logsig,
            self.dec_init, self.dec_gru, self.sigma_head, self.rho_head,
        )

    @property
    def dtype(self):
        return self.store.dtype

    def save(self, path, extra: dict | None = None) -> None:
        nn.save_checkpoint(path, self.store, {"model": "covnet", "config": asdict(self.cfg), **(extra or {})})

    @classmethod
    def load(cls, path) -> "CovNetModel":
        arrays, meta = nn.load_arrays(path)
        if meta.get("model") != "covnet":
            raise ValueError(f"{path} is not a CovarianceNet checkpoint")
        model = cls(CovNetConfig(**meta["config"]))
        model.store.load_numpy(arrays)
        return model


@dataclass
class Batch:
    """Stacked, agent-relative network inputs for B windows."""

    obs: torch.Tensor  # (B, T_OBS, 2)
    vel: torch.Tensor  # (B, T_OBS, 2)
    acc: torch.Tensor  # (B, T_OBS, 2)
    nb_rel: torch.Tensor  # (B, M, T_OBS, 2)
    nb_mask: torch.Tensor  # (B, M, T_OBS) bool
    sfm_rel: torch.Tensor  # (B, T_PRED, 2)
    fut_rel: torch.Tensor | None  # (B, T_PRED, 2)

    def __len__(self) -> int:
        return self.obs.shape[0]


def make_batch(windows: Sequence[TrackletWindow], sfm_means, dtype=nn.DTYPE, with_future: bool = True) -> Batch:
    sfm_means = np.asarray(sfm_means, dtype=np.float64).reshape(len(windows), -1, 2)
    if sfm_means.shape[1] != T_PRED:
        raise ValueError(f"expected {T_PRED} SFM means per window, got {sfm_means.shape[1]}")
    B = len(windows)
    M = max([len(w.neighbors) for w in windows] + [1])
    last = np.stack([w.obs[-1] for w in windows])
    obs = np.stack([w.obs for w in windows]) - last[:, None]
    kin = [derive_kinematics(w) for w in windows]
    nb_rel = np.zeros((B, M, T_OBS, 2))
    nb_mask = np.zeros((B, M, T_OBS), dtype=bool)
    for b, w in enumerate(windows):
        for j, nbr in enumerate(w.neighbors):
            nb_mask[b, j] = nbr.mask
            nb_rel[b, j] = np.where(nbr.mask[:, None], nbr.pos - w.obs, 0.0)
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    fut = t(np.stack([w.fut for w in windows]) - last[:, None]) if with_future else None
    return Batch(
        obs=t(obs),
        vel=t(np.stack([k.vel for k in kin])),
        acc=t(np.stack([k.acc for k in kin])),
        nb_rel=t(nb_rel),
        nb_mask=torch.as_tensor(nb_mask),
        sfm_rel=t(sfm_means - last[:, None]),
        fut_rel=fut,
    )


@dataclass
class EncodedScene:
    e_hist: torch.Tensor
    e_neigh: torch.Tensor
    e_scene: torch.Tensor
    e_fut: torch.Tensor | None = None


def _history_states(model: CovNetModel, batch: Batch):
    p = model.store
    h_traj = nn.lstm_sequence(model.enc_traj, p, batch.obs / POS_SCALE)
    h_vel = nn.lstm_sequence(model.enc_vel, p, batch.vel)
    h_acc = nn.lstm_sequence(model.enc_acc, p, batch.acc)
    return h_traj, h_vel, h_acc


def encode_history(model: CovNetModel, batch: Batch, states=None) -> torch.Tensor:
    """Sum of the final hidden states of the position, velocity and acceleration LSTMs."""
    h_traj, h_vel, h_acc = states if states is not None else _history_states(model, batch)
    return h_traj[:, -1] + h_vel[:, -1] + h_acc[:, -1]


def encode_neighbors(model: CovNetModel, batch: Batch, h_traj: torch.Tensor | None = None):
    """Attention over neighbours at each observed step, summarised by an LSTM.

    Returns ``(final_hidden, attention_weights)``; weights have shape (B, T_OBS, M).
    """
    p = model.store
    if h_traj is None:
        h_traj = nn.lstm_sequence(model.enc_traj, p, batch.obs / POS_SCALE)
    present = batch.nb_mask.to(batch.obs.dtype).unsqueeze(-1)
    emb_in = torch.cat([batch.nb_rel / POS_SCALE, present], dim=-1)  # (B, M, T, 3)
    emb = nn.dense(model.nb_embed, p, emb_in)
    B = batch.obs.shape[0]
    h = batch.obs.new_zeros(B, model.cfg.hidden)
    c = batch.obs.new_zeros(B, model.cfg.hidden)
    weights = []
    for t in range(T_OBS):
        keys = emb[:, :, t, :]
        ctx, w = nn.additive_attention(model.attention, p, h_traj[:, t], keys, keys, batch.nb_mask[:, :, t])
        h, c = nn.lstm_step(model.nb_lstm, p, ctx, h, c)
        weights.append(w)
    return h, torch.stack(weights, dim=1)


def encode_scene(model: CovNetModel, batch: Batch, with_future: bool = False) -> EncodedScene:
    states = _history_states(model, batch)
    e_hist = encode_history(model, batch, states)
    e_neigh, _ = encode_neighbors(model, batch, states[0])
    e_fut = None
    if with_future:
        if batch.fut_rel is None:
            raise ValueError("future encoding requested but the batch has no ground-truth futures")
        e_fut = nn.lstm_sequence(model.enc_fut, model.store, batch.fut_rel / POS_SCALE)[:, -1]
    return EncodedScene(e_hist, e_neigh, e_hist + e_neigh, e_fut)


@dataclass
class LatentDist:
    """Batched diagonal Gaussian (torch tensors, differentiable)."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def to_diag(self, index: int = 0) -> DiagGaussianN:
        return DiagGaussianN(self.mu[index].detach().double().numpy(), self.sigma[index].detach().double().numpy())


def _latent(model, mu_spec, ls_spec, x, train_mode, rng) -> LatentDist:
    p = model.store
    mu = nn.mlp_forward(mu_spec, p, x, train_mode, rng)
    log_sigma = torch.clamp(nn.mlp_forward(ls_spec, p, x, train_mode, rng), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return LatentDist(mu, log_sigma)


def prior(model: CovNetModel, e_scene: torch.Tensor, train_mode: bool = False, rng=None) -> LatentDist:
    return _latent(model, model.prior_mu, model.prior_logsig, e_scene, train_mode, rng)


def posterior(model: CovNetModel, e_scene: torch.Tensor, e_fut: torch.Tensor | None, train_mode: bool = False, rng=None) -> LatentDist:
    if e_fut is None:
        raise ValueError("posterior needs the future-trajectory encoding")
    return _latent(model, model.post_mu, model.post_logsig, torch.cat([e_scene, e_fut], dim=-1), train_mode, rng)


def reparameterize(q: LatentDist, rng: torch.Generator | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    if eps is None:
        eps = torch.randn(q.mu.shape, generator=rng, dtype=torch.float64).to(q.mu.dtype)
    return q.mu + q.sigma * eps


def decode(model: CovNetModel, z: torch.Tensor, e_scene: torch.Tensor, sfm_rel: torch.Tensor,
           train_mode: bool = False, rng=None):
    """Per-step (sigma (B, T, 2), rho (B, T)) from the latent, scene code and SFM means.

    ``sfm_rel`` holds SFM means relative to the last observed position; the
    GRU input at step t is the previous mean (origin at t = 1) and z.
    """
    if sfm_rel.shape[-2] != T_PRED:
        raise ValueError(f"expected {T_PRED} SFM means, got {sfm_rel.shape[-2]}")
    p = model.store
    h = nn.mlp_forward(model.dec_init, p, e_scene, train_mode, rng)
    prev = torch.cat([torch.zeros_like(sfm_rel[:, :1]), sfm_rel[:, :-1]], dim=1) / POS_SCALE
    sigmas, rhos = [], []
    for t in range(T_PRED):
        h = nn.gru_step(model.dec_gru, p, torch.cat([prev[:, t], z], dim=-1), h)
        sigmas.append(F.softplus(nn.mlp_forward(model.sigma_head, p, h, train_mode, rng)) + SIGMA_FLOOR)
        rhos.append(RHO_MAX * torch.tanh(nn.mlp_forward(model.rho_head, p, h, train_mode, rng)[..., 0]))
    return torch.stack(sigmas, dim=1), torch.stack(rhos, dim=1)


def bivariate_nll(mu: torch.Tensor, sigma: torch.Tensor, rho: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Elementwise negative log density; ``mu``/``x``/``sigma`` (..., 2), ``rho`` (...)."""
    d = (x - mu) / sigma
    one_m = 1.0 - rho * rho
    quad = (d[..., 0] ** 2 - 2.0 * rho * d[..., 0] * d[..., 1] + d[..., 1] ** 2) / one_m
    return torch.log(2.0 * math.pi * sigma[..., 0] * sigma[..., 1] * torch.sqrt(one_m)) + 0.5 * quad


@dataclass
class PredictedDistribution:
    gaussians: list[Gaussian2D]

    def __len__(self) -> int:
        return len(self.gaussians)

    def __iter__(self):
        return iter(self.gaussians)


def predict_params(model: CovNetModel, windows: Sequence[TrackletWindow], sfm_means,
                   mode: Mode = "prior-mean", rng: torch.Generator | None = None):
    """Batched inference: returns numpy (sigma (B, T, 2), rho (B, T))."""
    batch = make_batch(windows, sfm_means, model.dtype, with_future=False)
    with torch.no_grad():
        enc = encode_scene(model, batch)
        p = prior(model, enc.e_scene)
        z = p.mu if mode == "prior-mean" else reparameterize(p, rng)
        sigma, rho = decode(model, z, enc.e_scene, batch.sfm_rel)
    return sigma.to(torch.float64).numpy(), rho.to(torch.float64).numpy()


def assemble(sfm_means: np.ndarray, sigma: np.ndarray, rho: np.ndarray) -> PredictedDistribution:
    return PredictedDistribution([
        Gaussian2D(Vec2(float(m[0]), float(m[1])), float(s[0]), float(s[1]), float(r))
        for m, s, r in zip(sfm_means, sigma, rho)
    ])


def predict_distribution(model: CovNetModel, window: TrackletWindow, sfm_means,
                         mode: Mode = "prior-mean", rng: torch.Generator | None = None) -> PredictedDistribution:
    sfm_means = np.asarray(sfm_means, dtype=np.float64)
    sigma, rho = predict_params(model, [window], sfm_means[None], mode, rng)
    return assemble(sfm_means, sigma[0], rho[0])
