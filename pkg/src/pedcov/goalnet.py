"""Endpoint (goal) predictor: per-step embedding, one self-attention block, pooled regression head.

Inputs are positions relative to the last observed position plus velocities,
so the predicted goal moves rigidly with the window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import neural as nn
from .dataset import T_OBS, TrackletWindow

log = logging.getLogger(__name__)

POS_SCALE = 5.0
DISP_SCALE = 5.0


@dataclass(frozen=True)
class GoalConfig:
    d_model: int = 32
    n_heads: int = 2
    ffn_size: int = 64
    head_hidden: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class GoalTrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 40


class GoalModel:
    def __init__(self, cfg: GoalConfig | None = None, seed: int = 0, dtype=nn.DTYPE):
        self.cfg = cfg or GoalConfig()
        c = self.cfg
        self.embed = nn.DenseSpec("goal.embed", 4, c.d_model)
        self.qkv = nn.DenseSpec("goal.qkv", c.d_model, 3 * c.d_model)
        self.out = nn.DenseSpec("goal.attn_out", c.d_model, c.d_model)
        self.ff1 = nn.DenseSpec("goal.ff1", c.d_model, c.ffn_size)
        self.ff2 = nn.DenseSpec("goal.ff2", c.ffn_size, c.d_model)
        self.head = nn.MlpSpec("goal.head", 2 * c.d_model, c.head_hidden, 2, c.dropout)
        self.store = nn.ParamStore(dtype)
        gen = torch.Generator().manual_seed(seed)
        for spec in (self.embed, self.qkv, self.out, self.ff1, self.ff2, self.head):
            spec.init(self.store, gen)
        self.store.add("goal.pos_embed", nn._uniform(gen, (T_OBS, c.d_model), 0.1, dtype))
        for ln in ("goal.ln1", "goal.ln2"):
            self.store.add(f"{ln}.g", torch.ones(c.d_model))
            self.store.add(f"{ln}.b", torch.zeros(c.d_model))

    def _layer_norm(self, name: str, x: torch.Tensor) -> torch.Tensor:
        p = self.store
        return torch.nn.functional.layer_norm(x, x.shape[-1:], p[f"{name}.g"], p[f"{name}.b"])

    def _self_attention(self, x: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        B, T, D = x.shape
        hd = D // c.n_heads
        q, k, v = nn.dense(self.qkv, self.store, x).chunk(3, dim=-1)
        q, k, v = (t.reshape(B, T, c.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return nn.dense(self.out, self.store, y)

    def forward(self, feats: torch.Tensor, train_mode: bool = False, rng: torch.Generator | None = None) -> torch.Tensor:
        """Predicted endpoint displacement (B, 2) in metres from features (B, T_OBS, 4)."""
        x = nn.dense(self.embed, self.store, feats) + self.store["goal.pos_embed"]
        x = x + self._self_attention(self._layer_norm("goal.ln1", x))
        hidden = torch.relu(nn.dense(self.ff1, self.store, self._layer_norm("goal.ln2", x)))
        x = x + nn.dense(self.ff2, self.store, hidden)
        pooled = torch.cat([x.mean(dim=1), x[:, -1]], dim=-1)
        return nn.mlp_forward(self.head, self.store, pooled, train_mode, rng) * DISP_SCALE

    def zero_head(self) -> None:
        self.store.set_zero("goal.head.l2")

    def save(self, path, extra: dict | None = None) -> None:
        nn.save_checkpoint(path, self.store, {"model": "goal", "config": asdict(self.cfg), **(extra or {})})

    @classmethod
    def load(cls, path) -> "GoalModel":
        arrays, meta = nn.load_arrays(path)
        if meta.get("model") != "goal":
            raise ValueError(f"{path} is not a goal-model checkpoint")
        model = cls(GoalConfig(**meta["config"]))
        model.store.load_numpy(arrays)
        return model


def track_features(tracks: np.ndarray, dt: float) -> np.ndarray:
    """(B, T_OBS, 2) absolute tracks -> (B, T_OBS, 4) relative-position/velocity features."""
    rel = tracks - tracks[:, -1:, :]
    vel = np.zeros_like(tracks)
    vel[:, 1:] = np.diff(tracks, axis=1) / dt
    vel[:, 0] = vel[:, 1]
    return np.concatenate([rel / POS_SCALE, vel], axis=-1)


def predict_goals(model: GoalModel, tracks: np.ndarray, dt: float = 0.4) -> np.ndarray:
    tracks = np.asarray(tracks, dtype=np.float64).reshape(-1, T_OBS, 2)
    feats = torch.as_tensor(track_features(tracks, dt), dtype=model.store.dtype)
    with torch.no_grad():
        disp = model.forward(feats).to(torch.float64).numpy()
    return tracks[:, -1, :] + disp


def predict_goal(model: GoalModel, window: TrackletWindow) -> np.ndarray:
    return predict_goals(model, window.obs[None], window.dt)[0]


def goal_fn(model: GoalModel, dt: float = 0.4):
    """Callable mapping one observed track (T_OBS, 2) to a goal; used for neighbour goals."""
    return lambda track: predict_goals(model, track[None], dt)[0]


@dataclass
class GoalTrainResult:
    model: GoalModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    n_val = int(round(n * val_fraction)) if n >= 10 else 0
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_goal(windows: Sequence[TrackletWindow], cfg: GoalTrainConfig | None = None,
               model_cfg: GoalConfig | None = None) -> GoalTrainResult:
    """Fit the goal model by mean squared endpoint error; keeps the best-validation weights."""
    cfg = cfg or GoalTrainConfig()
    if not windows:
        raise ValueError("cannot train the goal model on an empty dataset")
    torch.manual_seed(cfg.seed)
    model = GoalModel(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = torch.Generator().manual_seed(cfg.seed + 1)
    tracks = np.stack([w.obs for w in windows])
    feats = torch.as_tensor(track_features(tracks, windows[0].dt), dtype=model.store.dtype)
    target = torch.as_tensor(np.stack([w.fut[-1] - w.obs[-1] for w in windows]), dtype=model.store.dtype)
    tr_idx, va_idx = _split_indices(len(windows), cfg.val_fraction, rng)
    eval_idx = va_idx if len(va_idx) else tr_idx

    def mse(idx, train_mode=False):
        pred = model.forward(feats[idx], train_mode, drop_rng)
        return ((pred - target[idx]) ** 2).sum(dim=-1).mean()

    best = (math.inf, 0, model.store.to_numpy())
    history = []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for b in nn.minibatches(len(tr_idx), cfg.batch_size, rng):
            idx = tr_idx[b]
            loss = mse(idx, train_mode=True)
            grads = nn.collect_grads(model.store, loss)
            nn.adam_step(model.store, grads, lr=cfg.lr)
            total += loss.item() * len(idx)
            count += len(idx)
        with torch.no_grad():
            train_mse = mse(tr_idx).item()
            val_mse = mse(eval_idx).item()
        history.append({"epoch": epoch, "split": "train", "mse": train_mse})
        history.append({"epoch": epoch, "split": "val", "mse": val_mse})
        if val_mse < best[0]:
            best = (val_mse, epoch, model.store.to_numpy())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.store.load_numpy(best[2])
    log.info("goal model: best val mse %.4g at epoch %d", best[0], best[1])
    return GoalTrainResult(model, history, best[1])

