"""ELBO loss, the CovarianceNet training loop and synthetic verification corpora."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from . import covnet as cn
from . import neural as nn
from .dataset import DT, T_OBS, T_PRED, WINDOW_LEN, RawAnnotation, TrackletWindow
from .goalnet import GoalModel
from .pipeline import GoalSource, compute_goals, compute_sfm_means
from .sfm import SfmParams

log = logging.getLogger(__name__)

KlTarget = Literal["standard", "prior"]
LOG_COLUMNS = ("epoch", "split", "nll", "kl", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    alpha: float = 1.0
    seed: int = 0
    kl_target: KlTarget = "standard"
    val_fraction: float = 0.1
    patience: int = 10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kl_target not in ("standard", "prior"):
            raise ValueError(f"kl_target must be 'standard' or 'prior', got {self.kl_target!r}")


def kl_standard(q: cn.LatentDist) -> torch.Tensor:
    """KL(q || N(0, I)) per row."""
    return 0.5 * (q.sigma**2 + q.mu**2 - 1.0 - 2.0 * q.log_sigma).sum(dim=-1)


def kl_diag(q: cn.LatentDist, p: cn.LatentDist) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, per row."""
    var_ratio = torch.exp(2.0 * (q.log_sigma - p.log_sigma))
    mean_term = ((q.mu - p.mu) / p.sigma) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - 2.0 * (q.log_sigma - p.log_sigma)).sum(dim=-1)


@dataclass
class ElboParts:
    total: torch.Tensor
    nll: torch.Tensor  # per agent, summed over steps
    kl: torch.Tensor  # per agent
    prior_fit: torch.Tensor  # scalar; only trains the prior network


def elbo_parts(model: cn.CovNetModel, batch: cn.Batch, cfg: TrainConfig,
               rng: torch.Generator | None = None, train_mode: bool = True,
               eps: torch.Tensor | None = None) -> ElboParts:
    enc = cn.encode_scene(model, batch, with_future=True)
    q = cn.posterior(model, enc.e_scene, enc.e_fut, train_mode, rng)
    z = cn.reparameterize(q, rng, eps)
    means = batch.sfm_rel.detach()
    sigma, rho = cn.decode(model, z, enc.e_scene, means, train_mode, rng)
    nll = cn.bivariate_nll(means, sigma, rho, batch.fut_rel).sum(dim=-1)
    if cfg.kl_target == "standard":
        kl = kl_standard(q)
        # fit the prior network to the frozen posterior without touching the encoders
        p = cn.prior(model, enc.e_scene.detach(), train_mode, rng)
        frozen_q = cn.LatentDist(q.mu.detach(), q.log_sigma.detach())
        prior_fit = kl_diag(frozen_q, p).mean()
    else:
        kl = kl_diag(q, cn.prior(model, enc.e_scene, train_mode, rng))
        prior_fit = torch.zeros((), dtype=nll.dtype)
    total = (cfg.alpha * nll + kl).mean()
    return ElboParts(total, nll, kl, prior_fit)


def elbo_loss(model: cn.CovNetModel, batch: cn.Batch, rng: torch.Generator | None = None,
              cfg: TrainConfig | None = None, train_mode: bool = True, eps: torch.Tensor | None = None):
    """Returns ``(total, nll_term, kl_term)``; terms are averaged per agent."""
    parts = elbo_parts(model, batch, cfg or TrainConfig(), rng, train_mode, eps)
    return parts.total, parts.nll.mean(), parts.kl.mean()


def inference_nll(model: cn.CovNetModel, batch: cn.Batch) -> torch.Tensor:
    """Per-agent NLL (summed over steps) with z at the prior mean, no dropout."""
    enc = cn.encode_scene(model, batch)
    p = cn.prior(model, enc.e_scene)
    sigma, rho = cn.decode(model, p.mu, enc.e_scene, batch.sfm_rel)
    return cn.bivariate_nll(batch.sfm_rel, sigma, rho, batch.fut_rel).sum(dim=-1)


@dataclass
class CovTrainResult:
    model: cn.CovNetModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train_on_means(windows: Sequence[TrackletWindow], sfm_means: np.ndarray, cfg: TrainConfig,
                   model_cfg: cn.CovNetConfig | None = None) -> CovTrainResult:
    """Optimise the ELBO given precomputed SFM means; early-stops on validation NLL."""
    if not windows:
        raise TrainingError("cannot train CovarianceNet on an empty dataset")
    torch.manual_seed(cfg.seed)
    model = cn.CovNetModel(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    n = len(windows)
    n_val = int(round(n * cfg.val_fraction)) if n >= 10 else 0
    order = rng.permutation(n)
    tr_idx, va_idx = np.sort(order[n_val:]), np.sort(order[:n_val])
    eval_idx = va_idx if n_val else tr_idx
    full = cn.make_batch(windows, sfm_means, model.dtype)

    def take(idx) -> cn.Batch:
        t = torch.as_tensor(idx)
        return cn.Batch(full.obs[t], full.vel[t], full.acc[t], full.nb_rel[t], full.nb_mask[t],
                        full.sfm_rel[t], full.fut_rel[t])

    train_batch, eval_batch = take(tr_idx), take(eval_idx)
    history: list[dict] = []
    best = (math.inf, 0, model.store.to_numpy())
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        for bno, b in enumerate(nn.minibatches(len(tr_idx), cfg.batch_size, rng)):
            parts = elbo_parts(model, take(tr_idx[b]), cfg, gen, train_mode=True)
            loss = parts.total + parts.prior_fit
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bno} (windows {tr_idx[b][:8].tolist()}...)"
                )
            nn.adam_step(model.store, nn.collect_grads(model.store, loss), lr=cfg.lr)
        with torch.no_grad():
            eval_gen = torch.Generator().manual_seed(cfg.seed + 2)
            for split, batch in (("train", train_batch), ("val", eval_batch)):
                parts = elbo_parts(model, batch, cfg, eval_gen, train_mode=False)
                nll = inference_nll(model, batch).mean().item()
                kl = parts.kl.mean().item()
                history.append({"epoch": epoch, "split": split, "nll": nll, "kl": kl,
                                "total": cfg.alpha * nll + kl})
        val_nll = history[-1]["nll"]
        if val_nll < best[0]:
            best = (val_nll, epoch, model.store.to_numpy())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        log.info("epoch %d: train nll %.4f  val nll %.4f  kl %.4f", epoch, history[-2]["nll"], val_nll, history[-1]["kl"])
    model.store.load_numpy(best[2])
    return CovTrainResult(model, history, best[1])


def train_covnet(windows: Sequence[TrackletWindow], goal_model: GoalModel | None, sfm_params: SfmParams,
                 cfg: TrainConfig | None = None, goal_source: GoalSource = "predicted",
                 model_cfg: cn.CovNetConfig | None = None) -> CovTrainResult:
    cfg = cfg or TrainConfig()
    if not windows:
        raise TrainingError("cannot train CovarianceNet on an empty dataset")
    goals = compute_goals(windows, goal_model, goal_source)
    sfm_means = compute_sfm_means(windows, goals, sfm_params, goal_model)
    return train_on_means(windows, sfm_means, cfg, model_cfg)


def write_log_csv(path, rows: Sequence[dict], columns: Sequence[str] = LOG_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

DEFAULT_SCHEDULE = tuple(0.2 + 0.05 * k for k in range(1, T_PRED + 1))


@dataclass(frozen=True)
class SyntheticSpec:
    """Straight walkers; future steps get independent N(0, sigma_k^2 I) increments."""

    kind: Literal["constant-velocity", "heteroscedastic"] = "heteroscedastic"
    sigma_schedule: tuple[float, ...] = DEFAULT_SCHEDULE
    count: int = 1000
    seed: int = 0
    speed_range: tuple[float, float] = (0.5, 1.8)
    extent: float = 20.0
    dt: float = DT

    def __post_init__(self):
        if self.kind not in ("constant-velocity", "heteroscedastic"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if len(self.sigma_schedule) != T_PRED:
            raise ValueError(f"sigma_schedule needs {T_PRED} entries")
        if self.kind == "heteroscedastic" and min(self.sigma_schedule) <= 0:
            raise ValueError("heteroscedastic schedule must be strictly positive")

    def schedule(self) -> np.ndarray:
        if self.kind == "constant-velocity":
            return np.zeros(T_PRED)
        return np.asarray(self.sigma_schedule, dtype=np.float64)

    def accumulated_variance(self) -> np.ndarray:
        """Per-axis variance of the future position at each step."""
        return np.cumsum(self.schedule() ** 2)

    def entropy_rate(self) -> float:
        """Mean per-step differential entropy (nats) of the true future distribution."""
        var = self.accumulated_variance()
        return float(np.mean(np.log(2.0 * math.pi * math.e) + np.log(var)))


def synthetic_tracks(spec: SyntheticSpec) -> np.ndarray:
    """(count, WINDOW_LEN, 2) absolute tracks."""
    rng = np.random.default_rng(spec.seed)
    n = spec.count
    speed = rng.uniform(*spec.speed_range, size=n)
    heading = rng.uniform(0.0, 2.0 * math.pi, size=n)
    vel = speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    start = rng.uniform(-spec.extent, spec.extent, size=(n, 2))
    steps = np.arange(WINDOW_LEN)[None, :, None]
    tracks = start[:, None, :] + steps * vel[:, None, :] * spec.dt
    noise = rng.standard_normal((n, T_PRED, 2)) * spec.schedule()[None, :, None]
    tracks[:, T_OBS:] += np.cumsum(noise, axis=1)
    return tracks


def make_synthetic(spec: SyntheticSpec) -> list[TrackletWindow]:
    tracks = synthetic_tracks(spec)
    return [TrackletWindow(i, tr[:T_OBS], tr[T_OBS:], [], spec.dt, "synthetic") for i, tr in enumerate(tracks)]


def synthetic_annotations(spec: SyntheticSpec, frame_stride: int = 10) -> list[RawAnnotation]:
    """Annotation rows for the synthetic walkers; each pedestrian gets its own frame range."""
    rows = []
    for i, tr in enumerate(synthetic_tracks(spec)):
        base = i * (WINDOW_LEN + 1) * frame_stride
        rows.extend(RawAnnotation(base + k * frame_stride, i + 1, float(x), float(y)) for k, (x, y) in enumerate(tr))
    return rows


def write_synthetic_scene(path, spec: SyntheticSpec, frame_stride: int = 10) -> None:
    from .dataset import write_annotation_file

    write_annotation_file(Path(path), synthetic_annotations(spec, frame_stride))
