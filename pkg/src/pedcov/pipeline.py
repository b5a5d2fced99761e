"""Glue between the goal model, the SFM rollout and the two uncertainty predictors."""

from __future__ import annotations

from dataclasses import replace
from typing import Literal, Sequence

import numpy as np

from . import covnet as cn
from . import covprop, sfm
from .dataset import T_PRED, TrackletWindow
from .goalnet import GoalModel, goal_fn, predict_goals
from .sfm import SfmParams

GoalSource = Literal["predicted", "ground-truth-endpoint"]


def compute_goals(windows: Sequence[TrackletWindow], goal_model: GoalModel | None,
                  goal_source: GoalSource = "predicted") -> np.ndarray:
    if goal_source == "ground-truth-endpoint":
        return np.stack([w.fut[-1] for w in windows])
    if goal_source != "predicted":
        raise ValueError(f"unknown goal source {goal_source!r}")
    if goal_model is None:
        raise ValueError("predicted goals need a trained goal model")
    if not windows:
        return np.zeros((0, 2))
    return predict_goals(goal_model, np.stack([w.obs for w in windows]), windows[0].dt)


def compute_sfm_means(windows: Sequence[TrackletWindow], goals: np.ndarray, params: SfmParams,
                      goal_model: GoalModel | None = None) -> np.ndarray:
    """Joint SFM rollout per window, shape (B, T_PRED, 2)."""
    nb_fn = goal_fn(goal_model) if goal_model is not None else None
    out = np.zeros((len(windows), T_PRED, 2))
    for i, (w, g) in enumerate(zip(windows, goals)):
        out[i] = sfm.rollout_window(w, g, params, T_PRED, nb_fn)
    return out


def predict_covnet(windows: Sequence[TrackletWindow], sfm_means: np.ndarray, model: cn.CovNetModel,
                   mode: cn.Mode = "prior-mean", seed: int = 0, batch_size: int = 256) -> list[cn.PredictedDistribution]:
    import torch

    rng = torch.Generator().manual_seed(seed)
    out = []
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        means = sfm_means[lo : lo + batch_size]
        sigma, rho = cn.predict_params(model, chunk, means, mode, rng)
        out.extend(cn.assemble(m, s, r) for m, s, r in zip(means, sigma, rho))
    return out


def predict_fp(windows: Sequence[TrackletWindow], goals: np.ndarray, params: SfmParams,
               goal_model: GoalModel | None = None, init_cov: np.ndarray | None = None) -> list[cn.PredictedDistribution]:
    nb_fn = goal_fn(goal_model) if goal_model is not None else None
    out = []
    for w, g in zip(windows, goals):
        scene = sfm.scene_from_window(w, params, nb_fn)
        p = replace(params, v_desired=scene.v_desired)
        out.append(cn.PredictedDistribution(covprop.fp_predict(scene.agent, scene.neighbors, g, T_PRED, p, init_cov)))
    return out
