"""Scene-centric evaluation metrics.

All metrics are joint over the agents of a scene: the mode axis is
reduced last, so one mode must fit every agent at once.

- min_sade: per mode, average pointwise displacement per agent, then
  the agent mean; minimum over modes
- min_sfde: per mode, endpoint displacement per agent, then the agent
  mean; minimum over modes
- smr: fraction of scenes where, in the mode with the lowest SFDE,
  at least one agent's endpoint misses by strictly more than 2 m

Invalid future steps (mask False) never enter the averages; an
agent's endpoint is its last valid step. A constant-velocity
extrapolation of the last observed displacement serves as the
reference predictor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scenedata import DT, T_HIST, SceneSample

MISS_THRESHOLD = 2.0


@dataclass
class MetricsReport:
    horizon: float
    min_sade: float
    min_sfde: float
    smr: float
    n_scenes: int

    def __post_init__(self):
        if self.min_sade < 0.0 or self.min_sfde < 0.0:
            raise ValidationError("displacement metrics must be non-negative")
        if not 0.0 <= self.smr <= 1.0:
            raise ValidationError(f"smr must lie in [0, 1], got {self.smr}")
        if self.n_scenes < 0:
            raise ValidationError("n_scenes must be non-negative")


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 4 or gt.ndim != 3:
        raise ValidationError(
            f"expected pred [M, A, T, 2] and gt [A, T, 2], got {pred.shape} and {gt.shape}")
    if pred.shape[1:] != gt.shape:
        raise ValidationError(f"pred shape {pred.shape} does not cover gt shape {gt.shape}")
    if gt.shape[1] == 0:
        raise ValidationError("metrics need at least one future step")
    if mask is None:
        mask = np.ones(gt.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape[:2]:
            raise ValidationError(f"mask shape {mask.shape} does not match {gt.shape[:2]}")
    dist = np.linalg.norm(pred - gt[None], axis=-1)
    return dist, mask


def _endpoint_index(mask: np.ndarray) -> np.ndarray:
    t = mask.shape[1]
    return t - 1 - np.argmax(mask[:, ::-1], axis=1)


def min_sade(pred, gt, mask=None) -> float:
    """Minimum over modes of the scene-average displacement error."""
    dist, mask = _prepare(pred, gt, mask)
    counts = mask.sum(axis=1)
    keep = counts > 0
    if not keep.any():
        raise ValidationError("no agent has a valid future step")
    per_agent = (dist[:, keep] * mask[keep]).sum(axis=-1) / counts[keep]
    return float(per_agent.mean(axis=1).min())


def min_sfde(pred, gt, mask=None) -> float:
    """Minimum over modes of the scene-average endpoint error."""
    dist, mask = _prepare(pred, gt, mask)
    keep = mask.any(axis=1)
    if not keep.any():
        raise ValidationError("no agent has a valid future step")
    end = _endpoint_index(mask)[keep]
    fde = dist[:, keep, :][:, np.arange(keep.sum()), end]
    return float(fde.mean(axis=1).min())


def _fde_per_mode(pred, gt, mask):
    dist, mask = _prepare(pred, gt, mask)
    keep = mask.any(axis=1)
    if not keep.any():
        raise ValidationError("no agent has a valid future step")
    end = _endpoint_index(mask)[keep]
    return dist[:, keep, :][:, np.arange(keep.sum()), end]


def best_sfde_mode(pred, gt, mask=None) -> int:
    """Index of the mode with the lowest SFDE; ties toward the lowest index."""
    fde = _fde_per_mode(pred, gt, mask)
    return int(np.argmin(fde.mean(axis=1)))


def scene_miss(pred, gt, mask=None) -> bool:
    """Miss rule for one scene: in the best-SFDE mode (ties toward the
    lowest index), some agent's endpoint error strictly exceeds 2 m."""
    fde = _fde_per_mode(pred, gt, mask)
    best = int(np.argmin(fde.mean(axis=1)))
    return bool(np.any(fde[best] > MISS_THRESHOLD))


def smr(preds, gts, masks=None) -> float:
    """Scene miss rate over a dataset."""
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValidationError("smr requires equally many preds and gts, at least one")
    if masks is None:
        masks = [None] * len(preds)
    misses = sum(scene_miss(p, g, m) for p, g, m in zip(preds, gts, masks))
    return misses / len(preds)


def constant_velocity_baseline(sample: SceneSample) -> np.ndarray:
    """[1, A, T_f, 2]: extrapolate each agent's last observed displacement.

    The velocity comes from the last two history positions; an agent
    whose previous step is invalid is held stationary.
    """
    p_now = sample.history[:, -1, 0:2]
    p_prev = sample.history[:, -2, 0:2]
    prev_valid = sample.hist_mask[:, T_HIST - 2]
    vel = np.where(prev_valid[:, None], (p_now - p_prev) / DT, 0.0)
    steps = np.arange(1, sample.t_f + 1, dtype=np.float64) * DT
    return (p_now[None, :, None, :] + vel[None, :, None, :] * steps[None, None, :, None])


def evaluate_scenes(preds, gts, masks, horizon_s: float) -> MetricsReport:
    """Dataset aggregation: mean per-scene minSADE/minSFDE plus SMR."""
    if not preds:
        raise ValidationError("no scenes to evaluate")
    if masks is None:
        masks = [None] * len(preds)
    sades = [min_sade(p, g, m) for p, g, m in zip(preds, gts, masks)]
    sfdes = [min_sfde(p, g, m) for p, g, m in zip(preds, gts, masks)]
    rate = smr(preds, gts, masks)
    return MetricsReport(
        horizon=horizon_s,
        min_sade=float(np.mean(sades)),
        min_sfde=float(np.mean(sfdes)),
        smr=rate,
        n_scenes=len(preds),
    )


def write_report_csv(path, reports):
    """Serialize reports with full float precision for byte determinism."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["horizon_s", "min_sade", "min_sfde", "smr", "n_scenes"])
        for r in reports:
            w.writerow([repr(float(r.horizon)), repr(float(r.min_sade)),
                        repr(float(r.min_sfde)), repr(float(r.smr)), r.n_scenes])
