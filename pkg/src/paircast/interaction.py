"""Dependency analysis of predicted pair covariances.

The 4x4 pair covariance, read as a 2x2 block matrix, carries each
agent's positional marginal on the diagonal and the cross-agent
covariance off the diagonal. Summing the absolute entries of the
upper off-diagonal block gives a non-negative interactivity measure:
zero exactly when the predicted joint factorizes over the two agents.

Per ego-other pair this module scores every future step, averages the
steps into one record, ranks pairs, and renders a deterministic SVG
scene picture whose pair-connector stroke widths scale with the score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import PredictionOutput
from .paircov import CovParams, PairCovariance, build_sigma
from .scenedata import SceneSample

MIN_STROKE = 0.4
MAX_STROKE = 4.0


@dataclass
class DependencyRecord:
    """Averaged interactivity of one ego-other pair in one mode."""
    ego_id: int
    other_id: int
    mode: int
    score: float
    per_step_scores: np.ndarray

    def __post_init__(self):
        self.per_step_scores = np.asarray(self.per_step_scores, dtype=np.float64)
        if self.score < 0.0:
            raise ValidationError("dependency score must be non-negative")
        if abs(self.score - float(self.per_step_scores.mean())) > 1e-9:
            raise ValidationError("score must equal the mean of per_step_scores")


def dependency_score(c: PairCovariance) -> float:
    """Sum of absolute entries of the upper off-diagonal 2x2 block."""
    return float(np.abs(c.sigma[0:2, 2:4]).sum())


def _pair_step_scores(cov_params: np.ndarray) -> np.ndarray:
    """[T_f] scores from one pair's [T_f, 10] parameter rows."""
    out = np.empty(cov_params.shape[0])
    for t in range(cov_params.shape[0]):
        c = build_sigma(CovParams.from_vector(cov_params[t]))
        out[t] = dependency_score(c)
    return out


def scene_dependency_records(sample: SceneSample, output: PredictionOutput,
                             mode: int, weighted: bool = False):
    """One DependencyRecord per ego-other pair.

    ``mode`` selects which head's covariances are scored; with
    ``weighted`` the per-step scores are averaged over all modes under
    the predicted mode probabilities instead, and the record's mode
    field is -1.
    """
    a = sample.n_agents
    if output.cov_params.shape[1] != a - 1:
        raise ValidationError(
            f"output pair axis {output.cov_params.shape[1]} != A-1 = {a - 1}")
    if not weighted and not 0 <= mode < output.cov_params.shape[0]:
        raise ValidationError(f"mode {mode} out of range")
    other_indices = [i for i in range(a) if i != sample.ego_index]
    ego_id = sample.agent_ids[sample.ego_index]

    records = []
    for p, oi in enumerate(other_indices):
        if weighted:
            probs = output.mode_probs()
            steps = np.zeros(output.cov_params.shape[2])
            for m in range(output.cov_params.shape[0]):
                steps = steps + probs[m] * _pair_step_scores(output.cov_params[m, p])
            rec_mode = -1
        else:
            steps = _pair_step_scores(output.cov_params[mode, p])
            rec_mode = mode
        records.append(DependencyRecord(
            ego_id=ego_id,
            other_id=sample.agent_ids[oi],
            mode=rec_mode,
            score=float(steps.mean()),
            per_step_scores=steps,
        ))
    return records


def rank_pairs(records):
    """Descending by score; equal scores keep ascending other_id order."""
    return sorted(records, key=lambda r: (-r.score, r.other_id))


def write_dependency_csv(path, rows):
    """``rows``: iterable of (scene, DependencyRecord)."""
    with open(path, "w", newline="") as f:
        f.write("scene,ego_id,other_id,mode,score\n")
        for scene, rec in rows:
            f.write(f"{scene},{rec.ego_id},{rec.other_id},{rec.mode},{repr(rec.score)}\n")


# ---------------------------------------------------------------------------
# SVG scene rendering

_AGENT_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _polyline(points, color, width, dash=None) -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(-y)}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{_fmt(width)}"{dash_attr}/>')


def export_scene_plot(sample: SceneSample, output: PredictionOutput, records,
                      path, road=None, mode=None):
    """Write one self-contained SVG for a scene.

    Drawn layers: road nodes, past tracks, ground-truth futures,
    the selected mode's predicted futures, and an ego-pair connector
    per record with stroke width linear in the record's score (the
    maximum score maps to a fixed maximum width; zero-score pairs keep
    the minimum width).
    """
    if mode is None:
        mode = records[0].mode if records and records[0].mode >= 0 \
            else int(np.argmax(output.mode_logits))
    a = sample.n_agents
    id_to_index = {aid: i for i, aid in enumerate(sample.agent_ids)}

    xs, ys = [], []

    def track_points(arr, valid):
        pts = [(arr[t, 0], arr[t, 1]) for t in range(arr.shape[0]) if valid[t]]
        for x, y in pts:
            xs.append(x)
            ys.append(y)
        return pts

    body = []
    if road is not None:
        for x, y in np.asarray(road.node_pos, dtype=np.float64):
            if abs(x) < 1e6 and abs(y) < 1e6:
                xs.append(x)
                ys.append(y)
                body.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(-y)}" r="0.15" '
                            f'fill="#cccccc"/>')

    ego_pos = sample.current_positions()[sample.ego_index]
    max_score = max((r.score for r in records), default=0.0)
    for rec in records:
        oi = id_to_index[rec.other_id]
        op = sample.current_positions()[oi]
        if max_score > 0.0:
            width = MIN_STROKE + (rec.score / max_score) * (MAX_STROKE - MIN_STROKE)
        else:
            width = MIN_STROKE
        body.append(
            f'<line x1="{_fmt(ego_pos[0])}" y1="{_fmt(-ego_pos[1])}" '
            f'x2="{_fmt(op[0])}" y2="{_fmt(-op[1])}" stroke="#444444" '
            f'stroke-width="{_fmt(width)}" stroke-opacity="0.5"/>')

    for i in range(a):
        color = _AGENT_COLORS[i % len(_AGENT_COLORS)]
        hist = track_points(sample.history[i, :, 0:2], sample.hist_mask[i])
        if len(hist) >= 2:
            body.append(_polyline(hist, color, 0.3))
        gt = track_points(sample.future_gt[i], sample.future_mask[i])
        if len(gt) >= 2:
            body.append(_polyline(gt, color, 0.2, dash="0.5,0.5"))
        pred = track_points(output.traj[mode, i], np.ones(sample.t_f, dtype=bool))
        if len(pred) >= 2:
            body.append(_polyline(pred, color, 0.2, dash="0.15,0.3"))
        cur = sample.current_positions()[i]
        r = 0.5 if i == sample.ego_index else 0.35
        body.append(f'<circle cx="{_fmt(cur[0])}" cy="{_fmt(-cur[1])}" '
                    f'r="{_fmt(r)}" fill="{color}"/>')

    margin = 2.0
    x0, x1 = min(xs) - margin, max(xs) + margin
    y0, y1 = min(ys) - margin, max(ys) + margin
    view = f"{_fmt(x0)} {_fmt(-y1)} {_fmt(x1 - x0)} {_fmt(y1 - y0)}"
    svg = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{view}" '
           f'width="800" height="800">',
           f'<rect x="{_fmt(x0)}" y="{_fmt(-y1)}" width="{_fmt(x1 - x0)}" '
           f'height="{_fmt(y1 - y0)}" fill="#ffffff"/>']
    svg.extend(body)
    svg.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(svg) + "\n")
