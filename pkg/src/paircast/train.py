"""Training, evaluation, and analysis orchestration.

The training objective is winner-takes-all over modes: per scene, the
loss of mode m sums the pair-position Gaussian negative log-likelihood
over all ego-other pairs and valid future steps; the mode with the
lowest sum is the winner and only its loss receives gradients, plus an
optional cross-entropy term pushing the mode logits toward the winner.
Setting ``wta`` false switches to a full mixture likelihood per pair
step. Batches accumulate scene gradients before one Adam update.

All randomness flows from the configured seed, so repeated runs write
byte-identical logs, checkpoints, metric reports, and plots.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import metrics as met
from .config import HORIZON_STEPS, RunConfig
from .diffcore import Tensor, load_checkpoint, save_checkpoint
from .errors import CheckpointError, NumericError, ValidationError
from .interaction import export_scene_plot, scene_dependency_records, write_dependency_csv
from .model import Forecaster, ModelConfig
from .paircov import mgnll_tensor, mgnll_tensor_sum
from .scenedata import (T_HIST, load_labels, load_tracks, roundabout_map_text,
                        synth_roundabout_labeled, window_scenes, write_labels,
                        write_tracks)
from .scenegraph import attach_agents, build_road_graph, empty_road_graph, parse_road_graph


@dataclass
class Dataset:
    samples: list
    graphs: list
    road: object
    labels: list = field(default_factory=list)


def build_synth_dataset(cfg: RunConfig, t_f: int) -> Dataset:
    tracks, labels = synth_roundabout_labeled(cfg.synth, n_frames=cfg.n_frames)
    road = parse_road_graph(roundabout_map_text(cfg.synth), source="<synth map>")
    samples = window_scenes(tracks, T_HIST, t_f, cfg.window_stride, map_ref="synth")
    graphs = [attach_agents(road, s, cfg.attach_radius) for s in samples]
    return Dataset(samples, graphs, road, labels)


def load_dataset_dir(data_dir, t_f: int, stride: int = 1,
                     attach_radius: float = 5.0) -> Dataset:
    tracks_path = os.path.join(data_dir, "tracks.csv")
    map_path = os.path.join(data_dir, "map.txt")
    labels_path = os.path.join(data_dir, "labels.csv")
    tracks = load_tracks(tracks_path)
    road = build_road_graph(map_path) if os.path.exists(map_path) else empty_road_graph()
    labels = load_labels(labels_path) if os.path.exists(labels_path) else []
    samples = window_scenes(tracks, T_HIST, t_f, stride, map_ref="map.txt")
    graphs = [attach_agents(road, s, attach_radius) for s in samples]
    return Dataset(samples, graphs, road, labels)


def generate_dataset(cfg: RunConfig, out_dir):
    """Materialize the synthetic set as tracks/labels/map files."""
    tracks, labels = synth_roundabout_labeled(cfg.synth, n_frames=cfg.n_frames)
    os.makedirs(out_dir, exist_ok=True)
    write_tracks(os.path.join(out_dir, "tracks.csv"), tracks)
    write_labels(os.path.join(out_dir, "labels.csv"), labels)
    with open(os.path.join(out_dir, "map.txt"), "w") as f:
        f.write(roundabout_map_text(cfg.synth))
    return len(tracks), len(labels)


def split_dataset(n: int, val_fraction: float, seed: int):
    """Deterministic train/validation index split."""
    perm = np.random.default_rng(seed + 1).permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0.0 and n >= 2:
        n_val = max(1, min(n - 1, n_val))
    val = sorted(int(i) for i in perm[:n_val])
    train = sorted(int(i) for i in perm[n_val:])
    return train, val


# ---------------------------------------------------------------------------
# loss


def pair_targets(sample):
    """Ground-truth pair vectors [A-1, T, 4] and validity [A-1, T]."""
    e = sample.ego_index
    others = [i for i in range(sample.n_agents) if i != e]
    ego_gt = sample.future_gt[e]
    ego_ok = sample.future_mask[e]
    x = np.concatenate([
        np.broadcast_to(ego_gt, (len(others),) + ego_gt.shape),
        sample.future_gt[others],
    ], axis=-1)
    mask = sample.future_mask[others] & ego_ok[None, :]
    return x, mask


def _pair_mu(traj: Tensor, mode: int, ego_index: int, a: int, t_f: int) -> Tensor:
    tm = dc.reshape(dc.slice_axis(traj, 0, mode, mode + 1), (a, t_f, 2))
    ego = dc.reshape(dc.slice_axis(tm, 0, ego_index, ego_index + 1), (t_f, 2))
    ego_rep = dc.expand_leading(ego, a - 1)
    parts = []
    if ego_index > 0:
        parts.append(dc.slice_axis(tm, 0, 0, ego_index))
    if ego_index + 1 < a:
        parts.append(dc.slice_axis(tm, 0, ego_index + 1, a))
    others = parts[0] if len(parts) == 1 else dc.concat_rows(parts)
    return dc.concat_last([ego_rep, others])


def _log_softmax(logits: Tensor) -> Tensor:
    shifted = dc.sub(logits, float(logits.data.max()))
    lse = dc.log(dc.tsum(dc.exp(shifted)))
    return dc.sub(shifted, lse)


def scene_loss(model: Forecaster, sample, graph, tcfg):
    """Differentiable total loss plus bookkeeping for one scene.

    Returns None when the scene has no valid pair step. Otherwise a
    (total, stats) pair; stats carries the winner index, the winner's
    summed MGNLL, and the valid pair-step count.
    """
    x, mask = pair_targets(sample)
    n_steps = int(mask.sum())
    if n_steps == 0:
        return None
    out = model.forward(sample, graph)
    a, t_f = sample.n_agents, sample.t_f
    m_modes = model.cfg.n_modes
    x_t = dc.const(x)

    per_mode_sums = []
    per_mode_steps = []
    for m in range(m_modes):
        cov = dc.reshape(dc.slice_axis(out["cov"], 0, m, m + 1), (a - 1, t_f, 10))
        mu = _pair_mu(out["traj"], m, sample.ego_index, a, t_f)
        if tcfg.wta:
            per_mode_sums.append(mgnll_tensor_sum(cov, mu, x_t, mask=mask))
        else:
            per_mode_steps.append(mgnll_tensor(cov, mu, x_t))

    if tcfg.wta:
        vals = np.array([s.item() for s in per_mode_sums])
        winner = int(np.argmin(vals))
        total = per_mode_sums[winner]
        if tcfg.mode_ce_weight > 0.0:
            logp = _log_softmax(out["logits"])
            ce = dc.neg(dc.reshape(dc.slice_axis(logp, 0, winner, winner + 1), ()))
            total = dc.add(total, dc.mul(ce, tcfg.mode_ce_weight))
        winner_nll = float(vals[winner])
    else:
        stack = dc.concat_last(per_mode_steps)              # [A-1, T, M]
        logp = _log_softmax(out["logits"])
        scored = dc.add(dc.neg(stack), logp)
        shift_np = np.broadcast_to(
            scored.data.max(axis=-1, keepdims=True), scored.shape).copy()
        lse = dc.add(dc.log(dc.tsum(dc.exp(dc.sub(scored, dc.const(shift_np))), axis=-1)),
                     dc.const(shift_np[..., 0]))
        masked = dc.mul(dc.neg(lse), dc.const(mask.astype(np.float64)))
        total = dc.tsum(masked)
        winner = int(np.argmax(logp.data))
        winner_nll = total.item()

    stats = {"winner": winner, "winner_nll": winner_nll, "n_pair_steps": n_steps}
    return total, stats


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Forecaster
    log_lines: list
    epoch_train_nll: list
    epoch_val_nll: list
    train_indices: list
    val_indices: list
    dataset: Dataset
    checkpoint_path: str


def _mean_nll(model, ds, indices, tcfg) -> float:
    """Mean winner MGNLL per valid pair step over the indexed scenes."""
    total, steps = 0.0, 0
    for i in indices:
        res = scene_loss(model, ds.samples[i], ds.graphs[i], tcfg)
        if res is None:
            continue
        _, stats = res
        total += stats["winner_nll"]
        steps += stats["n_pair_steps"]
    return total / steps if steps else float("nan")


def train(cfg: RunConfig, out_dir) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    t_f = cfg.model.t_f
    if cfg.data_dir is not None:
        ds = load_dataset_dir(cfg.data_dir, t_f, cfg.window_stride, cfg.attach_radius)
    else:
        ds = build_synth_dataset(cfg, t_f)
    if not ds.samples:
        raise ValidationError("dataset produced no multi-agent scenes")

    train_idx, val_idx = split_dataset(len(ds.samples), cfg.val_fraction,
                                       cfg.training.seed)
    if not train_idx:
        raise ValidationError("empty training split")

    model = Forecaster(cfg.model, seed=cfg.training.seed)
    opt = dc.Adam(model.params, lr=cfg.training.lr)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    meta = {"model": cfg.model.to_dict(), "seed": cfg.training.seed, "epoch": 0}
    save_checkpoint(ckpt_path, model.state_arrays(), meta=meta)

    rng = np.random.default_rng(cfg.training.seed)
    log_lines = []
    epoch_train, epoch_val = [], []
    for epoch in range(1, cfg.training.epochs + 1):
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        nll_sum, step_sum, total_sum, n_scored = 0.0, 0, 0.0, 0
        for start in range(0, len(order), cfg.training.batch_size):
            batch = order[start:start + cfg.training.batch_size]
            model.zero_grad()
            scored = 0
            for i in batch:
                s = ds.samples[i]
                if cfg.training.ego_sampling:
                    s = replace(s, ego_index=int(rng.integers(s.n_agents)))
                res = scene_loss(model, s, ds.graphs[i], cfg.training)
                if res is None:
                    continue
                total, stats = res
                if not np.isfinite(total.item()):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}; last checkpoint kept")
                dc.backward(dc.mul(total, 1.0 / len(batch)))
                nll_sum += stats["winner_nll"]
                step_sum += stats["n_pair_steps"]
                total_sum += total.item()
                scored += 1
            if scored:
                opt.step()
            n_scored += scored
        train_nll = nll_sum / step_sum if step_sum else float("nan")
        val_nll = _mean_nll(model, ds, val_idx, cfg.training) if val_idx else float("nan")
        epoch_train.append(train_nll)
        epoch_val.append(val_nll)
        log_lines.append(f"epoch {epoch} scenes {n_scored} train_nll {train_nll!r} "
                         f"val_nll {val_nll!r}")
        meta = {"model": cfg.model.to_dict(), "seed": cfg.training.seed, "epoch": epoch}
        save_checkpoint(ckpt_path, model.state_arrays(), meta=meta)

    with open(os.path.join(out_dir, "train_log.txt"), "w") as f:
        f.write("\n".join(log_lines) + "\n")
    return TrainResult(model, log_lines, epoch_train, epoch_val,
                       train_idx, val_idx, ds, ckpt_path)


# ---------------------------------------------------------------------------
# evaluation / analysis


def load_model(ckpt_path) -> Forecaster:
    arrays, meta = load_checkpoint(ckpt_path)
    if not isinstance(meta, dict) or "model" not in meta:
        raise CheckpointError(f"{ckpt_path}: missing model config in metadata")
    model = Forecaster(ModelConfig.from_dict(meta["model"]), seed=0)
    model.load_state(arrays)
    return model


def predict_dataset(model: Forecaster, ds: Dataset):
    preds, gts, masks = [], [], []
    for sample, graph in zip(ds.samples, ds.graphs):
        out = model.predict(sample, graph)
        preds.append(out.traj)
        gts.append(sample.future_gt)
        masks.append(sample.future_mask)
    return preds, gts, masks


def evaluate(ckpt_path, data, horizon_s: float, out_dir=None):
    """Model and constant-velocity reports at one horizon.

    ``data`` is a dataset directory or a prebuilt Dataset whose window
    length must match the checkpoint's future length.
    """
    model = load_model(ckpt_path)
    steps = HORIZON_STEPS.get(float(horizon_s))
    if steps is None:
        raise ValidationError(f"horizon {horizon_s} unsupported")
    if model.cfg.t_f != steps:
        raise ValidationError(
            f"checkpoint predicts {model.cfg.t_f} steps; horizon {horizon_s} s needs {steps}")
    ds = data if isinstance(data, Dataset) else load_dataset_dir(data, steps)
    if not ds.samples:
        raise ValidationError("no scenes to evaluate")

    preds, gts, masks = predict_dataset(model, ds)
    base = [met.constant_velocity_baseline(s) for s in ds.samples]
    report_model = met.evaluate_scenes(preds, gts, masks, horizon_s)
    report_base = met.evaluate_scenes(base, gts, masks, horizon_s)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        met.write_report_csv(os.path.join(out_dir, "metrics_model.csv"), [report_model])
        met.write_report_csv(os.path.join(out_dir, "metrics_baseline.csv"), [report_base])
    return report_model, report_base


def analyze(ckpt_path, data, out_dir, weighted: bool = False):
    """Dependency records and one SVG per scene; returns records per scene."""
    model = load_model(ckpt_path)
    ds = data if isinstance(data, Dataset) else load_dataset_dir(data, model.cfg.t_f)
    if not ds.samples:
        raise ValidationError("no scenes to analyze")
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    per_scene = []
    for sample, graph in zip(ds.samples, ds.graphs):
        out = model.predict(sample, graph)
        best = met.best_sfde_mode(out.traj, sample.future_gt, sample.future_mask)
        records = scene_dependency_records(sample, out, mode=best, weighted=weighted)
        tag = int(sample.anchor_frame)
        rows.extend((tag, r) for r in records)
        road_local = ds.road.shifted(sample.origin) if ds.road is not None else None
        export_scene_plot(sample, out, records,
                          os.path.join(out_dir, f"scene_{tag:05d}.svg"),
                          road=road_local, mode=best)
        per_scene.append((sample, records))
    write_dependency_csv(os.path.join(out_dir, "dependency.csv"), rows)
    return per_scene
