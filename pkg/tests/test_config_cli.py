"""Run configuration, the training loop, and the command line."""

import json
import os

import numpy as np
import pytest

import paircast.diffcore as dc
import paircast.train as tr
from paircast.cli import main
from paircast.config import (HORIZON_STEPS, RunConfig, TrainingConfig,
                             load_run_config, run_config_from_dict)
from paircast.errors import (CheckpointError, ConfigError, NumericError,
                             ParseError, ValidationError)
from paircast.model import Forecaster
from paircast.paircov import CovParams, mgnll
from paircast.scenedata import T_HIST


def tiny_dict(**over):
    cfg = {
        "synth": {"n_agents": 5, "seed": 3},
        "model": {"d_model": 16, "n_heads": 2, "n_dec": 1, "n_gnn": 1,
                  "n_modes": 2, "saienc": "gnn", "t_f": 15},
        "training": {"lr": 3e-4, "batch_size": 4, "epochs": 2, "seed": 1},
        "n_frames": 60,
        "window_stride": 8,
        "val_fraction": 0.25,
    }
    for key, val in over.items():
        if isinstance(val, dict) and key in cfg and isinstance(cfg[key], dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def tiny_config(**over):
    return run_config_from_dict(tiny_dict(**over))


def write_config(path, cfg_dict):
    with open(path, "w") as f:
        json.dump(cfg_dict, f)
    return str(path)


# ---------------------------------------------------------------------------
# configuration


def test_empty_config_uses_defaults():
    cfg = run_config_from_dict({})
    assert cfg.training.lr == 3e-4
    assert cfg.training.batch_size == 8
    assert cfg.training.wta is True
    assert cfg.training.mode_ce_weight == 0.1
    assert cfg.model.d_model == 64
    assert cfg.horizons == [3.0]
    assert cfg.data_dir is None
    assert HORIZON_STEPS == {3.0: 15, 5.0: 25}


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"learning_rate": 1e-3})
    assert "learning_rate" in str(exc.value)


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError) as exc:
        run_config_from_dict({"training": {"lr": 1e-3, "lrr": 2.0}})
    assert "lrr" in str(exc.value)
    with pytest.raises(ConfigError):
        run_config_from_dict({"model": {"dmodel": 32}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"synth": {"agents": 4}})


def test_section_values_propagate():
    cfg = run_config_from_dict({
        "training": {"lr": 1e-3, "wta": False},
        "model": {"n_modes": 3, "d_model": 32, "n_heads": 4},
        "synth": {"n_agents": 4},
        "horizons": [5.0],
    })
    assert cfg.training.lr == 1e-3 and cfg.training.wta is False
    assert cfg.model.n_modes == 3
    assert cfg.synth.n_agents == 4
    assert cfg.horizons == [5.0]


def test_config_validation_bounds():
    with pytest.raises(ConfigError):
        TrainingConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainingConfig(mode_ce_weight=-0.5)
    with pytest.raises(ConfigError):
        RunConfig(horizons=[])
    with pytest.raises(ConfigError):
        RunConfig(horizons=[4.0])
    with pytest.raises(ConfigError):
        RunConfig(val_fraction=1.0)
    with pytest.raises(ConfigError):
        RunConfig(attach_radius=0.0)


def test_load_run_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "training": {\n')
    with pytest.raises(ParseError) as exc:
        load_run_config(bad)
    assert "line" in str(exc.value)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(arr)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# dataset splitting


def test_split_dataset_properties():
    train_a, val_a = tr.split_dataset(20, 0.25, seed=0)
    train_b, val_b = tr.split_dataset(20, 0.25, seed=0)
    assert (train_a, val_a) == (train_b, val_b)
    assert sorted(train_a + val_a) == list(range(20))
    assert len(val_a) == 5
    train_c, _ = tr.split_dataset(20, 0.25, seed=1)
    assert train_c != train_a

    train_d, val_d = tr.split_dataset(7, 0.0, seed=0)
    assert val_d == [] and train_d == list(range(7))
    # the clamp keeps both splits non-empty whenever possible
    train_e, val_e = tr.split_dataset(2, 0.9, seed=0)
    assert len(train_e) == 1 and len(val_e) == 1


# ---------------------------------------------------------------------------
# loss oracles


def loss_fixture(wta=True, mode_ce_weight=0.0):
    cfg = tiny_config(training={"wta": wta, "mode_ce_weight": mode_ce_weight})
    ds = tr.build_synth_dataset(cfg, cfg.model.t_f)
    assert ds.samples
    model = Forecaster(cfg.model, seed=5)
    return cfg, ds, model


def manual_mode_nlls(model, sample, graph):
    """Per-mode summed pair MGNLL via the scalar likelihood routine."""
    out = model.forward(sample, graph)
    traj = out["traj"].data
    cov = out["cov"].data
    x, mask = tr.pair_targets(sample)
    e = sample.ego_index
    others = [i for i in range(sample.n_agents) if i != e]
    sums = []
    for m in range(model.cfg.n_modes):
        total = 0.0
        for p, oi in enumerate(others):
            for t in range(sample.t_f):
                if not mask[p, t]:
                    continue
                mu = np.concatenate([traj[m, e, t], traj[m, oi, t]])
                total += mgnll(CovParams.from_vector(cov[m, p, t]), mu, x[p, t])
        sums.append(total)
    return sums, out


def test_wta_loss_matches_scalar_oracle():
    cfg, ds, model = loss_fixture(wta=True, mode_ce_weight=0.0)
    sample, graph = ds.samples[0], ds.graphs[0]
    total, stats = tr.scene_loss(model, sample, graph, cfg.training)
    sums, _ = manual_mode_nlls(model, sample, graph)
    assert stats["winner"] == int(np.argmin(sums))
    expected = min(sums)
    assert abs(stats["winner_nll"] - expected) < 1e-9 * max(1.0, abs(expected))
    assert abs(total.item() - expected) < 1e-9 * max(1.0, abs(expected))


def test_wta_ce_term_adds_winner_log_prob():
    cfg, ds, model = loss_fixture(wta=True, mode_ce_weight=0.7)
    sample, graph = ds.samples[0], ds.graphs[0]
    total, stats = tr.scene_loss(model, sample, graph, cfg.training)
    sums, out = manual_mode_nlls(model, sample, graph)
    logits = out["logits"].data
    logp = logits - logits.max()
    logp = logp - np.log(np.exp(logp).sum())
    expected = min(sums) - 0.7 * logp[int(np.argmin(sums))]
    assert abs(total.item() - expected) < 1e-9 * max(1.0, abs(expected))


def test_mixture_loss_matches_scalar_oracle():
    cfg, ds, model = loss_fixture(wta=False)
    sample, graph = ds.samples[0], ds.graphs[0]
    total, _ = tr.scene_loss(model, sample, graph, cfg.training)
    out = model.forward(sample, graph)
    traj, cov, logits = out["traj"].data, out["cov"].data, out["logits"].data
    logp = logits - logits.max()
    logp = logp - np.log(np.exp(logp).sum())
    x, mask = tr.pair_targets(sample)
    e = sample.ego_index
    others = [i for i in range(sample.n_agents) if i != e]
    expected = 0.0
    for p, oi in enumerate(others):
        for t in range(sample.t_f):
            if not mask[p, t]:
                continue
            scored = []
            for m in range(model.cfg.n_modes):
                mu = np.concatenate([traj[m, e, t], traj[m, oi, t]])
                nll = mgnll(CovParams.from_vector(cov[m, p, t]), mu, x[p, t])
                scored.append(logp[m] - nll)
            mx = max(scored)
            expected += -(mx + np.log(sum(np.exp(s - mx) for s in scored)))
    assert abs(total.item() - expected) < 1e-9 * max(1.0, abs(expected))


def test_wta_winner_follows_mode_swap():
    cfg, ds, model = loss_fixture(wta=True, mode_ce_weight=0.0)
    sample, graph = ds.samples[0], ds.graphs[0]
    _, stats = tr.scene_loss(model, sample, graph, cfg.training)

    swapped = Forecaster(cfg.model, seed=5)
    state = model.state_arrays()
    renamed = {}
    for name, arr in state.items():
        if name.startswith("head.traj0"):
            renamed[name.replace("head.traj0", "head.traj1", 1)] = arr
        elif name.startswith("head.traj1"):
            renamed[name.replace("head.traj1", "head.traj0", 1)] = arr
        elif name.startswith("head.cov0"):
            renamed[name.replace("head.cov0", "head.cov1", 1)] = arr
        elif name.startswith("head.cov1"):
            renamed[name.replace("head.cov1", "head.cov0", 1)] = arr
        else:
            renamed[name] = arr
    swapped.load_state(renamed)
    _, stats_sw = tr.scene_loss(swapped, sample, graph, cfg.training)
    assert stats_sw["winner"] == 1 - stats["winner"]
    assert abs(stats_sw["winner_nll"] - stats["winner_nll"]) < 1e-9


def test_no_valid_pair_step_returns_none():
    cfg, ds, model = loss_fixture()
    sample = ds.samples[0]
    sample.valid_mask[:, T_HIST:] = False
    assert tr.scene_loss(model, sample, ds.graphs[0], cfg.training) is None


# ---------------------------------------------------------------------------
# training loop


def test_train_writes_artifacts_and_logs(tmp_path):
    cfg = tiny_config(training={"epochs": 2})
    result = tr.train(cfg, tmp_path / "run")
    assert os.path.exists(result.checkpoint_path)
    assert (tmp_path / "run" / "train_log.txt").exists()
    assert len(result.log_lines) == 2
    for i, line in enumerate(result.log_lines, start=1):
        assert line.startswith(f"epoch {i} ")
        assert "train_nll" in line and "val_nll" in line
    assert len(result.epoch_train_nll) == 2
    assert set(result.train_indices).isdisjoint(result.val_indices)
    log_text = (tmp_path / "run" / "train_log.txt").read_text()
    assert log_text == "\n".join(result.log_lines) + "\n"

    model = tr.load_model(result.checkpoint_path)
    assert model.cfg == cfg.model


def test_training_reduces_train_nll(tmp_path):
    cfg = tiny_config(training={"epochs": 8, "lr": 3e-3}, val_fraction=0.0)
    result = tr.train(cfg, tmp_path / "run")
    assert result.epoch_train_nll[-1] < result.epoch_train_nll[0]


def test_ego_sampling_trains_and_diverges_from_fixed_ego(tmp_path):
    fixed = tr.train(tiny_config(training={"epochs": 2}), tmp_path / "a")
    mixed = tr.train(tiny_config(training={"epochs": 2, "ego_sampling": True}),
                     tmp_path / "b")
    assert np.isfinite(mixed.epoch_train_nll[-1])
    a, b = fixed.model.state_arrays(), mixed.model.state_arrays()
    assert any(not np.array_equal(a[n], b[n]) for n in a)


def test_mode_ce_zero_leaves_logit_head_untouched(tmp_path):
    cfg = tiny_config(training={"epochs": 1, "mode_ce_weight": 0.0})
    result = tr.train(cfg, tmp_path / "run")
    fresh = Forecaster(cfg.model, seed=cfg.training.seed)
    trained = result.model.state_arrays()
    init = fresh.state_arrays()
    mode_names = [n for n in trained if n.startswith("head.mode")]
    assert mode_names
    for n in mode_names:
        assert np.array_equal(trained[n], init[n]), n
    assert any(not np.array_equal(trained[n], init[n])
               for n in trained if not n.startswith("head.mode"))


def test_nan_abort_keeps_last_checkpoint(tmp_path, monkeypatch):
    cfg = tiny_config(training={"epochs": 1})
    real = tr.scene_loss
    calls = {"n": 0}

    def poisoned(model, sample, graph, tcfg):
        res = real(model, sample, graph, tcfg)
        calls["n"] += 1
        if calls["n"] >= 2 and res is not None:
            total, stats = res
            return dc.mul(total, float("inf")), stats
        return res

    monkeypatch.setattr(tr, "scene_loss", poisoned)
    with pytest.raises(NumericError) as exc:
        tr.train(cfg, tmp_path / "run")
    assert "checkpoint" in str(exc.value)
    model = tr.load_model(tmp_path / "run" / "model.ckpt")
    fresh = Forecaster(cfg.model, seed=cfg.training.seed)
    init = fresh.state_arrays()
    state = model.state_arrays()
    assert all(np.array_equal(state[n], init[n]) for n in state)


def test_generate_round_trips_into_loader(tmp_path):
    cfg = tiny_config()
    n_tracks, n_labels = tr.generate_dataset(cfg, tmp_path / "data")
    assert n_tracks == cfg.synth.n_agents
    direct = tr.build_synth_dataset(cfg, cfg.model.t_f)
    loaded = tr.load_dataset_dir(tmp_path / "data", cfg.model.t_f,
                                 cfg.window_stride, cfg.attach_radius)
    assert len(loaded.samples) == len(direct.samples)
    assert loaded.labels == direct.labels
    assert loaded.road.n_nodes == direct.road.n_nodes
    for a, b in zip(direct.samples, loaded.samples):
        assert a.anchor_frame == b.anchor_frame
        assert np.allclose(a.history, b.history, atol=1e-12)


def test_evaluate_horizon_mismatch(tmp_path):
    cfg = tiny_config(training={"epochs": 1})
    result = tr.train(cfg, tmp_path / "run")
    with pytest.raises(ValidationError):
        tr.evaluate(result.checkpoint_path, result.dataset, 5.0)
    with pytest.raises(ValidationError):
        tr.evaluate(result.checkpoint_path, result.dataset, 4.0)


def test_evaluate_baseline_matches_metrics_module(tmp_path):
    import paircast.metrics as met
    cfg = tiny_config(training={"epochs": 1})
    result = tr.train(cfg, tmp_path / "run")
    rm, rb = tr.evaluate(result.checkpoint_path, result.dataset, 3.0,
                         out_dir=tmp_path / "metrics")
    ds = result.dataset
    base = [met.constant_velocity_baseline(s) for s in ds.samples]
    gts = [s.future_gt for s in ds.samples]
    masks = [s.future_mask for s in ds.samples]
    expect = met.evaluate_scenes(base, gts, masks, 3.0)
    assert rb.min_sade == expect.min_sade
    assert rb.min_sfde == expect.min_sfde
    assert rb.smr == expect.smr
    assert rm.n_scenes == len(ds.samples)
    assert (tmp_path / "metrics" / "metrics_model.csv").exists()
    assert (tmp_path / "metrics" / "metrics_baseline.csv").exists()


# ---------------------------------------------------------------------------
# command line


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "run.json", tiny_dict(training={"epochs": 1}))
    data_dir = str(tmp_path / "data")
    out_dir = str(tmp_path / "train")

    assert main(["generate", "--config", cfg_path, "--out", data_dir]) == 0
    for name in ("tracks.csv", "labels.csv", "map.txt"):
        assert os.path.exists(os.path.join(data_dir, name))

    data_cfg = write_config(tmp_path / "train.json",
                            tiny_dict(training={"epochs": 1}, data_dir=data_dir))
    assert main(["train", "--config", data_cfg, "--out", out_dir]) == 0
    ckpt = os.path.join(out_dir, "model.ckpt")
    assert os.path.exists(ckpt)

    metrics_dir = str(tmp_path / "metrics")
    assert main(["eval", "--checkpoint", ckpt, "--data", data_dir,
                 "--horizon", "3", "--out", metrics_dir]) == 0
    out = capsys.readouterr().out
    assert "model horizon_s=3" in out
    assert "baseline horizon_s=3" in out
    assert os.path.exists(os.path.join(metrics_dir, "metrics_model.csv"))

    analysis_dir = str(tmp_path / "analysis")
    assert main(["analyze", "--checkpoint", ckpt, "--data", data_dir,
                 "--out", analysis_dir]) == 0
    assert os.path.exists(os.path.join(analysis_dir, "dependency.csv"))
    svgs = [f for f in os.listdir(analysis_dir) if f.endswith(".svg")]
    assert svgs


def test_cli_exit_code_one_on_bad_inputs(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "absent.json"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err

    cfg_path = write_config(tmp_path / "bad.json", {"no_such_key": 1})
    assert main(["train", "--config", cfg_path, "--out", str(tmp_path / "o")]) == 1

    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--data", str(tmp_path), "--horizon", "3"]) == 1


def test_cli_train_eval_analyze_deterministic(tmp_path):
    cfg_dict = tiny_dict(training={"epochs": 1})
    cfg_path = write_config(tmp_path / "run.json", cfg_dict)
    pairs = []
    for tag in ("a", "b"):
        out_dir = tmp_path / f"run_{tag}"
        assert main(["train", "--config", cfg_path, "--out", str(out_dir)]) == 0
        met_dir = tmp_path / f"met_{tag}"
        ana_dir = tmp_path / f"ana_{tag}"
        ckpt = str(out_dir / "model.ckpt")
        data_cfg = tr.build_synth_dataset(load_run_config(cfg_path), 15)
        rm, rb = tr.evaluate(ckpt, data_cfg, 3.0, out_dir=met_dir)
        tr.analyze(ckpt, data_cfg, ana_dir)
        pairs.append((out_dir, met_dir, ana_dir))

    (run_a, met_a, ana_a), (run_b, met_b, ana_b) = pairs
    assert (run_a / "model.ckpt").read_bytes() == (run_b / "model.ckpt").read_bytes()
    assert (run_a / "train_log.txt").read_bytes() == (run_b / "train_log.txt").read_bytes()
    for name in ("metrics_model.csv", "metrics_baseline.csv"):
        assert (met_a / name).read_bytes() == (met_b / name).read_bytes()
    files_a = sorted(os.listdir(ana_a))
    assert files_a == sorted(os.listdir(ana_b))
    for name in files_a:
        assert (ana_a / name).read_bytes() == (ana_b / name).read_bytes(), name


def test_cli_gradcheck_fault_injection(monkeypatch, capsys):
    import paircast.diffcore.tensor as tensor_mod
    monkeypatch.setattr(tensor_mod, "_sigmoid", lambda x: np.zeros_like(x))
    rc = main(["gradcheck"])
    captured = capsys.readouterr()
    assert rc == 2
    assert "FAIL" in captured.out
    assert "numeric error" in captured.err
