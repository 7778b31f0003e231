"""Finite-difference verification of the differentiable building blocks.

Every autodiff op, the pair-likelihood loss, and a tiny end-to-end
model are checked against central differences (h = 1e-5). Relative
error uses max(1, |a|, |b|) in the denominator so near-zero gradients
do not inflate the ratio. End-to-end checks subsample components per
parameter tensor; ``full`` checks every component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import TrainingConfig
from .model import Forecaster, ModelConfig
from .paircov import mgnll_tensor_sum
from .scenedata import F_AGENT, T_HIST, SceneSample
from .scenegraph import attach_agents, parse_road_graph
from .train import scene_loss

FD_H = 1e-5
OP_TOL = 1e-6
E2E_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _numeric_grad_at(f, x: np.ndarray, flat_indices) -> np.ndarray:
    out = np.zeros(len(flat_indices))
    flat = x.reshape(-1)
    for n, i in enumerate(flat_indices):
        keep = flat[i]
        flat[i] = keep + FD_H
        fp = f()
        flat[i] = keep - FD_H
        fm = f()
        flat[i] = keep
        out[n] = (fp - fm) / (2.0 * FD_H)
    return out


def check_function(name: str, build, arrays: dict, tol: float = OP_TOL,
                   sample_per_tensor=None, rng=None) -> CheckResult:
    """Compare backward() gradients of build(tensors) with finite differences.

    ``build`` maps a dict of fresh parameter Tensors to a scalar Tensor
    and is re-evaluated from the (possibly perturbed) arrays on every
    probe, so it must be deterministic.
    """
    tensors = {k: dc.param(v.copy()) for k, v in arrays.items()}
    loss = build(tensors)
    dc.backward(loss)

    worst = 0.0
    for k, arr in arrays.items():
        analytic = tensors[k].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        size = arr.size
        if sample_per_tensor is not None and size > sample_per_tensor:
            idx = np.sort(rng.choice(size, size=sample_per_tensor, replace=False))
        else:
            idx = np.arange(size)

        def value():
            ts = {kk: dc.const(vv) for kk, vv in arrays.items()}
            ts[k] = dc.param(arrays[k].copy())
            return build(ts).item()

        numeric = _numeric_grad_at(value, arr, idx)
        worst = max(worst, rel_err(analytic.reshape(-1)[idx], numeric))
    return CheckResult(name, worst, tol)


# ---------------------------------------------------------------------------
# op-level checks


def _away_from_zero(rng, shape, low=0.3, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _weighted_sum(t, w):
    return dc.tsum(dc.mul(t, dc.const(w)))


def op_checks(rng) -> list:
    checks = []
    x34 = _away_from_zero(rng, (3, 4))
    y34 = _away_from_zero(rng, (3, 4))
    y4 = _away_from_zero(rng, (4,))
    w34 = rng.normal(size=(3, 4))

    def bin_case(name, fn, second):
        arrays = {"x": x34.copy(), "y": second.copy()}
        checks.append(check_function(
            name, lambda t: _weighted_sum(fn(t["x"], t["y"]), w34), arrays))

    bin_case("add", dc.add, y34)
    bin_case("add_broadcast", dc.add, y4)
    bin_case("sub", dc.sub, y34)
    bin_case("mul", dc.mul, y34)
    bin_case("mul_broadcast", dc.mul, y4)
    bin_case("div", dc.div, y34)

    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    w = rng.normal(size=(2, 3, 5))
    checks.append(check_function(
        "matmul", lambda t: _weighted_sum(dc.matmul(t["a"], t["b"]), w),
        {"a": a, "b": b}))

    x234 = rng.normal(size=(2, 3, 4))
    w_t = rng.normal(size=(3, 2, 4))
    checks.append(check_function(
        "transpose", lambda t: _weighted_sum(dc.transpose(t["x"], (1, 0, 2)), w_t),
        {"x": x234.copy()}))
    w_r = rng.normal(size=(6, 4))
    checks.append(check_function(
        "reshape", lambda t: _weighted_sum(dc.reshape(t["x"], (6, 4)), w_r),
        {"x": x234.copy()}))
    w_e = rng.normal(size=(5, 3, 4))
    checks.append(check_function(
        "expand_leading", lambda t: _weighted_sum(dc.expand_leading(t["x"], 5), w_e),
        {"x": x34.copy()}))
    w_cl = rng.normal(size=(3, 8))
    checks.append(check_function(
        "concat_last",
        lambda t: _weighted_sum(dc.concat_last([t["x"], t["y"]]), w_cl),
        {"x": x34.copy(), "y": y34.copy()}))
    w_cr = rng.normal(size=(6, 4))
    checks.append(check_function(
        "concat_rows",
        lambda t: _weighted_sum(dc.concat_rows([t["x"], t["y"]]), w_cr),
        {"x": x34.copy(), "y": y34.copy()}))
    w_s = rng.normal(size=(3, 2))
    checks.append(check_function(
        "slice_axis", lambda t: _weighted_sum(dc.slice_axis(t["x"], 1, 1, 3), w_s),
        {"x": x34.copy()}))

    gidx = np.array([2, 0, 2, 1])
    w_g = rng.normal(size=(4, 4))
    checks.append(check_function(
        "gather_rows", lambda t: _weighted_sum(dc.gather_rows(t["x"], gidx), w_g),
        {"x": x34.copy()}))
    sidx = np.array([1, 4, 1])
    w_sc = rng.normal(size=(5, 4))
    checks.append(check_function(
        "scatter_add_rows",
        lambda t: _weighted_sum(dc.scatter_add_rows(t["x"], sidx, 5), w_sc),
        {"x": x34.copy()}))

    w_sum = rng.normal(size=(4,))
    checks.append(check_function(
        "sum_axis", lambda t: _weighted_sum(dc.tsum(t["x"], axis=0), w_sum),
        {"x": x34.copy()}))
    checks.append(check_function(
        "sum_all", lambda t: dc.tsum(t["x"]), {"x": x34.copy()}))
    w_mean = rng.normal(size=(3,))
    checks.append(check_function(
        "mean_axis", lambda t: _weighted_sum(dc.tmean(t["x"], axis=1), w_mean),
        {"x": x34.copy()}))
    checks.append(check_function(
        "mean_all", lambda t: dc.tmean(t["x"]), {"x": x34.copy()}))

    for name, fn in (("relu", dc.relu), ("softplus", dc.softplus), ("exp", dc.exp)):
        checks.append(check_function(
            name, lambda t, fn=fn: _weighted_sum(fn(t["x"]), w34),
            {"x": x34.copy()}))
    xpos = rng.uniform(0.3, 2.0, size=(3, 4))
    checks.append(check_function(
        "log", lambda t: _weighted_sum(dc.log(t["x"]), w34), {"x": xpos}))
    checks.append(check_function(
        "softmax", lambda t: _weighted_sum(dc.softmax(t["x"], axis=-1), w34),
        {"x": x34.copy()}))

    gain = rng.uniform(0.5, 1.5, size=4)
    bias = rng.normal(size=4) * 0.1
    checks.append(check_function(
        "layer_norm",
        lambda t: _weighted_sum(dc.layer_norm(t["x"], t["gain"], t["bias"]), w34),
        {"x": x34.copy(), "gain": gain, "bias": bias}))
    return checks


def mgnll_check(rng) -> CheckResult:
    cov = np.concatenate([rng.uniform(0.5, 2.0, size=(2, 3, 4)),
                          rng.normal(size=(2, 3, 6)) * 0.5], axis=-1)
    mu = rng.normal(size=(2, 3, 4))
    x = mu + rng.normal(size=(2, 3, 4))

    return check_function(
        "mgnll",
        lambda t: mgnll_tensor_sum(t["cov"], t["mu"], dc.const(x)),
        {"cov": cov, "mu": mu})


# ---------------------------------------------------------------------------
# end-to-end model checks


def make_toy_scene(seed: int = 0, a: int = 3, t_f: int = 5):
    """A small fully-valid sample plus its graph, for gradient probing."""
    rng = np.random.default_rng(seed)
    history = np.zeros((a, T_HIST, F_AGENT))
    start = rng.uniform(-3.0, 3.0, size=(a, 2))
    vel = rng.uniform(-1.0, 1.0, size=(a, 2))
    for s in range(T_HIST):
        history[:, s, 0:2] = start + vel * (s * 0.2)
    history[:, :, 2] = 1.0
    history[:, :, 4] = np.linalg.norm(vel, axis=1)[:, None]
    history[:, :, 5] = 1.0
    future = np.zeros((a, t_f, 2))
    cur = history[:, -1, 0:2]
    for s in range(t_f):
        future[:, s] = cur + vel * ((s + 1) * 0.2)
    sample = SceneSample(
        agent_ids=list(range(a)),
        history=history,
        future_gt=future,
        valid_mask=np.ones((a, T_HIST + t_f), dtype=bool),
        ego_index=0,
        map_ref="toy",
    )
    map_text = "nodes\n" + "\n".join(
        f"{i} {float(i)} 0.0 arm" for i in range(4)) + \
        "\nedges\n" + "\n".join(f"{i} {i + 1} road" for i in range(3)) + "\n"
    road = parse_road_graph(map_text)
    graph = attach_agents(road, sample, radius=50.0)
    return sample, graph


def model_check(saienc: str, rng, full: bool = False) -> CheckResult:
    cfg = ModelConfig(d_model=16, n_heads=2, n_dec=1, n_gnn=1, n_modes=2,
                      saienc=saienc, t_f=5, sigma_bias=0.05)
    sample, graph = make_toy_scene(seed=7)
    tcfg = TrainingConfig(mode_ce_weight=0.1)

    def build(tensors):
        fresh = Forecaster(cfg, seed=3)
        for name, t in tensors.items():
            fresh.params[name] = t
        _rewire(fresh)
        total, _ = scene_loss(fresh, sample, graph, tcfg)
        return total

    base = Forecaster(cfg, seed=3)
    arrays = {k: v.data.copy() for k, v in base.params.items()}
    limit = None if full else 3
    return check_function(f"model_{saienc}", build, arrays, tol=E2E_TOL,
                          sample_per_tensor=limit, rng=rng)


def _rewire(model: Forecaster):
    """Point every layer object at the registry's current Tensors."""
    p = model.params

    def relink_linear(lin, prefix):
        lin.w = p[f"{prefix}.w"]
        lin.b = p[f"{prefix}.b"]

    def relink_mlp(mlp, prefix):
        for i, lay in enumerate(mlp.layers):
            relink_linear(lay, f"{prefix}.l{i}")

    def relink_ln(ln, prefix):
        ln.gain = p[f"{prefix}.gain"]
        ln.bias = p[f"{prefix}.bias"]

    def relink_mha(mha, prefix):
        relink_linear(mha.wq, f"{prefix}.q")
        relink_linear(mha.wk, f"{prefix}.k")
        relink_linear(mha.wv, f"{prefix}.v")
        relink_linear(mha.wo, f"{prefix}.o")

    relink_linear(model.agent_embed, "tenc.embed")
    for i, lay in enumerate(model.tenc_layers):
        relink_mha(lay.attn, f"tenc.layer{i}.attn")
        relink_ln(lay.ln1, f"tenc.layer{i}.ln1")
        relink_mlp(lay.ffn, f"tenc.layer{i}.ffn")
        relink_ln(lay.ln2, f"tenc.layer{i}.ln2")
    if model.cfg.saienc == "gnn":
        relink_linear(model.road_embed, "saienc.road")
        relink_linear(model.edge_embed, "saienc.edge")
        for i, mlp in enumerate(model.gnn_mlps):
            relink_mlp(mlp, f"saienc.gin{i}")
    elif model.cfg.saienc == "attention":
        relink_linear(model.road_embed, "saienc.road")
        for i, lay in enumerate(model.sa_layers):
            relink_mha(lay.attn, f"saienc.layer{i}.attn")
            relink_ln(lay.ln1, f"saienc.layer{i}.ln1")
            relink_mlp(lay.ffn, f"saienc.layer{i}.ffn")
            relink_ln(lay.ln2, f"saienc.layer{i}.ln2")
    model.queries = p["dec.queries"]
    for i, blk in enumerate(model.dec_blocks):
        pref = f"dec.block{i}"
        relink_mha(blk.self_attn, f"{pref}.self")
        relink_ln(blk.ln_self, f"{pref}.ln_self")
        if blk.cross_spatial is not None:
            relink_mha(blk.cross_spatial, f"{pref}.spatial")
            relink_ln(blk.ln_spatial, f"{pref}.ln_spatial")
        relink_mha(blk.cross_temporal, f"{pref}.temporal")
        relink_ln(blk.ln_temporal, f"{pref}.ln_temporal")
        relink_mlp(blk.ffn, f"{pref}.ffn")
        relink_ln(blk.ln_ffn, f"{pref}.ln_ffn")
    for m, mlp in enumerate(model.traj_heads):
        relink_mlp(mlp, f"head.traj{m}")
    for m, mlp in enumerate(model.cov_heads):
        relink_mlp(mlp, f"head.cov{m}")
    relink_mlp(model.mode_head, "head.mode")


def run_gradcheck(full: bool = False, seed: int = 0) -> list:
    """All checks, each exactly once; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    results = op_checks(rng)
    results.append(mgnll_check(rng))
    for saienc in ("none", "gnn", "attention"):
        results.append(model_check(saienc, rng, full=full))
    return results
