"""The prediction network.

Four stages, all built on the in-package autodiff tensors:

- temporal encoding: each agent's history tokens are embedded, given
  sinusoidal time positions, and self-attended strictly within the
  agent's own trajectory
- spatial encoding (switchable): either message passing over the
  road-agent graph with edge features, or full self-attention over all
  road and agent tokens; road outputs are discarded either way
- factorized decoding: learned future-step queries per agent pass N
  times through self-attention, cross-attention to the agent's spatial
  embedding, cross-attention to the agent's temporal embeddings, and a
  feed-forward block, each wrapped in residual + layer norm
- heads: per mode, a trajectory MLP on every agent and a covariance
  MLP on ego-anchored pair embeddings (ego concatenated with each
  other agent); scale outputs pass softplus plus a fixed positive
  bias, so predicted covariances are positive-definite by
  construction. A mode head scores the modes from pooled decoder
  output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import CheckpointError, ConfigError, ValidationError
from .scenedata import F_AGENT, T_HIST, SceneSample
from .scenegraph import F_EDGE, F_ROAD, SceneGraph

TENC_LAYERS = 2     # temporal encoder depth
SAIENC_LAYERS = 2   # attention spatial encoder depth
FFN_MULT = 2        # feed-forward widening factor
NEG_INF = -1e9      # additive attention mask value

SAIENC_CHOICES = ("none", "gnn", "attention")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_dec: int = 2
    n_gnn: int = 3
    n_modes: int = 6
    saienc: str = "attention"
    t_f: int = 15
    sigma_bias: float = 0.05

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_modes < 1:
            raise ConfigError(f"n_modes must be >= 1, got {self.n_modes}")
        if self.sigma_bias <= 0.0:
            raise ConfigError(f"sigma_bias must be > 0, got {self.sigma_bias}")
        if self.saienc not in SAIENC_CHOICES:
            raise ConfigError(f"saienc must be one of {SAIENC_CHOICES}, got {self.saienc!r}")
        if self.t_f < 1:
            raise ConfigError(f"t_f must be >= 1, got {self.t_f}")
        if self.n_dec < 1 or self.n_gnn < 1:
            raise ConfigError("n_dec and n_gnn must be >= 1")

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_heads": self.n_heads,
                "n_dec": self.n_dec, "n_gnn": self.n_gnn,
                "n_modes": self.n_modes, "saienc": self.saienc,
                "t_f": self.t_f, "sigma_bias": self.sigma_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class PredictionOutput:
    """Plain-array network output for one scene."""
    traj: np.ndarray         # [n_modes, A, T_f, 2]
    cov_params: np.ndarray   # [n_modes, A-1, T_f, 10]
    mode_logits: np.ndarray  # [n_modes]

    def validate(self, sigma_bias: float):
        if not (np.all(np.isfinite(self.traj)) and np.all(np.isfinite(self.cov_params))
                and np.all(np.isfinite(self.mode_logits))):
            raise ValidationError("non-finite prediction output")
        if np.any(self.cov_params[..., 0:4] <= sigma_bias):
            raise ValidationError("scale outputs must strictly exceed sigma_bias")

    def mode_probs(self) -> np.ndarray:
        z = self.mode_logits - self.mode_logits.max()
        e = np.exp(z)
        return e / e.sum()


def sinusoidal_pe(t_len: int, d: int) -> np.ndarray:
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    return np.where(np.arange(d)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


class _Store:
    """Flat name -> Tensor parameter registry with seeded init."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def make(self, name: str, shape, zero: bool = False) -> Tensor:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        if zero:
            t = dc.param(np.zeros(shape))
        else:
            t = dc.param(None, rng=self.rng, shape=tuple(shape))
        self.params[name] = t
        return t

    def make_const_init(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        t = dc.param(np.array(value, dtype=np.float64))
        self.params[name] = t
        return t


class Linear:
    def __init__(self, store: _Store, name: str, d_in: int, d_out: int):
        self.w = store.make(f"{name}.w", (d_in, d_out))
        self.b = store.make(f"{name}.b", (d_out,), zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add(dc.matmul(x, self.w), self.b)


class MLP:
    """relu MLP; widths[0] is the input size, widths[-1] the output."""

    def __init__(self, store: _Store, name: str, widths):
        self.layers = [Linear(store, f"{name}.l{i}", widths[i], widths[i + 1])
                       for i in range(len(widths) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = dc.relu(x)
        return x


class LayerNorm:
    def __init__(self, store: _Store, name: str, d: int):
        self.gain = store.make_const_init(f"{name}.gain", np.ones(d))
        self.bias = store.make(f"{name}.bias", (d,), zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention:
    """Batched attention: queries [B, Tq, d], keys/values [B, Tk, d]."""

    def __init__(self, store: _Store, name: str, d: int, n_heads: int):
        self.d = d
        self.h = n_heads
        self.dh = d // n_heads
        self.wq = Linear(store, f"{name}.q", d, d)
        self.wk = Linear(store, f"{name}.k", d, d)
        self.wv = Linear(store, f"{name}.v", d, d)
        self.wo = Linear(store, f"{name}.o", d, d)

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return dc.transpose(dc.reshape(x, (b, t, self.h, self.dh)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_valid=None) -> Tensor:
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        q = self._split(self.wq(q_in), b, tq)
        k = self._split(self.wk(kv_in), b, tk)
        v = self._split(self.wv(kv_in), b, tk)
        scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))),
                        1.0 / math.sqrt(self.dh))
        if key_valid is not None:
            add_mask = np.where(np.asarray(key_valid, dtype=bool), 0.0, NEG_INF)
            add_mask = np.broadcast_to(add_mask[:, None, None, :],
                                       (b, self.h, tq, tk)).copy()
            scores = dc.add(scores, dc.const(add_mask))
        attn = dc.softmax(scores, axis=-1)
        out = dc.matmul(attn, v)
        out = dc.reshape(dc.transpose(out, (0, 2, 1, 3)), (b, tq, self.d))
        return self.wo(out)


class EncoderLayer:
    """Post-norm transformer layer: self-attention then feed-forward."""

    def __init__(self, store: _Store, name: str, d: int, n_heads: int):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, n_heads)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ffn = MLP(store, f"{name}.ffn", [d, FFN_MULT * d, d])
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)

    def __call__(self, x: Tensor, key_valid=None) -> Tensor:
        x = self.ln1(dc.add(x, self.attn(x, x, key_valid)))
        return self.ln2(dc.add(x, self.ffn(x)))


class _DecoderBlock:
    def __init__(self, store: _Store, name: str, cfg: ModelConfig):
        d, h = cfg.d_model, cfg.n_heads
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d, h)
        self.ln_self = LayerNorm(store, f"{name}.ln_self", d)
        if cfg.saienc != "none":
            self.cross_spatial = MultiHeadAttention(store, f"{name}.spatial", d, h)
            self.ln_spatial = LayerNorm(store, f"{name}.ln_spatial", d)
        else:
            self.cross_spatial = None
            self.ln_spatial = None
        self.cross_temporal = MultiHeadAttention(store, f"{name}.temporal", d, h)
        self.ln_temporal = LayerNorm(store, f"{name}.ln_temporal", d)
        self.ffn = MLP(store, f"{name}.ffn", [d, FFN_MULT * d, d])
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", d)

    def __call__(self, x: Tensor, temporal: Tensor, spatial, hist_valid) -> Tensor:
        x = self.ln_self(dc.add(x, self.self_attn(x, x)))
        if self.cross_spatial is not None:
            x = self.ln_spatial(dc.add(x, self.cross_spatial(x, spatial)))
        x = self.ln_temporal(dc.add(x, self.cross_temporal(x, temporal, hist_valid)))
        return self.ln_ffn(dc.add(x, self.ffn(x)))


class Forecaster:
    """Trainable scene predictor; parameters live in one flat registry."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        store = _Store(seed)
        d = cfg.d_model

        self.agent_embed = Linear(store, "tenc.embed", F_AGENT, d)
        self.tenc_layers = [EncoderLayer(store, f"tenc.layer{i}", d, cfg.n_heads)
                            for i in range(TENC_LAYERS)]
        self._pe = sinusoidal_pe(T_HIST, d)

        if cfg.saienc == "gnn":
            self.road_embed = Linear(store, "saienc.road", F_ROAD, d)
            self.edge_embed = Linear(store, "saienc.edge", F_EDGE, d)
            self.gnn_mlps = [MLP(store, f"saienc.gin{i}", [d, d, d])
                             for i in range(cfg.n_gnn)]
        elif cfg.saienc == "attention":
            self.road_embed = Linear(store, "saienc.road", F_ROAD, d)
            self.sa_layers = [EncoderLayer(store, f"saienc.layer{i}", d, cfg.n_heads)
                              for i in range(SAIENC_LAYERS)]

        self.queries = store.make("dec.queries", (cfg.t_f, d))
        self.dec_blocks = [_DecoderBlock(store, f"dec.block{i}", cfg)
                           for i in range(cfg.n_dec)]

        self.traj_heads = [MLP(store, f"head.traj{m}", [d, d, d, 2])
                           for m in range(cfg.n_modes)]
        self.cov_heads = [MLP(store, f"head.cov{m}", [2 * d, d, d, 10])
                          for m in range(cfg.n_modes)]
        self.mode_head = MLP(store, "head.mode", [d, d, cfg.n_modes])

        self.params = store.params

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> dict:
        return self.params

    def state_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, arrays: dict):
        for name, t in self.params.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint misses parameter {name!r}")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {a.shape} != model {t.data.shape}")
            t.data = a.copy()
        extra = set(arrays) - set(self.params)
        if extra:
            raise CheckpointError(f"checkpoint holds unknown parameters {sorted(extra)}")

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- stages -------------------------------------------------------------

    def temporal_encode(self, sample: SceneSample) -> Tensor:
        """[A, T_h, d]; attention stays within each agent's own tokens."""
        feats = np.where(sample.hist_mask[:, :, None], sample.history, 0.0)
        x = self.agent_embed(dc.const(feats))
        x = dc.add(x, dc.const(np.broadcast_to(
            self._pe, (sample.n_agents, T_HIST, self.cfg.d_model)).copy()))
        for layer in self.tenc_layers:
            x = layer(x, key_valid=sample.hist_mask)
        return x

    def spatial_encode_gnn(self, graph: SceneGraph, agent_emb: Tensor) -> Tensor:
        """Message passing over the merged graph; agent rows returned."""
        nr = graph.road.n_nodes
        a = graph.n_agents
        road = self.road_embed(dc.const(graph.road.node_feat))
        h = dc.concat_rows([road, agent_emb])
        src, dst, efeat = graph.merged_edges()
        edge_emb = self.edge_embed(dc.const(efeat))
        n_total = nr + a
        for mlp in self.gnn_mlps:
            msgs = dc.relu(dc.add(dc.gather_rows(h, src), edge_emb))
            agg = dc.scatter_add_rows(msgs, dst, n_total)
            h = mlp(dc.add(h, agg))
        return dc.slice_axis(h, 0, nr, n_total)

    def spatial_encode_attn(self, graph: SceneGraph, agent_emb: Tensor) -> Tensor:
        """Full self-attention over road and agent tokens; agent rows returned."""
        nr = graph.road.n_nodes
        a = graph.n_agents
        road = self.road_embed(dc.const(graph.road.node_feat))
        tokens = dc.reshape(dc.concat_rows([road, agent_emb]), (1, nr + a, self.cfg.d_model))
        for layer in self.sa_layers:
            tokens = layer(tokens)
        flat = dc.reshape(tokens, (nr + a, self.cfg.d_model))
        return dc.slice_axis(flat, 0, nr, nr + a)

    def spatial_encode(self, graph, agent_emb: Tensor):
        if self.cfg.saienc == "none":
            return None
        if self.cfg.saienc == "gnn":
            return self.spatial_encode_gnn(graph, agent_emb)
        return self.spatial_encode_attn(graph, agent_emb)

    def _decode_block(self, k: int, x: Tensor, temporal: Tensor, spatial,
                      hist_valid) -> Tensor:
        return self.dec_blocks[k](x, temporal, spatial, hist_valid)

    def decode(self, temporal: Tensor, spatial, hist_valid) -> Tensor:
        """[A, T_f, d] future embeddings from shared learned queries."""
        a = temporal.shape[0]
        x = dc.expand_leading(self.queries, a)
        spatial_kv = None
        if spatial is not None:
            spatial_kv = dc.reshape(spatial, (a, 1, self.cfg.d_model))
        for k in range(self.cfg.n_dec):
            x = self._decode_block(k, x, temporal, spatial_kv, hist_valid)
        return x

    def heads(self, decoded: Tensor, ego_index: int,
              anchor_xy: np.ndarray) -> dict:
        """Per-mode tensor outputs: traj [M,A,T,2], cov [M,A-1,T,10], logits [M].

        Trajectories are emitted as offsets from each agent's last
        observed position, so the scene-frame output stays well scaled
        regardless of how far the scene spreads from its origin.
        """
        a, t_f, d = decoded.shape
        if a < 2:
            raise ValidationError(f"prediction heads require A >= 2, got {a}")
        if not 0 <= ego_index < a:
            raise ValidationError(f"ego_index {ego_index} out of range")

        ego = dc.reshape(dc.slice_axis(decoded, 0, ego_index, ego_index + 1), (t_f, d))
        ego_rep = dc.expand_leading(ego, a - 1)
        parts = []
        if ego_index > 0:
            parts.append(dc.slice_axis(decoded, 0, 0, ego_index))
        if ego_index + 1 < a:
            parts.append(dc.slice_axis(decoded, 0, ego_index + 1, a))
        others = parts[0] if len(parts) == 1 else dc.concat_rows(parts)
        pair = dc.concat_last([ego_rep, others])

        anchor = dc.const(np.ascontiguousarray(
            np.broadcast_to(anchor_xy[:, None, :], (a, t_f, 2))))
        trajs = []
        covs = []
        for m in range(self.cfg.n_modes):
            tr = dc.add(self.traj_heads[m](decoded), anchor)
            trajs.append(dc.reshape(tr, (1, a, t_f, 2)))
            raw = self.cov_heads[m](pair)
            scale = dc.add(dc.softplus(dc.slice_axis(raw, 2, 0, 4)),
                           self.cfg.sigma_bias)
            low = dc.slice_axis(raw, 2, 4, 10)
            covs.append(dc.reshape(dc.concat_last([scale, low]), (1, a - 1, t_f, 10)))
        traj = trajs[0] if len(trajs) == 1 else dc.concat_rows(trajs)
        cov = covs[0] if len(covs) == 1 else dc.concat_rows(covs)

        pooled = dc.tmean(dc.tmean(decoded, axis=0), axis=0)
        logits = dc.reshape(self.mode_head(dc.reshape(pooled, (1, d))),
                            (self.cfg.n_modes,))
        return {"traj": traj, "cov": cov, "logits": logits}

    def forward(self, sample: SceneSample, graph=None) -> dict:
        """Full differentiable pipeline for one scene."""
        if self.cfg.saienc != "none" and graph is None:
            raise ValidationError(f"saienc={self.cfg.saienc!r} requires a scene graph")
        if sample.t_f != self.cfg.t_f:
            raise ValidationError(
                f"sample future length {sample.t_f} != model t_f {self.cfg.t_f}")
        temporal = self.temporal_encode(sample)
        current = dc.reshape(
            dc.slice_axis(temporal, 1, T_HIST - 1, T_HIST),
            (sample.n_agents, self.cfg.d_model))
        spatial = self.spatial_encode(graph, current)
        decoded = self.decode(temporal, spatial, sample.hist_mask)
        return self.heads(decoded, sample.ego_index, sample.current_positions())

    def predict(self, sample: SceneSample, graph=None) -> PredictionOutput:
        """Forward pass detached into plain arrays, validated."""
        out = self.forward(sample, graph)
        result = PredictionOutput(
            traj=out["traj"].data.copy(),
            cov_params=out["cov"].data.copy(),
            mode_logits=out["logits"].data.copy(),
        )
        result.validate(self.cfg.sigma_bias)
        return result
