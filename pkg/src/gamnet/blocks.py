"""Neural building blocks: two-layer MLP, graph attention, selective SSM,
and their gated fusion into the GAM block.

A GAM block layer-normalizes its node features, runs them through a graph
attention branch (edge-conditioned, over the block's relation graph) and a
selective state-space branch (along the block's sequence axis), then fuses
the two branch outputs around the residual with a learned sigmoid gate:

    out = P + G * A + (1 - G) * M,   G = sigmoid(W_g(M + A))

which is exactly the convex combination G * (P + A) + (1 - G) * (P + M) of
the residual branch outputs. With the gate disabled (ablation) G is fixed
at 0.5.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphs import RelationGraph
from .rng import SplitMix64
from .tensor import Tensor


@dataclass
class GamConfig:
    d: int
    n_heads: int = 8
    ssm_state_dim: int = 16
    ssm_expand: int = 2
    n_mamba_layers: int = 1
    gate_enabled: bool = True

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.ssm_state_dim < 1 or self.ssm_expand < 1:
            raise ValueError("GamConfig: all dimensions must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"GamConfig: d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_mamba_layers not in (1, 3, 5):
            raise ValueError("GamConfig: n_mamba_layers must be 1, 3, or 5")


class Module:
    """Minimal parameter container; parameters() walks attributes recursively."""

    def parameters(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for key, p in val.parameters().items():
                    out[f"{name}.{key}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for key, p in item.parameters().items():
                            out[f"{name}.{i}.{key}"] = p
        return out

    def zero_all_parameters(self):
        for p in self.parameters().values():
            p.data[...] = 0.0


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng: SplitMix64, bias=True):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Tensor(rng.uniforms(in_dim * out_dim, -bound, bound)
                             .reshape(in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x):
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x) * self.gamma + self.beta


class Mlp2(Module):
    """Linear -> ReLU -> Linear -> LayerNorm(affine)."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng: SplitMix64):
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, out_dim, rng)
        self.norm = LayerNorm(out_dim)

    def __call__(self, x):
        return self.norm(self.fc2(T.relu(self.fc1(x))))


def silu(x):
    return x * T.sigmoid(x)


class GatBlock(Module):
    """Multi-head attention over a relation graph's in-neighborhoods.

    Keys and values are additively conditioned on the edge embeddings. A
    node with no incoming edges gets a zero message. No residual here; the
    caller owns it.
    """

    def __init__(self, d, n_heads, rng: SplitMix64):
        self.d = d
        self.n_heads = n_heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.e_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng, bias=False)

    def __call__(self, dst_nodes, graph: RelationGraph, edge_emb, src_nodes=None):
        if src_nodes is None:
            src_nodes = dst_nodes
        if graph.n_edges and int(graph.src.max()) >= src_nodes.shape[0]:
            raise IndexError("gat_block: edge source index out of range")
        if graph.n_edges and int(graph.dst.max()) >= dst_nodes.shape[0]:
            raise IndexError("gat_block: edge target index out of range")
        h, dh = self.n_heads, self.d // self.n_heads
        n_dst = dst_nodes.shape[0]
        y = graph.n_edges

        q = T.take(self.q_proj(dst_nodes), graph.dst).reshape(y, h, dh)
        e = self.e_proj(edge_emb)
        k = (T.take(self.k_proj(src_nodes), graph.src) + e).reshape(y, h, dh)
        v = (T.take(self.v_proj(src_nodes), graph.src) + e).reshape(y, h, dh)

        logits = (q * k).sum(axis=-1) * (1.0 / math.sqrt(dh))  # [Y, H]
        # per-target softmax; subtracting the (constant) segment max is exact
        # because softmax is shift invariant
        seg_max = np.full((n_dst, h), -np.inf)
        np.maximum.at(seg_max, graph.dst, logits.data)
        z = T.exp(logits - seg_max[graph.dst])
        denom = T.segment_sum(z, graph.dst, n_dst)
        attn = z / T.take(denom, graph.dst)

        weighted = v * T.repeat(attn.reshape(y, h, 1), dh, axis=2)
        msg = T.segment_sum(weighted, graph.dst, n_dst).reshape(n_dst, self.d)
        return self.out_proj(msg)


class SsmLayer(Module):
    """One selective state-space layer with input-dependent step/input/output.

    For expanded channels u = W_in(x) the diagonal recurrence is

        h_t = exp(-dt_t * a) * h_{t-1} + dt_t * B_t * u_t
        y_t = sum_s C_t[s] * h_t[:, s]

    with dt = softplus(W_dt(x)), B/C linear in x, and a = exp(log_a) a
    positive per-channel decay rate. The output is gated by a parallel
    silu branch and projected back to d. Causal by construction.
    """

    def __init__(self, d, state_dim, expand, rng: SplitMix64):
        self.d = d
        self.e = d * expand
        self.s = state_dim
        self.in_proj = Linear(d, self.e, rng)
        self.gate_proj = Linear(d, self.e, rng)
        self.dt_proj = Linear(d, self.e, rng)
        self.b_proj = Linear(d, self.s, rng)
        self.c_proj = Linear(d, self.s, rng)
        self.log_a = Tensor(np.zeros(self.e), requires_grad=True)
        self.out_proj = Linear(self.e, d, rng)

    def __call__(self, x):
        """x: [L, B, d] -> [L, B, d], causal along axis 0."""
        if x.ndim != 3 or x.shape[2] != self.d:
            raise T.ShapeError("ssm_layer", x.shape, (-1, -1, self.d))
        if x.shape[0] < 1:
            raise ValueError("ssm_layer: empty sequence")
        ln, bn = x.shape[0], x.shape[1]
        u = self.in_proj(x)
        z = self.gate_proj(x)
        dt = T.softplus(self.dt_proj(x))  # [L, B, E]
        b_t = self.b_proj(x)  # [L, B, S]
        c_t = self.c_proj(x)
        decay = T.exp(-(dt * T.exp(self.log_a)))

        du = (dt * u).reshape(ln, bn, self.e, 1)
        inp = T.repeat(du, self.s, axis=3) * T.repeat(
            b_t.reshape(ln, bn, 1, self.s), self.e, axis=2)
        dec = T.repeat(decay.reshape(ln, bn, self.e, 1), self.s, axis=3)
        h = T.scan(dec, inp)  # [L, B, E, S]
        y = (h * T.repeat(c_t.reshape(ln, bn, 1, self.s), self.e, axis=2)).sum(axis=3)
        return self.out_proj(y * silu(z))


class SsmBlock(Module):
    """A stack of selective SSM layers applied in sequence (1, 3, or 5)."""

    def __init__(self, cfg: GamConfig, rng: SplitMix64):
        self.layers = [SsmLayer(cfg.d, cfg.ssm_state_dim, cfg.ssm_expand, rng)
                       for _ in range(cfg.n_mamba_layers)]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def gated_fusion(p, p_a, p_m, gate_fc: Linear, gate_enabled: bool):
    """Fuse attention and state-space branch outputs around the residual.

    Enabled: G = sigmoid(gate_fc(p_m + p_a)), out = p + G*p_a + (1-G)*p_m.
    Disabled (ablation): out = p + 0.5*p_a + 0.5*p_m.
    """
    if not gate_enabled:
        return p + 0.5 * p_a + 0.5 * p_m
    gate = T.sigmoid(gate_fc(p_m + p_a))
    return p + gate * p_a + (1.0 - gate) * p_m


class GamBlock(Module):
    """Gated fusion of a graph-attention branch and a state-space branch."""

    def __init__(self, cfg: GamConfig, rng: SplitMix64):
        self.cfg = cfg
        self.node_norm = LayerNorm(cfg.d)
        self.edge_norm = LayerNorm(cfg.d)
        self.gat = GatBlock(cfg.d, cfg.n_heads, rng)
        self.ssm = SsmBlock(cfg, rng)
        self.gate_fc = Linear(cfg.d, cfg.d, rng)

    def __call__(self, p, graph: RelationGraph, edge_emb, dims, seq_axis):
        """p: [V, d] with V = T*N*K laid out row-major over dims = (T, N, K).

        seq_axis selects the state-space sequence ordering: "time" scans the
        T axis (N*K parallel sequences), "mode" scans the K axis.
        """
        x = self.node_norm(p)
        branch_a = self.gat(x, graph, self.edge_norm(edge_emb))
        branch_m = _unview_sequences(
            self.ssm(_view_sequences(x, dims, seq_axis)), dims, seq_axis)
        return gated_fusion(p, branch_a, branch_m, self.gate_fc, self.cfg.gate_enabled)


def _view_sequences(x, dims, seq_axis):
    t_hist, n_agents, k_modes = dims
    d = x.shape[-1]
    if seq_axis == "time":
        return x.reshape(t_hist, n_agents * k_modes, d)
    if seq_axis == "mode":
        return x.reshape(t_hist * n_agents, k_modes, d).transpose(1, 0, 2)
    raise ValueError(f"unknown seq_axis {seq_axis!r}")


def _unview_sequences(x, dims, seq_axis):
    t_hist, n_agents, k_modes = dims
    v = t_hist * n_agents * k_modes
    d = x.shape[-1]
    if seq_axis == "time":
        return x.reshape(v, d)
    return x.transpose(1, 0, 2).reshape(v, d)
