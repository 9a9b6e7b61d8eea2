"""The full trajectory prediction network.

Pipeline: per-frame agent/map/edge encoders feed per-mode prediction
embeddings; a stack of GAM blocks (agent interactions, then historical
predictions, then modes, repeated n_rep times) plus a trailing state-space
block refines them; a proposal head decodes anchored trajectories and mode
probabilities; a refinement stage re-encodes the proposal endpoints, runs
one more GAM stack, and decodes additive corrections; a score head predicts
per-(t, n) quality scores from the proposal embeddings.
"""

import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .blocks import GamBlock, GamConfig, GatBlock, Linear, Mlp2, Module, SsmBlock, LayerNorm
from .graphs import RelationGraph, SceneGraphs, build_scene_graphs
from .rng import SplitMix64
from .scene import Scene
from .tensor import Tensor

AGENT_FEATURE_DIM = 5  # speed, cos/sin of velocity direction, one-hot attr
MAP_FEATURE_DIM = 3  # length, one-hot attr
EDGE_FEATURE_DIM = 6  # distance, cos/sin phi, cos/sin psi, frame delta
N_AGENT_ATTRS = 2
N_LANE_ATTRS = 2

STAGES = ("agent", "historical", "mode")


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 8
    ssm_state_dim: int = 16
    ssm_expand: int = 2
    n_mamba_layers: int = 1
    gate_enabled: bool = True
    score_enabled: bool = True
    t_history: int = 20
    f_future: int = 30
    k_modes: int = 6
    n_rep: int = 2
    agent_radius_m: float = 50.0
    map_radius_m: float = 30.0
    window_w: int = 0  # 0 means the full history

    def __post_init__(self):
        if self.t_history < 1 or self.f_future < 1 or self.k_modes < 1:
            raise ValueError("ModelConfig: t_history, f_future, k_modes must be >= 1")
        if self.n_rep < 0:
            raise ValueError("ModelConfig: n_rep must be >= 0")

    def gam(self) -> GamConfig:
        return GamConfig(d=self.d, n_heads=self.n_heads,
                         ssm_state_dim=self.ssm_state_dim,
                         ssm_expand=self.ssm_expand,
                         n_mamba_layers=self.n_mamba_layers,
                         gate_enabled=self.gate_enabled)

    @property
    def history_window(self):
        return None if self.window_w == 0 else self.window_w


def agent_feature_array(scene: Scene) -> np.ndarray:
    """[T, N, 5]: speed, velocity direction as (cos, sin), one-hot attribute.

    Zero-speed convention: direction angle 0, encoded as (1, 0).
    """
    states = scene.state_array
    t_hist, n_agents = states.shape[:2]
    out = np.zeros((t_hist, n_agents, AGENT_FEATURE_DIM))
    speed = np.hypot(states[:, :, 3], states[:, :, 4])
    moving = speed > 0
    phi = np.where(moving, np.arctan2(states[:, :, 4], states[:, :, 3]), 0.0)
    out[:, :, 0] = speed
    out[:, :, 1] = np.cos(phi)
    out[:, :, 2] = np.sin(phi)
    attr = states[:, :, 5].astype(int)
    for a in range(N_AGENT_ATTRS):
        out[:, :, 3 + a] = attr == a
    return out


def map_feature_array(scene: Scene) -> np.ndarray:
    """[N_M, 3]: segment length plus one-hot attribute."""
    out = np.zeros((len(scene.map), MAP_FEATURE_DIM))
    for m, seg in enumerate(scene.map):
        out[m, 0] = seg.length_m
        if 0 <= seg.attr < N_LANE_ATTRS:
            out[m, 1 + seg.attr] = 1.0
    return out


def edge_feature_array(graph: RelationGraph) -> np.ndarray:
    """[U, 6] encoder inputs for the graph's deduplicated edge features."""
    f = graph.feat_unique
    out = np.zeros((len(f), EDGE_FEATURE_DIM))
    if len(f):
        out[:, 0] = f[:, 0]
        out[:, 1] = np.cos(f[:, 1])
        out[:, 2] = np.sin(f[:, 1])
        out[:, 3] = np.cos(f[:, 2])
        out[:, 4] = np.sin(f[:, 2])
        out[:, 5] = f[:, 3]
    return out


@dataclass
class Prediction:
    """One forward pass: everything downstream consumers need."""

    embeddings: Tensor  # [T, N, K, D]
    proposal: Tensor  # [T, N, K, F, 2]
    refined: Tensor  # [T, N, K, F, 2]
    probs: Tensor  # [T, N, K]
    scores: Tensor  # [T, N]
    anchors: np.ndarray  # [T, N, 2]


class ScoreDecoder(Module):
    """Quality score head: state-space over time, pool modes, MLP, softplus."""

    def __init__(self, cfg: ModelConfig, rng: SplitMix64):
        self.cfg = cfg
        self.ssm = SsmBlock(cfg.gam(), rng)
        self.head = Mlp2(cfg.d, cfg.d, 1, rng)

    def __call__(self, embeddings) -> Tensor:
        """embeddings: [T, N, K, D] proposal-stage tensor -> scores [T, N]."""
        t_hist, n_agents, k_modes, d = embeddings.shape
        seq = embeddings.reshape(t_hist, n_agents * k_modes, d)
        pooled = self.ssm(seq).reshape(t_hist, n_agents, k_modes, d).mean(axis=2)
        return T.softplus(self.head(pooled).reshape(t_hist, n_agents))


class TrajectoryPredictor(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = SplitMix64(seed)
        d = cfg.d
        self.agent_encoder = Mlp2(AGENT_FEATURE_DIM, d, d, rng.spawn("agent_enc"))
        self.map_encoder = Mlp2(MAP_FEATURE_DIM, d, d, rng.spawn("map_enc"))
        self.edge_encoder = Mlp2(EDGE_FEATURE_DIM, d, d, rng.spawn("edge_enc"))
        self.mode_embeddings = Tensor(
            rng.spawn("modes").normals(cfg.k_modes * d, 0.02).reshape(cfg.k_modes, d),
            requires_grad=True)
        self.map_gat = GatBlock(d, cfg.n_heads, rng.spawn("map_gat"))
        self.gam_stack = [GamBlock(cfg.gam(), rng.spawn(f"gam{i}"))
                          for i in range(cfg.n_rep * len(STAGES))]
        self.trail_norm = LayerNorm(d)
        self.trail_ssm = SsmBlock(cfg.gam(), rng.spawn("trail"))
        self.traj_head = Mlp2(d, d, cfg.f_future * 2, rng.spawn("traj_head"))
        self.prob_head = Linear(d, 1, rng.spawn("prob_head"))
        self.endpoint_encoder = Mlp2(2, d, d, rng.spawn("endpoint_enc"))
        self.refine_stack = [GamBlock(cfg.gam(), rng.spawn(f"refine{i}"))
                             for i in range(len(STAGES))]
        self.refine_head = Mlp2(d, d, cfg.f_future * 2, rng.spawn("refine_head"))
        self.score_decoder = ScoreDecoder(cfg, rng.spawn("score"))

    # encoders

    def encode_agents(self, scene: Scene) -> Tensor:
        """[T, N, D] agent embeddings from speed/direction/attribute features."""
        return self.agent_encoder(Tensor(agent_feature_array(scene)))

    def encode_map(self, scene: Scene) -> Tensor:
        """[N_M, D] lane segment embeddings from length and attribute."""
        return self.map_encoder(Tensor(map_feature_array(scene)))

    def encode_edges(self, graph: RelationGraph) -> Tensor:
        """[Y, D] edge embeddings; distinct feature rows are encoded once."""
        if graph.n_edges == 0:
            return Tensor(np.zeros((0, self.cfg.d)))
        unique = self.edge_encoder(Tensor(edge_feature_array(graph)))
        return T.take(unique, graph.expand)

    def build_graphs(self, scene: Scene) -> SceneGraphs:
        return build_scene_graphs(scene, self.cfg.agent_radius_m,
                                  self.cfg.map_radius_m,
                                  self.cfg.history_window, self.cfg.k_modes)

    def init_proposal_embeddings(self, e_agent, e_map, map_graph,
                                 map_edge_emb) -> Tensor:
        """[T, N, K, D]: agent embedding + map context + per-mode embedding."""
        t_hist, n_agents, d = e_agent.shape
        flat = e_agent.reshape(t_hist * n_agents, d)
        ctx = self.map_gat(flat, map_graph, map_edge_emb, src_nodes=e_map)
        base = (flat + ctx).reshape(t_hist, n_agents, 1, d)
        return T.repeat(base, self.cfg.k_modes, axis=2) + self.mode_embeddings

    def backbone_forward(self, p, graphs: SceneGraphs, edge_embs: dict) -> Tensor:
        """GAM stack (n_rep repetitions) plus trailing time-axis SSM block."""
        t_hist, n_agents, k_modes, d = p.shape
        dims = (t_hist, n_agents, k_modes)
        x = p.reshape(t_hist * n_agents * k_modes, d)
        for rep in range(self.cfg.n_rep):
            for s, stage in enumerate(STAGES):
                block = self.gam_stack[rep * len(STAGES) + s]
                graph = getattr(graphs, stage)
                seq_axis = "mode" if stage == "mode" else "time"
                x = block(x, graph, edge_embs[stage], dims, seq_axis)
        seq = self.trail_norm(x).reshape(t_hist, n_agents * k_modes, d)
        x = x + self.trail_ssm(seq).reshape(t_hist * n_agents * k_modes, d)
        return x.reshape(t_hist, n_agents, k_modes, d)

    # decoders

    def decode_proposal(self, p, anchors: np.ndarray):
        """Cumulative offsets anchored at the frame-t position, plus probs."""
        t_hist, n_agents, k_modes, d = p.shape
        f_fut = self.cfg.f_future
        v = t_hist * n_agents * k_modes
        flat = p.reshape(v, d)
        offsets = self.traj_head(flat).reshape(t_hist, n_agents, k_modes, f_fut, 2)
        anchor_b = np.broadcast_to(anchors[:, :, None, None, :], offsets.shape)
        traj = T.cumsum(offsets, axis=3) + Tensor(anchor_b.copy())
        probs = T.softmax(self.prob_head(flat).reshape(t_hist, n_agents, k_modes),
                          axis=2)
        return traj, probs

    def decode_refinement(self, p, proposal, graphs: SceneGraphs,
                          edge_embs: dict, anchors: np.ndarray) -> Tensor:
        """One GAM stack over endpoint-conditioned embeddings; additive deltas."""
        t_hist, n_agents, k_modes, d = p.shape
        f_fut = self.cfg.f_future
        dims = (t_hist, n_agents, k_modes)
        v = t_hist * n_agents * k_modes
        end_off = proposal[:, :, :, f_fut - 1, :] - Tensor(
            np.broadcast_to(anchors[:, :, None, :],
                            (t_hist, n_agents, k_modes, 2)).copy())
        x = p.reshape(v, d) + self.endpoint_encoder(end_off.reshape(v, 2))
        for s, stage in enumerate(STAGES):
            graph = getattr(graphs, stage)
            seq_axis = "mode" if stage == "mode" else "time"
            x = self.refine_stack[s](x, graph, edge_embs[stage], dims, seq_axis)
        delta = self.refine_head(x).reshape(t_hist, n_agents, k_modes, f_fut, 2)
        return proposal + delta

    def forward(self, scene: Scene, graphs: SceneGraphs | None = None) -> Prediction:
        if scene.t_history != self.cfg.t_history:
            raise T.ShapeError("forward: scene history length vs model t_history",
                               (scene.t_history,), (self.cfg.t_history,))
        if graphs is None:
            graphs = self.build_graphs(scene)
        e_agent = self.encode_agents(scene)
        e_map = self.encode_map(scene)
        edge_embs = {stage: self.encode_edges(getattr(graphs, stage))
                     for stage in STAGES}
        map_edges = self.encode_edges(graphs.map)
        p0 = self.init_proposal_embeddings(e_agent, e_map, graphs.map, map_edges)
        p = self.backbone_forward(p0, graphs, edge_embs)
        anchors = scene.state_array[:, :, :2]
        proposal, probs = self.decode_proposal(p, anchors)
        refined = self.decode_refinement(p, proposal, graphs, edge_embs, anchors)
        scores = self.score_decoder(p)
        return Prediction(embeddings=p, proposal=proposal, refined=refined,
                          probs=probs, scores=scores, anchors=anchors)

    def predict_arrays(self, scene: Scene, graphs=None) -> dict:
        """Inference-only forward returning plain numpy arrays."""
        with T.no_grad():
            pred = self.forward(scene, graphs)
        return {
            "proposal": pred.proposal.data,
            "refined": pred.refined.data,
            "probs": pred.probs.data,
            "scores": pred.scores.data,
            "anchors": pred.anchors,
        }


# checkpoint persistence

CKPT_MAGIC = b"GAMD"
CKPT_VERSION = 1

_CONFIG_FIELDS = (
    "d", "n_heads", "ssm_state_dim", "ssm_expand", "n_mamba_layers",
    "gate_enabled", "score_enabled", "t_history", "f_future", "k_modes",
    "n_rep", "agent_radius_mm", "map_radius_mm", "window_w",
)


class CheckpointError(ValueError):
    pass


def _config_ints(cfg: ModelConfig):
    return [
        cfg.d, cfg.n_heads, cfg.ssm_state_dim, cfg.ssm_expand,
        cfg.n_mamba_layers, int(cfg.gate_enabled), int(cfg.score_enabled),
        cfg.t_history, cfg.f_future, cfg.k_modes, cfg.n_rep,
        round(cfg.agent_radius_m * 1000), round(cfg.map_radius_m * 1000),
        cfg.window_w,
    ]


def _config_from_ints(vals) -> ModelConfig:
    return ModelConfig(
        d=vals[0], n_heads=vals[1], ssm_state_dim=vals[2], ssm_expand=vals[3],
        n_mamba_layers=vals[4], gate_enabled=bool(vals[5]),
        score_enabled=bool(vals[6]), t_history=vals[7], f_future=vals[8],
        k_modes=vals[9], n_rep=vals[10], agent_radius_m=vals[11] / 1000.0,
        map_radius_m=vals[12] / 1000.0, window_w=vals[13])


def save_checkpoint(model: TrajectoryPredictor, path) -> None:
    """Binary checkpoint; parameters are stored as little-endian float32."""
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack(f"<{len(_CONFIG_FIELDS)}i", *_config_ints(model.cfg)))
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path) -> TrajectoryPredictor:
    """Rebuild a model from a checkpoint, rejecting malformed or alien files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = 4
    (version,) = read("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = _config_from_ints(read(f"<{len(_CONFIG_FIELDS)}i"))
    model = TrajectoryPredictor(cfg, seed=0)
    params = model.parameters()
    (count,) = read("<I")
    if count != len(params):
        raise CheckpointError(
            f"{path}: parameter count {count} does not match config ({len(params)})")
    seen = set()
    for _ in range(count):
        (name_len,) = read("<I")
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter '{name}'")
        target = params[name]
        if tuple(shape) != target.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for '{name}': {tuple(shape)} vs {target.shape}")
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = off + 4 * n_items
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for '{name}'")
        target.data[...] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape)
        off = end
        seen.add(name)
    if seen != set(params):
        raise CheckpointError(f"{path}: missing parameters")
    return model
