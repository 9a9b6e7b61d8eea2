"""Typed relation graphs over agents, map segments, history frames, and modes.

Every edge carries the features (d_e, phi_e, psi_e, delta_e): source-target
distance, edge orientation in the target's frame, relative orientation, and
frame difference. Graphs store edges in a flat (src, dst) form plus a
deduplicated feature table: edges replicated across modes share feature rows
through the `expand` index, so downstream encoders embed each distinct
feature vector once.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import Scene, wrap_angle

KIND_AGENT = "agent"
KIND_MAP = "map2agent"
KIND_HISTORICAL = "historical"
KIND_MODE = "mode"


@dataclass
class EdgeFeature:
    d_e: float
    phi_e: float
    psi_e: float
    delta_e: float

    def as_row(self):
        return (self.d_e, self.phi_e, self.psi_e, self.delta_e)


@dataclass
class RelationGraph:
    kind: str
    n_src: int
    n_dst: int
    src: np.ndarray  # int64 [Y]
    dst: np.ndarray  # int64 [Y]
    feat_unique: np.ndarray  # float64 [U, 4]
    expand: np.ndarray  # int64 [Y], row of feat_unique per edge
    src_index: dict = field(default_factory=dict)
    dst_index: dict = field(default_factory=dict)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def feat(self) -> np.ndarray:
        """Per-edge [Y, 4] feature rows."""
        return self.feat_unique[self.expand]

    def edge_feature(self, i: int) -> EdgeFeature:
        return EdgeFeature(*self.feat_unique[self.expand[i]])


def _empty_feat():
    return np.zeros((0, 4))


def pose_edge_feature(src_xy, src_theta, dst_xy, dst_theta, delta=0.0) -> EdgeFeature:
    """Edge features of src -> dst, expressed in the target's reference frame."""
    dx = src_xy[0] - dst_xy[0]
    dy = src_xy[1] - dst_xy[1]
    d = math.hypot(dx, dy)
    phi = wrap_angle(math.atan2(dy, dx) - dst_theta)
    psi = wrap_angle(src_theta - dst_theta)
    return EdgeFeature(d, phi, psi, float(delta))


def build_agent_graph(scene: Scene, t: int, radius_m: float) -> RelationGraph:
    """Directed agent-interaction edges j -> n within radius at frame t."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    states = scene.state_array[t]  # [N, 6]
    n = scene.n_agents
    pos = states[:, :2]
    diff = pos[None, :, :] - pos[:, None, :]  # [dst, src, 2]
    dist = np.linalg.norm(diff, axis=-1)
    dst_idx, src_idx = np.nonzero((dist <= radius_m) & ~np.eye(n, dtype=bool))
    feats = np.empty((len(src_idx), 4))
    for i, (j, k) in enumerate(zip(src_idx, dst_idx)):
        feats[i] = pose_edge_feature(pos[j], states[j, 2], pos[k], states[k, 2]).as_row()
    return RelationGraph(
        kind=KIND_AGENT, n_src=n, n_dst=n,
        src=src_idx.astype(np.int64), dst=dst_idx.astype(np.int64),
        feat_unique=feats if len(feats) else _empty_feat(),
        expand=np.arange(len(src_idx), dtype=np.int64),
        src_index={n_i: n_i for n_i in range(n)},
        dst_index={n_i: n_i for n_i in range(n)})


def _segment_midpoint_and_dir(seg):
    pts = np.asarray(seg.polyline)
    mid = 0.5 * (pts[0] + pts[-1])
    d = pts[-1] - pts[0]
    if np.hypot(*d) < 1e-12:
        return mid, 0.0
    return mid, math.atan2(d[1], d[0])


def build_map_graph(scene: Scene, radius_m: float) -> RelationGraph:
    """Bipartite lane -> agent-node edges; agent nodes are (t, n) pairs."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    t_hist, n_agents = scene.t_history, scene.n_agents
    states = scene.state_array
    src, dst, rows = [], [], []
    for m, seg in enumerate(scene.map):
        mid, seg_dir = _segment_midpoint_and_dir(seg)
        for t in range(t_hist):
            for n in range(n_agents):
                pos = states[t, n, :2]
                if math.hypot(mid[0] - pos[0], mid[1] - pos[1]) <= radius_m:
                    src.append(m)
                    dst.append(t * n_agents + n)
                    rows.append(pose_edge_feature(
                        mid, seg_dir, pos, states[t, n, 2]).as_row())
    y = len(src)
    return RelationGraph(
        kind=KIND_MAP, n_src=len(scene.map), n_dst=t_hist * n_agents,
        src=np.asarray(src, dtype=np.int64), dst=np.asarray(dst, dtype=np.int64),
        feat_unique=np.asarray(rows) if y else _empty_feat(),
        expand=np.arange(y, dtype=np.int64),
        src_index={("lane", m): m for m in range(len(scene.map))},
        dst_index={("agent", t, n): t * n_agents + n
                   for t in range(t_hist) for n in range(n_agents)})


def build_historical_graph(scene: Scene, window_w: int | None = None) -> RelationGraph:
    """Strictly past -> present edges (t-j, n) -> (t, n), 1 <= j <= window."""
    t_hist, n_agents = scene.t_history, scene.n_agents
    if window_w is not None and window_w < 1:
        raise ValueError("window_w must be >= 1")
    w = t_hist - 1 if window_w is None else window_w
    states = scene.state_array
    src, dst, rows = [], [], []
    for n in range(n_agents):
        for t in range(t_hist):
            for j in range(1, min(w, t) + 1):
                src.append((t - j) * n_agents + n)
                dst.append(t * n_agents + n)
                rows.append(pose_edge_feature(
                    states[t - j, n, :2], states[t - j, n, 2],
                    states[t, n, :2], states[t, n, 2], delta=j).as_row())
    y = len(src)
    return RelationGraph(
        kind=KIND_HISTORICAL, n_src=t_hist * n_agents, n_dst=t_hist * n_agents,
        src=np.asarray(src, dtype=np.int64), dst=np.asarray(dst, dtype=np.int64),
        feat_unique=np.asarray(rows) if y else _empty_feat(),
        expand=np.arange(y, dtype=np.int64),
        src_index={("agent", t, n): t * n_agents + n
                   for t in range(t_hist) for n in range(n_agents)},
        dst_index={("agent", t, n): t * n_agents + n
                   for t in range(t_hist) for n in range(n_agents)})


def build_mode_graph(k_modes: int) -> RelationGraph:
    """Complete directed graph over K mode nodes, no self-loops, zero features."""
    if k_modes < 1:
        raise ValueError("k_modes must be >= 1")
    src, dst = np.nonzero(~np.eye(k_modes, dtype=bool))
    y = len(src)
    return RelationGraph(
        kind=KIND_MODE, n_src=k_modes, n_dst=k_modes,
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        feat_unique=np.zeros((1, 4)) if y else _empty_feat(),
        expand=np.zeros(y, dtype=np.int64),
        src_index={k: k for k in range(k_modes)},
        dst_index={k: k for k in range(k_modes)})


def _expand_over_modes(kind, src_tn, dst_tn, feat_unique, expand, n_tn, k_modes):
    """Lift edges over (t, n) nodes to the flat (t, n, k) node space."""
    y0 = len(src_tn)
    ks = np.arange(k_modes, dtype=np.int64)
    src = (np.repeat(src_tn * k_modes, k_modes) + np.tile(ks, y0))
    dst = (np.repeat(dst_tn * k_modes, k_modes) + np.tile(ks, y0))
    return RelationGraph(
        kind=kind, n_src=n_tn * k_modes, n_dst=n_tn * k_modes,
        src=src, dst=dst,
        feat_unique=feat_unique,
        expand=np.repeat(expand, k_modes))


def flat_node_id(t: int, n: int, k: int, n_agents: int, k_modes: int) -> int:
    return (t * n_agents + n) * k_modes + k


def agent_graph_over_modes(scene: Scene, radius_m: float, k_modes: int) -> RelationGraph:
    """Per-frame agent graphs replicated across modes, over (t, n, k) nodes."""
    n_agents, t_hist = scene.n_agents, scene.t_history
    src, dst, feats = [], [], []
    offset = 0
    for t in range(t_hist):
        g = build_agent_graph(scene, t, radius_m)
        src.append(t * n_agents + g.src)
        dst.append(t * n_agents + g.dst)
        feats.append(g.feat_unique)
        offset += g.n_edges
    src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
    feats = np.concatenate(feats) if feats else _empty_feat()
    graph = _expand_over_modes(KIND_AGENT, src, dst, feats,
                               np.arange(len(src), dtype=np.int64),
                               t_hist * n_agents, k_modes)
    graph.dst_index = {("agent", t, n, k): flat_node_id(t, n, k, n_agents, k_modes)
                       for t in range(t_hist) for n in range(n_agents)
                       for k in range(k_modes)}
    graph.src_index = graph.dst_index
    return graph


def historical_graph_over_modes(scene: Scene, window_w, k_modes: int) -> RelationGraph:
    base = build_historical_graph(scene, window_w)
    graph = _expand_over_modes(KIND_HISTORICAL, base.src, base.dst,
                               base.feat_unique, base.expand,
                               base.n_dst, k_modes)
    return graph


def mode_graph_over_scene(t_hist: int, n_agents: int, k_modes: int) -> RelationGraph:
    """A complete K-mode clique instanced at every (t, n)."""
    base = build_mode_graph(k_modes)
    n_tn = t_hist * n_agents
    groups = np.arange(n_tn, dtype=np.int64) * k_modes
    src = (groups[:, None] + base.src[None, :]).reshape(-1)
    dst = (groups[:, None] + base.dst[None, :]).reshape(-1)
    return RelationGraph(
        kind=KIND_MODE, n_src=n_tn * k_modes, n_dst=n_tn * k_modes,
        src=src, dst=dst,
        feat_unique=base.feat_unique,
        expand=np.zeros(len(src), dtype=np.int64))


@dataclass
class SceneGraphs:
    """The relation graphs one forward pass needs, built once per scene."""

    agent: RelationGraph
    historical: RelationGraph
    mode: RelationGraph
    map: RelationGraph


def build_scene_graphs(scene: Scene, agent_radius_m: float, map_radius_m: float,
                       window_w, k_modes: int) -> SceneGraphs:
    return SceneGraphs(
        agent=agent_graph_over_modes(scene, agent_radius_m, k_modes),
        historical=historical_graph_over_modes(scene, window_w, k_modes),
        mode=mode_graph_over_scene(scene.t_history, scene.n_agents, k_modes),
        map=build_map_graph(scene, map_radius_m))
