"""Scene data model, JSON persistence, and the synthetic scene generator.

A scene holds N agents observed over T history frames at a fixed 0.1 s
period, a vectorized map of lane segments, and (for labeled scenes) the
F-step future ground truth per agent. The generator drives agents along
straight or constant-curvature lanes at a sampled constant speed, adds
Gaussian noise to the observed history positions, and keeps the future
continuation noise-free.
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .rng import SplitMix64

FRAME_PERIOD_S = 0.1
SCENE_FORMAT_VERSION = 1

AGENT_ATTR_VEHICLE = 0
AGENT_ATTR_PEDESTRIAN = 1
LANE_ATTR_STRAIGHT = 0
LANE_ATTR_CURVED = 1


class SceneFormatError(ValueError):
    """Malformed scene file; the message names the offending key or value."""


def wrap_angle(x: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    w = (x + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if w == -math.pi else w


@dataclass
class AgentState:
    """Kinematic record of one agent at one frame."""

    px: float
    py: float
    theta: float
    vx: float
    vy: float
    attr: int


@dataclass
class LaneSegment:
    polyline: tuple  # ((x, y), ...), at least two points
    attr: int
    length_m: float = 0.0

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise ValueError("LaneSegment: polyline needs at least 2 points")
        pts = np.asarray(self.polyline, dtype=np.float64)
        self.length_m = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass(eq=False)
class Scene:
    """N agents x T frames plus map; future_gt present iff the scene is labeled."""

    ids: list
    agents: list  # N lists of T AgentState
    map: list  # LaneSegment
    future_gt: list | None = None  # N lists of F (x, y)
    frame_period_s: float = FRAME_PERIOD_S

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def t_history(self) -> int:
        return len(self.agents[0])

    @property
    def f_future(self) -> int:
        return 0 if self.future_gt is None else len(self.future_gt[0])

    @property
    def labeled(self) -> bool:
        return self.future_gt is not None

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.ids == other.ids and self.agents == other.agents
                and self.map == other.map and self.future_gt == other.future_gt
                and self.frame_period_s == other.frame_period_s)

    @cached_property
    def state_array(self) -> np.ndarray:
        """[T, N, 6] array of (px, py, theta, vx, vy, attr)."""
        arr = np.empty((self.t_history, self.n_agents, 6))
        for n, track in enumerate(self.agents):
            for t, s in enumerate(track):
                arr[t, n] = (s.px, s.py, s.theta, s.vx, s.vy, s.attr)
        return arr

    @cached_property
    def future_array(self) -> np.ndarray:
        """[N, F, 2] ground-truth future positions."""
        if self.future_gt is None:
            raise ValueError("scene is unlabeled")
        return np.asarray(self.future_gt, dtype=np.float64)

    @cached_property
    def target_array(self) -> np.ndarray:
        """[T, N, F, 2] per-frame targets: positions at frames t+1 .. t+F.

        For a prediction made at history frame t the first targets are later
        observed history frames and the remainder comes from future_gt.
        """
        t_hist, n_agents, f_fut = self.t_history, self.n_agents, self.f_future
        track = np.concatenate(
            [self.state_array[:, :, :2], self.future_array.transpose(1, 0, 2)], axis=0)
        out = np.empty((t_hist, n_agents, f_fut, 2))
        for t in range(t_hist):
            out[t] = track[t + 1:t + 1 + f_fut].transpose(1, 0, 2)
        return out


@dataclass
class GeneratorParams:
    n_agents: int = 4
    t_history: int = 20
    f_future: int = 30
    n_lanes: int = 4
    speed_range: tuple = (2.0, 10.0)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("n_agents", "t_history", "f_future", "n_lanes"):
            if getattr(self, name) < 1:
                raise ValueError(f"GeneratorParams.{name} must be positive")
        lo, hi = self.speed_range
        if not (0.0 <= lo <= hi):
            raise ValueError(f"GeneratorParams.speed_range invalid: {self.speed_range}")
        if self.noise_std < 0:
            raise ValueError("GeneratorParams.noise_std must be >= 0")


class _Lane:
    """Analytic straight or arc centerline, parameterized by arclength s >= 0."""

    def __init__(self, start, heading, length, curvature=0.0):
        self.start = np.asarray(start, dtype=np.float64)
        self.heading = heading
        self.length = length
        self.curvature = curvature  # signed 1/radius; 0 means straight

    def point(self, s: float) -> np.ndarray:
        if self.curvature == 0.0:
            d = np.array([math.cos(self.heading), math.sin(self.heading)])
            return self.start + s * d
        r = 1.0 / self.curvature
        # center sits at distance |r| normal to the initial heading
        cx = self.start[0] - r * math.sin(self.heading)
        cy = self.start[1] + r * math.cos(self.heading)
        a = self.heading - math.copysign(math.pi / 2, r) + s * self.curvature
        return np.array([cx + abs(r) * math.cos(a), cy + abs(r) * math.sin(a)])

    def tangent(self, s: float) -> float:
        return wrap_angle(self.heading + s * self.curvature)

    def polyline(self, spacing=3.0):
        n_pts = max(2, int(math.ceil(self.length / spacing)) + 1)
        ss = np.linspace(0.0, self.length, n_pts)
        return tuple((float(p[0]), float(p[1])) for p in (self.point(s) for s in ss))


def generate_scene(params: GeneratorParams) -> Scene:
    """Deterministic synthetic scene: lane-following agents at constant speed."""
    rng = SplitMix64(params.seed)
    dt = FRAME_PERIOD_S
    horizon = (params.t_history + params.f_future) * dt * params.speed_range[1]

    lanes = []
    for _ in range(params.n_lanes):
        anchor = np.array([rng.uniform(-12.0, 12.0), rng.uniform(-12.0, 12.0)])
        heading = rng.uniform(-math.pi, math.pi)
        curved = rng.uniform() < 0.5
        curvature = 0.0
        if curved:
            radius = rng.uniform(30.0, 80.0)
            curvature = (1.0 if rng.uniform() < 0.5 else -1.0) / radius
        length = horizon + 30.0
        start = anchor - 15.0 * np.array([math.cos(heading), math.sin(heading)])
        # keep the start heading consistent with the arc through the anchor
        lanes.append(_Lane(start, heading, length, curvature))

    segments = [LaneSegment(lane.polyline(),
                            LANE_ATTR_CURVED if lane.curvature else LANE_ATTR_STRAIGHT)
                for lane in lanes]

    ids = list(range(params.n_agents))
    agents = []
    future = []
    for n in range(params.n_agents):
        lane = lanes[n % params.n_lanes]
        s0 = 15.0 + rng.uniform(-5.0, 5.0)
        speed = rng.uniform(*params.speed_range)
        attr = AGENT_ATTR_PEDESTRIAN if rng.uniform() < 0.2 else AGENT_ATTR_VEHICLE
        noise = rng.normals(2 * params.t_history, params.noise_std)
        track = []
        for t in range(params.t_history):
            s = s0 + speed * dt * t
            pos = lane.point(s)
            psi = lane.tangent(s)
            track.append(AgentState(
                px=float(pos[0] + noise[2 * t]),
                py=float(pos[1] + noise[2 * t + 1]),
                theta=psi,
                vx=speed * math.cos(psi),
                vy=speed * math.sin(psi),
                attr=attr))
        agents.append(track)
        future.append([
            (float(p[0]), float(p[1]))
            for p in (lane.point(s0 + speed * dt * (params.t_history + j))
                      for j in range(params.f_future))])

    return Scene(ids=ids, agents=agents, map=segments, future_gt=future)


# JSON persistence

_TOP_KEYS = {"version", "frame_period_s", "agents", "map", "future_gt"}


def scene_to_dict(scene: Scene) -> dict:
    out = {
        "version": SCENE_FORMAT_VERSION,
        "frame_period_s": scene.frame_period_s,
        "agents": [
            {"id": aid,
             "states": [[s.px, s.py, s.theta, s.vx, s.vy, s.attr] for s in track]}
            for aid, track in zip(scene.ids, scene.agents)
        ],
        "map": [{"polyline": [[x, y] for x, y in seg.polyline], "attr": seg.attr}
                for seg in scene.map],
    }
    if scene.future_gt is not None:
        out["future_gt"] = [[[x, y] for x, y in track] for track in scene.future_gt]
    return out


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SceneFormatError(f"{where}: missing key '{key}'")
    return obj[key]


def _reject_unknown(obj: dict, allowed: set, where: str):
    extra = set(obj) - allowed
    if extra:
        raise SceneFormatError(f"{where}: unknown key '{sorted(extra)[0]}'")


def _check_finite(value: float, where: str) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise SceneFormatError(f"{where}: non-finite value")
    return v


def scene_from_dict(doc: dict) -> Scene:
    if not isinstance(doc, dict):
        raise SceneFormatError("top-level: expected a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "top-level")
    version = _require(doc, "version", "top-level")
    if version != SCENE_FORMAT_VERSION:
        raise SceneFormatError(f"top-level: unsupported version {version!r}")
    period = _check_finite(_require(doc, "frame_period_s", "top-level"),
                           "frame_period_s")
    if period <= 0:
        raise SceneFormatError("frame_period_s: must be positive")

    raw_agents = _require(doc, "agents", "top-level")
    if not isinstance(raw_agents, list) or not raw_agents:
        raise SceneFormatError("agents: expected a non-empty array")
    ids, agents = [], []
    t_len = None
    for i, entry in enumerate(raw_agents):
        where = f"agents[{i}]"
        if not isinstance(entry, dict):
            raise SceneFormatError(f"{where}: expected an object")
        _reject_unknown(entry, {"id", "states"}, where)
        ids.append(_require(entry, "id", where))
        states = _require(entry, "states", where)
        if not isinstance(states, list) or not states:
            raise SceneFormatError(f"{where}.states: expected a non-empty array")
        if t_len is None:
            t_len = len(states)
        elif len(states) != t_len:
            raise SceneFormatError(f"{where}.states: expected {t_len} frames, got {len(states)}")
        track = []
        for t, row in enumerate(states):
            cell = f"{where}.states[{t}]"
            if not isinstance(row, list) or len(row) != 6:
                raise SceneFormatError(f"{cell}: expected 6 values")
            vals = [_check_finite(v, cell) for v in row]
            if not (-math.pi < vals[2] <= math.pi):
                raise SceneFormatError(f"{cell}: theta outside (-pi, pi]")
            if vals[5] != int(vals[5]) or vals[5] < 0:
                raise SceneFormatError(f"{cell}: attr must be a small non-negative integer")
            track.append(AgentState(vals[0], vals[1], vals[2], vals[3], vals[4],
                                    int(vals[5])))
        agents.append(track)

    raw_map = _require(doc, "map", "top-level")
    if not isinstance(raw_map, list):
        raise SceneFormatError("map: expected an array")
    segments = []
    for i, entry in enumerate(raw_map):
        where = f"map[{i}]"
        if not isinstance(entry, dict):
            raise SceneFormatError(f"{where}: expected an object")
        _reject_unknown(entry, {"polyline", "attr"}, where)
        poly = _require(entry, "polyline", where)
        if not isinstance(poly, list) or len(poly) < 2:
            raise SceneFormatError(f"{where}.polyline: expected at least 2 points")
        pts = []
        for j, pt in enumerate(poly):
            if not isinstance(pt, list) or len(pt) != 2:
                raise SceneFormatError(f"{where}.polyline[{j}]: expected [x, y]")
            pts.append((_check_finite(pt[0], where), _check_finite(pt[1], where)))
        attr = _require(entry, "attr", where)
        if not isinstance(attr, int) or attr < 0:
            raise SceneFormatError(f"{where}.attr: must be a small non-negative integer")
        segments.append(LaneSegment(tuple(pts), attr))

    future = None
    if "future_gt" in doc:
        raw_future = doc["future_gt"]
        if not isinstance(raw_future, list) or len(raw_future) != len(agents):
            raise SceneFormatError("future_gt: expected one trajectory per agent")
        future = []
        f_len = None
        for i, track in enumerate(raw_future):
            where = f"future_gt[{i}]"
            if not isinstance(track, list) or not track:
                raise SceneFormatError(f"{where}: expected a non-empty array")
            if f_len is None:
                f_len = len(track)
            elif len(track) != f_len:
                raise SceneFormatError(f"{where}: expected {f_len} steps, got {len(track)}")
            pts = []
            for j, pt in enumerate(track):
                if not isinstance(pt, list) or len(pt) != 2:
                    raise SceneFormatError(f"{where}[{j}]: expected [x, y]")
                pts.append((_check_finite(pt[0], where), _check_finite(pt[1], where)))
            future.append(pts)

    return Scene(ids=ids, agents=agents, map=segments, future_gt=future,
                 frame_period_s=period)


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh)


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return scene_from_dict(doc)
