"""Scenario data model, synthetic scenario generator and JSON-lines scenario files.

Positions are meters in a scene frame centered on the intersection (or on the
corridor midpoint); the ego vehicle sits at the origin facing +y.  Steps are
1-based: history covers ``[1, t0]`` and the future ``[t0 + 1, T]``.  Camera frames
may carry steps <= 0 when the generator records a camera pre-roll before the
track window, which the latency ablation consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

SCHEMA_VERSION = 1

# float formatting for scenario files: 9 significant digits survives the round trip
_SIG = 9


class ConfigError(ValueError):
    pass


class ScenarioParseError(ValueError):
    def __init__(self, line: int, field_name: str, message: str):
        super().__init__(f"line {line}: field {field_name!r}: {message}")
        self.line = line
        self.field = field_name


class AgentCategory(str, Enum):
    VEHICLE = "VEHICLE"
    PEDESTRIAN = "PEDESTRIAN"
    OTHER = "OTHER"


class MapKind(str, Enum):
    LANE = "LANE"
    ROAD_BOUNDARY = "ROAD_BOUNDARY"
    CROSSWALK = "CROSSWALK"


class LightState(str, Enum):
    RED = "RED"
    YELLOW = "YELLOW"
    GREEN = "GREEN"
    UNKNOWN = "UNKNOWN"


class Camera(str, Enum):
    FRONT = "FRONT"
    FRONT_LEFT = "FRONT_LEFT"
    SIDE_LEFT = "SIDE_LEFT"
    REAR_LEFT = "REAR_LEFT"
    REAR = "REAR"
    REAR_RIGHT = "REAR_RIGHT"
    SIDE_RIGHT = "SIDE_RIGHT"
    FRONT_RIGHT = "FRONT_RIGHT"


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)


@dataclass(frozen=True)
class AgentState:
    agent_id: str
    category: AgentCategory
    position: tuple[float, float]
    velocity: tuple[float, float]
    heading: float
    valid: bool
    step: int


@dataclass
class AgentTrack:
    """Time-indexed states of one agent, stored column-wise.

    Indexing by step returns an :class:`AgentState`.
    """

    agent_id: str
    category: AgentCategory
    steps: np.ndarray  # (n,) int
    position: np.ndarray  # (n, 2)
    velocity: np.ndarray  # (n, 2)
    heading: np.ndarray  # (n,)
    valid: np.ndarray  # (n,) bool

    def __post_init__(self):
        self.category = AgentCategory(self.category)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1, 2)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(-1, 2)
        self.heading = np.asarray(self.heading, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)

    def validate(self) -> None:
        n = len(self.steps)
        for name in ("position", "velocity", "heading", "valid"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"agent {self.agent_id}: {name} length {len(getattr(self, name))} != {n}")
        if n and np.any(np.diff(self.steps) <= 0):
            raise ValueError(f"agent {self.agent_id}: steps not strictly increasing")
        if not np.all(np.isfinite(self.position)) or not np.all(np.isfinite(self.velocity)):
            raise ValueError(f"agent {self.agent_id}: non-finite position or velocity")
        h = self.heading
        if not np.all(np.isfinite(h)) or np.any(h <= -np.pi) or np.any(h > np.pi):
            raise ValueError(f"agent {self.agent_id}: heading outside (-pi, pi]")

    def index_of(self, step: int) -> int:
        i = int(np.searchsorted(self.steps, step))
        if i >= len(self.steps) or self.steps[i] != step:
            raise KeyError(step)
        return i

    def __getitem__(self, step: int) -> AgentState:
        i = self.index_of(step)
        return AgentState(
            self.agent_id,
            self.category,
            (float(self.position[i, 0]), float(self.position[i, 1])),
            (float(self.velocity[i, 0]), float(self.velocity[i, 1])),
            float(self.heading[i]),
            bool(self.valid[i]),
            int(self.steps[i]),
        )

    def __iter__(self) -> Iterator[AgentState]:
        for s in self.steps:
            yield self[int(s)]

    def __len__(self):
        return len(self.steps)

    def window(self, first: int, last: int) -> "AgentTrack":
        sel = (self.steps >= first) & (self.steps <= last)
        return AgentTrack(
            self.agent_id,
            self.category,
            self.steps[sel],
            self.position[sel],
            self.velocity[sel],
            self.heading[sel],
            self.valid[sel],
        )


@dataclass(frozen=True)
class MapElement:
    element_id: str
    kind: MapKind
    polyline: tuple[tuple[float, float], ...]

    def validate(self) -> None:
        pts = np.asarray(self.polyline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError(f"map element {self.element_id}: polyline needs >= 2 (x, y) points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ValueError(f"map element {self.element_id}: repeated consecutive points")


@dataclass(frozen=True)
class TrafficLightState:
    element_id: str
    step: int
    state: LightState


@dataclass(frozen=True)
class VisibleAgent:
    agent_id: str
    occlusion_fraction: float
    range: float


@dataclass(frozen=True)
class SensorFrameRef:
    step: int
    camera: Camera
    uri: str
    visible_agents: tuple[VisibleAgent, ...] = ()

    def validate(self) -> None:
        for v in self.visible_agents:
            if not 0.0 <= v.occlusion_fraction <= 1.0:
                raise ValueError(f"frame {self.uri}: occlusion_fraction {v.occlusion_fraction} outside [0, 1]")
            if not v.range > 0.0:
                raise ValueError(f"frame {self.uri}: range must be > 0")


@dataclass
class Scenario:
    scenario_id: str
    history_len: int
    horizon: int
    step_hz: float
    agents: dict[str, AgentTrack]
    map_elements: list[MapElement] = field(default_factory=list)
    traffic_lights: list[TrafficLightState] = field(default_factory=list)
    sensor_frames: list[SensorFrameRef] = field(default_factory=list)
    # latent labels; read only by the generator and the mock oracle
    ground_truth_intent: dict[str, dict] | None = None
    scene_truth: dict[str, str] | None = None

    @property
    def t0(self) -> int:
        return self.history_len

    @property
    def future_len(self) -> int:
        return self.horizon - self.history_len

    def agent_ids(self) -> list[str]:
        return sorted(self.agents)

    def frames_at(self, step: int) -> list[SensorFrameRef]:
        return [f for f in self.sensor_frames if f.step == step]

    def frame_steps(self) -> list[int]:
        return sorted({f.step for f in self.sensor_frames})

    def validate(self, require_future: bool = True) -> None:
        if self.history_len < 1:
            raise ValueError("history_len (t0) must be >= 1")
        if self.horizon <= self.history_len:
            raise ValueError("horizon T must exceed t0")
        if not self.step_hz > 0:
            raise ValueError("step_hz must be positive")
        for aid, track in self.agents.items():
            if aid != track.agent_id:
                raise ValueError(f"agent key {aid!r} != track id {track.agent_id!r}")
            track.validate()
            need = range(1, (self.horizon if require_future else self.history_len) + 1)
            have = set(track.steps.tolist())
            missing = [s for s in need if s not in have]
            if missing:
                raise ValueError(f"agent {aid}: missing steps starting at {missing[0]}")
        for m in self.map_elements:
            m.validate()
        seen = set()
        for tl in self.traffic_lights:
            key = (tl.element_id, tl.step)
            if key in seen:
                raise ValueError(f"duplicate traffic light state for {key}")
            seen.add(key)
        for f in self.sensor_frames:
            f.validate()


# ---------------------------------------------------------------------------
# serialization


def _r(v: float) -> float:
    return float(f"{float(v):.{_SIG}g}")


def _rl(a) -> list:
    return [_r(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def scenario_to_dict(sc: Scenario) -> dict:
    agents = []
    for aid in sc.agent_ids():
        tr = sc.agents[aid]
        agents.append(
            {
                "agent_id": aid,
                "category": tr.category.value,
                "states": [
                    {
                        "step": int(tr.steps[i]),
                        "position": _rl(tr.position[i]),
                        "velocity": _rl(tr.velocity[i]),
                        "heading": _r(tr.heading[i]),
                        "valid": bool(tr.valid[i]),
                    }
                    for i in range(len(tr.steps))
                ],
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario_id": sc.scenario_id,
        "history_len": sc.history_len,
        "horizon": sc.horizon,
        "step_hz": _r(sc.step_hz),
        "agents": agents,
        "map_elements": [
            {"element_id": m.element_id, "kind": m.kind.value, "polyline": [_rl(p) for p in m.polyline]}
            for m in sc.map_elements
        ],
        "traffic_lights": [
            {"element_id": t.element_id, "step": t.step, "state": t.state.value} for t in sc.traffic_lights
        ],
        "sensor_frames": [
            {
                "step": f.step,
                "camera": f.camera.value,
                "uri": f.uri,
                "visible_agents": [
                    {"agent_id": v.agent_id, "occlusion_fraction": _r(v.occlusion_fraction), "range": _r(v.range)}
                    for v in f.visible_agents
                ],
            }
            for f in sc.sensor_frames
        ],
        "ground_truth_intent": _round_nested(sc.ground_truth_intent),
        "scene_truth": sc.scene_truth,
    }


def _round_nested(obj):
    if isinstance(obj, float):
        return _r(obj)
    if isinstance(obj, dict):
        return {k: _round_nested(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_nested(v) for v in obj]
    return obj


def _req(d: dict, key: str, line: int, where: str = ""):
    if not isinstance(d, dict) or key not in d:
        raise ScenarioParseError(line, f"{where}{key}", "missing")
    return d[key]


def scenario_from_dict(d: dict, line: int = 0) -> Scenario:
    version = _req(d, "schema_version", line)
    if version != SCHEMA_VERSION:
        raise ScenarioParseError(line, "schema_version", f"unsupported version {version!r}")
    try:
        agents = {}
        for a in _req(d, "agents", line):
            aid = str(_req(a, "agent_id", line, "agents."))
            where = f"agents[{aid}]."
            states = _req(a, "states", line, where)
            cols = {k: [] for k in ("step", "position", "velocity", "heading", "valid")}
            for s in states:
                for k in cols:
                    cols[k].append(_req(s, k, line, where + "states."))
            agents[aid] = AgentTrack(
                aid,
                AgentCategory(_req(a, "category", line, where)),
                np.asarray(cols["step"], dtype=np.int64),
                np.asarray(cols["position"], dtype=np.float64).reshape(-1, 2),
                np.asarray(cols["velocity"], dtype=np.float64).reshape(-1, 2),
                np.asarray(cols["heading"], dtype=np.float64),
                np.asarray(cols["valid"], dtype=bool),
            )
        maps = [
            MapElement(
                str(_req(m, "element_id", line, "map_elements.")),
                MapKind(_req(m, "kind", line, "map_elements.")),
                tuple(tuple(float(c) for c in p) for p in _req(m, "polyline", line, "map_elements.")),
            )
            for m in d.get("map_elements", [])
        ]
        lights = [
            TrafficLightState(
                str(_req(t, "element_id", line, "traffic_lights.")),
                int(_req(t, "step", line, "traffic_lights.")),
                LightState(_req(t, "state", line, "traffic_lights.")),
            )
            for t in d.get("traffic_lights", [])
        ]
        frames = [
            SensorFrameRef(
                int(_req(f, "step", line, "sensor_frames.")),
                Camera(_req(f, "camera", line, "sensor_frames.")),
                str(_req(f, "uri", line, "sensor_frames.")),
                tuple(
                    VisibleAgent(
                        str(_req(v, "agent_id", line, "visible_agents.")),
                        float(_req(v, "occlusion_fraction", line, "visible_agents.")),
                        float(_req(v, "range", line, "visible_agents.")),
                    )
                    for v in f.get("visible_agents", [])
                ),
            )
            for f in d.get("sensor_frames", [])
        ]
        sc = Scenario(
            scenario_id=str(_req(d, "scenario_id", line)),
            history_len=int(_req(d, "history_len", line)),
            horizon=int(_req(d, "horizon", line)),
            step_hz=float(_req(d, "step_hz", line)),
            agents=agents,
            map_elements=maps,
            traffic_lights=lights,
            sensor_frames=frames,
            ground_truth_intent=d.get("ground_truth_intent"),
            scene_truth=d.get("scene_truth"),
        )
    except ScenarioParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(line, "record", str(exc)) from exc
    try:
        sc.validate(require_future=False)
    except ValueError as exc:
        raise ScenarioParseError(line, "record", str(exc)) from exc
    return sc


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), separators=(",", ":"), allow_nan=False)


def save_scenarios(scenarios: Iterable[Scenario], path: str | Path, meta: dict | None = None) -> None:
    """One scenario per line, optionally preceded by a ``{"_meta": ...}`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for sc in scenarios:
            fh.write(dumps_scenario(sc))
            fh.write("\n")


def load_scenarios(path: str | Path) -> list[Scenario]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ScenarioParseError(lineno, "json", exc.msg) from exc
            if isinstance(d, dict) and "_meta" in d:
                continue
            out.append(scenario_from_dict(d, line=lineno))
    return out


# ---------------------------------------------------------------------------
# synthetic generation

FAMILIES = ("ambiguous_turn", "stop_or_go", "parked_vehicle", "jaywalking_pedestrian")
FAMILY_INTENTS = {
    "ambiguous_turn": ("straight", "turn"),
    "stop_or_go": ("go", "stop"),
    "parked_vehicle": ("parked",),
    "jaywalking_pedestrian": ("walk_sidewalk", "jaywalk"),
}
FAMILY_CATEGORY = {
    "ambiguous_turn": AgentCategory.VEHICLE,
    "stop_or_go": AgentCategory.VEHICLE,
    "parked_vehicle": AgentCategory.VEHICLE,
    "jaywalking_pedestrian": AgentCategory.PEDESTRIAN,
}

PROFILES = {
    # name: (step_hz, history steps t0, future steps)
    "womd": (10.0, 10, 80),
    "nusc": (2.0, 4, 12),
}

LANE_W = 3.5
BOX = 8.0  # half-size of the intersection box
ROAD_HALF = 2 * LANE_W
ARM_LEN = 90.0


@dataclass
class GeneratorConfig:
    n_scenarios: int = 100
    agents_min: int = 2
    agents_max: int = 4
    family_mix: dict[str, float] = field(
        default_factory=lambda: {
            "ambiguous_turn": 0.4,
            "stop_or_go": 0.2,
            "parked_vehicle": 0.15,
            "jaywalking_pedestrian": 0.25,
        }
    )
    profile: str = "womd"
    # P(turn) within ambiguous_turn, P(stop) within stop_or_go, P(jaywalk) for pedestrians
    turn_fraction: float = 0.5
    stop_fraction: float = 0.5
    jaywalk_fraction: float = 0.5
    position_noise: float = 0.05
    p_heavy_occlusion: float = 0.08
    p_missing_history: float = 0.1
    p_invalid_agent: float = 0.0
    p_corridor: float = 0.3
    # intent cue becomes visible this many seconds before t0 (negative: only after t0)
    onset_range_s: tuple[float, float] = (-0.3, 2.7)
    frame_interval_s: float = 0.5
    pre_roll_s: float = 3.0

    def validate(self) -> None:
        if self.n_scenarios < 0:
            raise ConfigError("n_scenarios must be >= 0")
        if self.agents_min < 1 or self.agents_max < self.agents_min:
            raise ConfigError("need 1 <= agents_min <= agents_max")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        hz, t0, fut = PROFILES[self.profile]
        if t0 < 1 or fut < 1:
            raise ConfigError("profile needs t0 >= 1 and T > t0")
        unknown = set(self.family_mix) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown families {sorted(unknown)}")
        weights = [w for w in self.family_mix.values()]
        if not weights or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError("family_mix needs non-negative weights with positive sum")
        for name in ("turn_fraction", "stop_fraction", "jaywalk_fraction", "p_heavy_occlusion",
                     "p_missing_history", "p_invalid_agent", "p_corridor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "onset_range_s" in d:
            d["onset_range_s"] = tuple(d["onset_range_s"])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown generator config keys {sorted(extra)}")
        return cls(**d)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _arc(center, radius, a0, a1, n=24) -> np.ndarray:
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def _dedupe(path: np.ndarray) -> np.ndarray:
    keep = np.ones(len(path), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(path, axis=0), axis=1) > 1e-9
    return path[keep]


class _Path:
    """Arc-length parameterized polyline with straight extrapolation at both ends."""

    def __init__(self, pts: np.ndarray):
        self.pts = _dedupe(np.asarray(pts, dtype=np.float64))
        seg = np.diff(self.pts, axis=0)
        self.seglen = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(self.seglen)])
        self.dirs = seg / self.seglen[:, None]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def at(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=np.float64)
        idx = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seglen) - 1)
        pos = self.pts[idx] + (s - self.cum[idx])[:, None] * self.dirs[idx]
        return pos, self.dirs[idx]


def _intersection_map(corridor: bool) -> list[MapElement]:
    els: list[MapElement] = []
    arms = [0] if corridor else [0, 1, 2, 3]
    for a in arms:
        R = _rot(a * math.pi / 2)
        # canonical arm: south of the box, incoming traffic heads +y
        y0, y1 = (-ARM_LEN, ARM_LEN) if corridor else (-ARM_LEN, -BOX)
        lines = {
            "in_inner": [(LANE_W / 2, y0), (LANE_W / 2, y1)],
            "in_outer": [(1.5 * LANE_W, y0), (1.5 * LANE_W, y1)],
            "out_inner": [(-LANE_W / 2, y1), (-LANE_W / 2, y0)],
            "out_outer": [(-1.5 * LANE_W, y1), (-1.5 * LANE_W, y0)],
        }
        for name, pts in lines.items():
            p = np.asarray(pts) @ R.T
            els.append(MapElement(f"arm{a}_{name}", MapKind.LANE, tuple(map(tuple, p.round(6)))))
        for side, x in (("right", ROAD_HALF), ("left", -ROAD_HALF)):
            p = np.asarray([(x, y0), (x, y1)]) @ R.T
            els.append(MapElement(f"arm{a}_boundary_{side}", MapKind.ROAD_BOUNDARY, tuple(map(tuple, p.round(6)))))
        cw_y = -BOX - 2.0 if not corridor else -12.0
        p = np.asarray([(-ROAD_HALF, cw_y), (ROAD_HALF, cw_y)]) @ R.T
        els.append(MapElement(f"arm{a}_crosswalk", MapKind.CROSSWALK, tuple(map(tuple, p.round(6)))))
    return els


def _sample_family(rng: np.random.Generator, mix: dict[str, float], corridor: bool) -> str:
    names = [f for f in FAMILIES if mix.get(f, 0) > 0 and not (corridor and f == "ambiguous_turn")]
    w = np.array([mix[f] for f in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def _bad_weather(scene: dict) -> bool:
    return scene["weather"] in ("RAINY", "SNOWY", "FOGGY")


def _sample_scene(rng, corridor: bool) -> dict:
    weather = str(rng.choice(["SUNNY", "RAINY", "SNOWY", "FOGGY", "DARK"], p=[0.5, 0.2, 0.05, 0.1, 0.15]))
    if weather == "DARK":
        tod = "NIGHT"
    else:
        tod = str(rng.choice(["DAY", "EVENING", "NIGHT"], p=[0.65, 0.2, 0.15]))
    road = str(rng.choice(["RESIDENTIAL", "SERVICE", "OTHER"], p=[0.6, 0.25, 0.15]))
    return {
        "weather": weather,
        "time_of_day": tod,
        "road_type": road,
        "intersection": "NO" if corridor else "YES",
    }


def _agent_motion(family: str, intent: str, rng, scene: dict, hz: float, t0: int, T: int):
    """Canonical-frame path and per-step arc length for one agent (arm 0 frame).

    Returns (path, s) with s covering steps 1..T, or a stationary pose.
    """
    steps = np.arange(1, T + 1)
    tf = (steps - t0) / hz  # seconds relative to t0; negative in the history
    slow = 0.85 if _bad_weather(scene) else 1.0
    info: dict = {}
    if family == "ambiguous_turn":
        lane = str(rng.choice(["inner", "outer"]))
        info["turn_side"] = "left" if lane == "inner" else "right"
        x = LANE_W / 2 if lane == "inner" else 1.5 * LANE_W
        d0 = rng.uniform(6.0, 22.0)
        v0 = rng.uniform(8.0, 11.0)
        approach = [(x, -BOX - d0 - 40.0), (x, -BOX)]
        if intent == "turn":
            if lane == "inner":
                r = x + BOX
                arc = _arc((x - r, -BOX), r, 0.0, math.pi / 2)
                exit_ = [(-BOX - 80.0, -BOX + r)]
            else:
                r = BOX - x
                arc = _arc((x + r, -BOX), r, math.pi, math.pi / 2)
                exit_ = [(BOX + 80.0, -BOX + r)]
            pts = np.vstack([approach, arc, exit_])
            v_turn = (6.0 if lane == "inner" else 4.5) * slow
            decel = 2.5
        else:
            pts = np.vstack([approach, [(x, BOX + 120.0)]])
        path = _Path(pts)
        s0 = 40.0  # the approach starts 40 m before the t0 position
        tt = np.maximum(tf, 0.0)
        if intent == "turn":
            v = np.where(tf <= 0, v0, np.maximum(v_turn, v0 - decel * tt))
        else:
            v = np.where(tf <= 0, v0, v0 + (v0 * slow - v0) * np.minimum(tt / 2.0, 1.0))
        s = s0 + _integrate(v, tf, hz, t0)
        info.update(v0=float(v0), d0=float(d0))
        return path, s, info
    if family == "stop_or_go":
        x = float(rng.choice([LANE_W / 2, 1.5 * LANE_W]))
        d0 = rng.uniform(15.0, 32.0)
        v0 = rng.uniform(7.0, 11.0)
        stop_y = -BOX - 3.0
        pts = np.array([(x, stop_y - d0 - 40.0), (x, BOX + 150.0)])
        path = _Path(pts)
        s0 = 40.0
        if intent == "stop":
            a = v0 * v0 / (2.0 * d0)
            tstop = v0 / a
            tt = np.maximum(tf, 0.0)
            travelled = np.where(tt < tstop, v0 * tt - 0.5 * a * tt**2, d0)
            s = np.where(tf <= 0, s0 + v0 * tf, s0 + travelled)
        else:
            v = np.where(tf <= 0, v0, v0 * (1.0 + (slow - 1.0) * np.minimum(np.maximum(tf, 0) / 2.0, 1.0)))
            s = s0 + _integrate(v, tf, hz, t0)
        info.update(v0=float(v0), d0=float(d0))
        return path, s, info
    if family == "parked_vehicle":
        y = rng.uniform(-55.0, -BOX - 10.0)
        x = ROAD_HALF + 1.2
        path = _Path(np.array([(x, y - 5.0), (x, y + 5.0)]))
        return path, np.full(T, 5.0), info
    if family == "jaywalking_pedestrian":
        micro = bool(rng.random() < 0.2)
        info["micromobility"] = micro
        v0 = rng.uniform(3.0, 5.0) if micro else rng.uniform(1.1, 1.6)
        x = ROAD_HALF + 2.0
        y_t0 = rng.uniform(-45.0, -BOX - 6.0)
        back = v0 * (t0 / hz) + 5.0
        if intent == "jaywalk":
            walk_on = v0 * rng.uniform(0.3, 1.2)
            r = 1.0
            pts = np.vstack(
                [
                    [(x, y_t0 - back), (x, y_t0 + walk_on)],
                    _arc((x - r, y_t0 + walk_on), r, 0.0, math.pi / 2, n=8),
                    [(-ROAD_HALF - 60.0, y_t0 + walk_on + r)],
                ]
            )
        else:
            pts = np.array([(x, y_t0 - back), (x, y_t0 + 200.0)])
        path = _Path(pts)
        v = np.full(T, v0)
        s = back + _integrate(v, tf, hz, t0)
        info.update(v0=float(v0))
        return path, s, info
    raise ConfigError(f"unknown family {family!r}")


def _integrate(v: np.ndarray, tf: np.ndarray, hz: float, t0: int) -> np.ndarray:
    """Arc length relative to the t0 position for a per-step speed profile (trapezoid rule)."""
    dt = 1.0 / hz
    inc = np.zeros_like(v)
    inc[1:] = 0.5 * (v[1:] + v[:-1]) * dt
    cum = np.cumsum(inc)
    return cum - cum[t0 - 1]


def _camera_for(bearing: float) -> Camera:
    # bearing relative to ego heading (+y), counter-clockwise positive
    order = [
        Camera.FRONT,
        Camera.FRONT_LEFT,
        Camera.SIDE_LEFT,
        Camera.REAR_LEFT,
        Camera.REAR,
        Camera.REAR_RIGHT,
        Camera.SIDE_RIGHT,
        Camera.FRONT_RIGHT,
    ]
    k = int(np.floor((bearing + math.pi / 8) / (math.pi / 4))) % 8
    return order[k]


def generate_scenario(config: GeneratorConfig, seed: int, index: int) -> Scenario:
    """One scenario; a pure function of (config, seed, index)."""
    rng = np.random.default_rng([int(seed), int(index)])
    hz, t0, fut = PROFILES[config.profile]
    T = t0 + fut
    sid = f"s{seed}_{index:05d}"
    n_agents = int(rng.integers(config.agents_min, config.agents_max + 1))
    # turning needs an intersection, so corridors only host the other families
    corridor_ok = any(w > 0 for f, w in config.family_mix.items() if f != "ambiguous_turn")
    corridor = bool(rng.random() < config.p_corridor) and corridor_ok
    families = [_sample_family(rng, config.family_mix, corridor) for _ in range(n_agents)]
    scene = _sample_scene(rng, corridor)
    agents: dict[str, AgentTrack] = {}
    intents: dict[str, dict] = {}
    steps = np.arange(1, T + 1)
    used_arms: list[int] = []
    for j, family in enumerate(families):
        aid = f"a{j:02d}"
        choices = FAMILY_INTENTS[family]
        if family == "ambiguous_turn":
            intent = "turn" if rng.random() < config.turn_fraction else "straight"
        elif family == "stop_or_go":
            intent = "stop" if rng.random() < config.stop_fraction else "go"
        elif family == "jaywalking_pedestrian":
            intent = "jaywalk" if rng.random() < config.jaywalk_fraction else "walk_sidewalk"
        else:
            intent = choices[0]
        arm = 0 if corridor else int(rng.integers(0, 4))
        if corridor and rng.random() < 0.5:
            arm = 2  # opposite direction along the corridor
        used_arms.append(arm)
        path, s, info = _agent_motion(family, intent, rng, scene, hz, t0, T)
        pos, dirs = path.at(s)
        speed = np.gradient(s, 1.0 / hz)
        R = _rot(arm * math.pi / 2)
        pos = pos @ R.T
        dirs = dirs @ R.T
        vel = dirs * speed[:, None]
        if family == "parked_vehicle":
            vel = np.zeros_like(vel)
        heading = wrap_angle(np.arctan2(dirs[:, 1], dirs[:, 0]))
        hist = steps <= t0
        if config.position_noise > 0 and family != "parked_vehicle":
            pos = pos.copy()
            pos[hist] += rng.normal(0.0, config.position_noise, size=(int(hist.sum()), 2))
        valid = np.ones(T, dtype=bool)
        if t0 > 1 and rng.random() < config.p_missing_history:
            k = int(rng.integers(1, t0))
            valid[:k] = False
        if rng.random() < config.p_invalid_agent:
            valid[:] = False
        pos = np.where(valid[:, None], pos, 0.0)
        vel = np.where(valid[:, None], vel, 0.0)
        heading = np.where(valid, heading, 0.0)
        cat = FAMILY_CATEGORY[family]
        agents[aid] = AgentTrack(aid, cat, steps, pos, vel, heading, valid)
        heavy = bool(rng.random() < config.p_heavy_occlusion)
        occ = rng.uniform(0.75, 0.95) if heavy else rng.uniform(0.0, 0.45)
        onset = rng.uniform(*config.onset_range_s)
        intents[aid] = {
            "family": family,
            "intent": intent,
            "onset_s": float(onset),
            "occlusion": float(occ),
            "vehicle_type": str(rng.choice(["SEDAN", "SUV", "TRUCK", "BUS"], p=[0.5, 0.3, 0.15, 0.05]))
            if cat is AgentCategory.VEHICLE
            else None,
            "emergency": bool(cat is AgentCategory.VEHICLE and rng.random() < 0.03),
            "hazard_lights": bool(family == "parked_vehicle" and rng.random() < 0.3),
            "arm": arm,
            **info,
        }
    frames = _sensor_frames(sid, agents, intents, rng, hz, t0, config)
    lights = _traffic_lights(rng, corridor, T)
    return Scenario(
        scenario_id=sid,
        history_len=t0,
        horizon=T,
        step_hz=hz,
        agents=agents,
        map_elements=_intersection_map(corridor),
        traffic_lights=lights,
        sensor_frames=frames,
        ground_truth_intent=intents,
        scene_truth=scene,
    )


def _traffic_lights(rng, corridor: bool, T: int) -> list[TrafficLightState]:
    if corridor:
        return []
    out = []
    # phase is independent of every agent's intent
    ns_green = bool(rng.random() < 0.5)
    for a in range(4):
        state = LightState.GREEN if (a % 2 == 0) == ns_green else LightState.RED
        for lane in ("in_inner", "in_outer"):
            for step in range(1, T + 1):
                out.append(TrafficLightState(f"arm{a}_{lane}", step, state))
    return out


def _sensor_frames(sid, agents, intents, rng, hz, t0, config: GeneratorConfig) -> list[SensorFrameRef]:
    every = max(1, int(round(config.frame_interval_s * hz)))
    first = t0 - int(round(config.pre_roll_s * hz))
    frame_steps = list(range(t0, first - 1, -every))[::-1]
    frames = []
    for step in frame_steps:
        visible: dict[Camera, list[VisibleAgent]] = {c: [] for c in Camera}
        for aid in sorted(agents):
            tr = agents[aid]
            i = min(max(step, 1), t0) - 1
            if not tr.valid[t0 - 1]:
                continue
            p = tr.position[i] if tr.valid[i] else tr.position[t0 - 1]
            if step < 1:
                p = p - tr.velocity[0] * ((1 - step) / hz)
            rng_m = float(np.hypot(p[0], p[1]))
            if rng_m <= 0.0:
                rng_m = 1e-3
            bearing = math.atan2(p[1], p[0]) - math.pi / 2
            cam = _camera_for(bearing)
            occ = float(np.clip(intents[aid]["occlusion"] + rng.normal(0.0, 0.03), 0.0, 1.0))
            visible[cam].append(VisibleAgent(aid, occ, rng_m))
        for cam in Camera:
            frames.append(SensorFrameRef(step, cam, f"sim://{sid}/{cam.value.lower()}/{step}", tuple(visible[cam])))
    return frames


def generate_synthetic(config: GeneratorConfig, seed: int) -> list[Scenario]:
    """Deterministic batch of synthetic scenarios.

    Raises:
        ConfigError: invalid configuration (no agents, empty mix, bad profile).
    """
    config.validate()
    return [generate_scenario(config, seed, i) for i in range(config.n_scenarios)]


def motion_mode(track: AgentTrack, t0: int) -> str:
    """Coarse future mode from geometry alone: stationary, straight, left or right."""
    p0 = track.position[track.index_of(t0)]
    p1 = track.position[-1]
    if np.linalg.norm(p1 - p0) < 2.0:
        return "stationary"
    dh = float(wrap_angle(track.heading[-1] - track.heading[track.index_of(t0)]))
    if abs(dh) < math.radians(45):
        return "straight"
    return "left" if dh > 0 else "right"


def history_features(track: AgentTrack, t0: int) -> np.ndarray:
    """Flattened kinematic history (positions relative to t0, velocities, heading)."""
    w = track.window(1, t0)
    rel = w.position - w.position[-1]
    feats = np.concatenate(
        [rel, w.velocity, np.cos(w.heading)[:, None], np.sin(w.heading)[:, None]], axis=1
    ) * w.valid[:, None]
    return feats.ravel()

