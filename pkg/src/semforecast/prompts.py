"""Multimodal prompt payloads for the per-agent and scene-level queries.

Images never leave the scenario as pixels: every ``<img>`` placeholder in the
prompt text is bound, in order, to an :class:`ImageSlot` that names the camera
frame and carries the crop / bounding-box annotation as metadata.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources

from .scene import AgentCategory, Camera, Scenario, SensorFrameRef

TEMPLATE_VERSION = "v1"
IMG = "<img>"
_CROP_RUN = "<img> <img> <img> ..."

# visibility filter for object crops
MAX_OCCLUSION = 0.7
MAX_RANGE_M = 60.0
# crop offsets before the query step, seconds
CROP_OFFSETS_S = (0.0, 0.5, 1.0)
SCENE_CAMERAS = (Camera.FRONT, Camera.FRONT_LEFT, Camera.FRONT_RIGHT)


class PromptKind(str, Enum):
    VSA_VEHICLE = "VSA_VEHICLE"
    VSA_PEDESTRIAN = "VSA_PEDESTRIAN"
    SC = "SC"


class PromptError(ValueError):
    pass


_TEMPLATE_FILES = {
    PromptKind.VSA_VEHICLE: "vsa_vehicle",
    PromptKind.VSA_PEDESTRIAN: "vsa_pedestrian",
    PromptKind.SC: "sc_scene",
}


def load_template(kind: PromptKind | str, version: str = TEMPLATE_VERSION) -> str:
    name = f"{_TEMPLATE_FILES[PromptKind(kind)]}.{version}.txt"
    return resources.files("semforecast").joinpath("templates").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class ImageSlot:
    uri: str
    step: int
    camera: str
    role: str  # "agent_crop" or "scene"
    agent_id: str | None = None
    # agents drawn with a red bounding box on this image
    boxes: tuple[str, ...] = ()


@dataclass
class PromptPayload:
    kind: PromptKind
    scenario_id: str
    step: int
    text: str
    image_slots: list[ImageSlot] = field(default_factory=list)
    agent_order: list[str] = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.text

    def to_json(self) -> str:
        d = asdict(self)
        d["kind"] = self.kind.value
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, s: str) -> "PromptPayload":
        d = json.loads(s)
        slots = [ImageSlot(**{**x, "boxes": tuple(x["boxes"])}) for x in d.pop("image_slots")]
        return cls(kind=PromptKind(d.pop("kind")), image_slots=slots, **d)


def _category_kind(category) -> PromptKind:
    cat = AgentCategory(getattr(category, "value", category))
    if cat is AgentCategory.VEHICLE:
        return PromptKind.VSA_VEHICLE
    if cat is AgentCategory.PEDESTRIAN:
        return PromptKind.VSA_PEDESTRIAN
    raise PromptError(f"no per-agent prompt for category {cat.value}")


def _nearest_frame_step(scenario: Scenario, target: float) -> int | None:
    steps = scenario.frame_steps()
    if not steps:
        return None
    # ties resolve to the later step
    return min(steps, key=lambda s: (abs(s - target), -s))


def visible_agents(scenario: Scenario, category, step: int | None = None) -> list[str]:
    """Agents of ``category`` that some camera sees well enough at ``step``, sorted by id."""
    step = scenario.t0 if step is None else step
    cat = AgentCategory(getattr(category, "value", category))
    best: dict[str, tuple[float, float]] = {}
    for f in scenario.frames_at(step):
        for v in f.visible_agents:
            tr = scenario.agents.get(v.agent_id)
            if tr is None or tr.category is not cat:
                continue
            if v.occlusion_fraction > MAX_OCCLUSION or v.range > MAX_RANGE_M:
                continue
            best[v.agent_id] = (v.occlusion_fraction, v.range)
    return sorted(best)


def _frame_showing(scenario: Scenario, agent_id: str, step: int) -> SensorFrameRef | None:
    for f in scenario.frames_at(step):
        if any(v.agent_id == agent_id for v in f.visible_agents):
            return f
    return None


def _scene_slots(scenario: Scenario, step: int, focus: list[str]) -> list[ImageSlot]:
    slots = []
    for cam in SCENE_CAMERAS:
        frame = next((f for f in scenario.frames_at(step) if f.camera is cam), None)
        if frame is None:
            raise PromptError(f"{scenario.scenario_id}: no {cam.value} frame at step {step}")
        boxes = tuple(sorted(v.agent_id for v in frame.visible_agents if v.agent_id in focus))
        slots.append(ImageSlot(frame.uri, step, cam.value, "scene", None, boxes))
    return slots


def build_vsa_prompt(scenario: Scenario, category, step: int | None = None) -> PromptPayload:
    """Per-category agent prompt as of ``step`` (default: the current step t0).

    Returns an empty payload (``is_empty``) when no agent of the category passes the
    occlusion/range filter; callers skip the query in that case.
    """
    kind = _category_kind(category)
    step = scenario.t0 if step is None else int(step)
    if step not in scenario.frame_steps():
        raise PromptError(f"{scenario.scenario_id}: no sensor frames at step {step}")
    order = visible_agents(scenario, category, step)
    if not order:
        return PromptPayload(kind, scenario.scenario_id, step, "", [], [])
    crops: list[ImageSlot] = []
    for aid in order:
        for off in CROP_OFFSETS_S:
            s = _nearest_frame_step(scenario, step - off * scenario.step_hz)
            frame = _frame_showing(scenario, aid, s) or _frame_showing(scenario, aid, step)
            crops.append(ImageSlot(frame.uri, frame.step, frame.camera.value, "agent_crop", aid, (aid,)))
    template = load_template(kind)
    if template.count(_CROP_RUN) != 1:
        raise PromptError("template is missing the per-agent crop placeholder run")
    text = template.replace(_CROP_RUN, " ".join([IMG] * len(crops)))
    slots = crops + _scene_slots(scenario, step, order)
    assert text.count(IMG) == len(slots)
    return PromptPayload(kind, scenario.scenario_id, step, text, slots, order)


def build_sc_prompt(scenario: Scenario, step: int | None = None) -> PromptPayload:
    step = scenario.t0 if step is None else int(step)
    front = next((f for f in scenario.frames_at(step) if f.camera is Camera.FRONT), None)
    if front is None:
        raise PromptError(f"{scenario.scenario_id}: no FRONT camera frame at step {step}")
    text = load_template(PromptKind.SC)
    slot = ImageSlot(front.uri, step, Camera.FRONT.value, "scene", None, ())
    return PromptPayload(PromptKind.SC, scenario.scenario_id, step, text, [slot], [])


def build_all(scenario: Scenario, step: int | None = None) -> list[PromptPayload]:
    """Vehicle, pedestrian and scene payloads for one scenario, empties dropped."""
    out = []
    for cat in (AgentCategory.VEHICLE, AgentCategory.PEDESTRIAN):
        p = build_vsa_prompt(scenario, cat, step)
        if not p.is_empty:
            out.append(p)
    out.append(build_sc_prompt(scenario, step))
    return out
