"""Answer vocabularies for the agent and scene questions, and their multi-hot codes.

Agent vectors use one unified layout: the vehicle segment (34 entries) followed by
the pedestrian segment (24 entries).  An agent only ever lights up the segment of
its own category, so a single embedding matrix serves both classes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np


class Category(str, Enum):
    VEHICLE = "VEHICLE"
    PEDESTRIAN = "PEDESTRIAN"
    SCENE = "SCENE"


YES_NO = ("YES", "NO", "UNSURE")


@dataclass(frozen=True)
class QuestionSpec:
    question_id: str
    applies_to: Category
    answers: tuple[str, ...]
    default: str
    # coarse reasoning type used by the ablation grid: type, signal, intent, scene
    group: str
    header: str

    def __post_init__(self):
        if self.default not in self.answers:
            raise ValueError(f"{self.question_id}: default {self.default!r} not in vocabulary")
        if len(set(self.answers)) != len(self.answers):
            raise ValueError(f"{self.question_id}: duplicate answer tokens")

    @property
    def size(self) -> int:
        return len(self.answers)


def _yn(qid, cat, group, header):
    return QuestionSpec(qid, cat, YES_NO, "UNSURE", group, header)


_V = Category.VEHICLE
_P = Category.PEDESTRIAN
_S = Category.SCENE

VEHICLE_QUESTIONS: tuple[QuestionSpec, ...] = (
    _yn("EmergencyVehicle", _V, "type", "Emergency Vehicle?"),
    QuestionSpec("VehicleType", _V, ("SEDAN", "TRUCK", "BUS", "SUV", "OTHER"), "OTHER", "type", "Vehicle Type"),
    QuestionSpec(
        "Signal", _V, ("TURN SIGNAL", "BRAKE LIGHTS", "HAZARD LIGHTS", "NONE", "UNSURE"), "UNSURE", "signal", "Signal"
    ),
    _yn("KeepForward", _V, "intent", "Keep Forward"),
    _yn("SlowDown", _V, "intent", "Slow Down"),
    _yn("Turn", _V, "intent", "Turn"),
    _yn("UTurn", _V, "intent", "U-Turn"),
    _yn("Parked", _V, "intent", "Parked"),
    _yn("Stop", _V, "intent", "Stop"),
    _yn("HeavyOcclusion", _V, "type", "Heavy Occlusion"),
)

PEDESTRIAN_QUESTIONS: tuple[QuestionSpec, ...] = (
    _yn("JayWalking", _P, "intent", "Jay Walking?"),
    _yn("Micromobility", _P, "type", "Micromobility"),
    _yn("WalkSidewalk", _P, "intent", "Walk on Sidewalk"),
    _yn("Cross", _P, "intent", "Cross"),
    _yn("Turn", _P, "intent", "Turn"),
    _yn("Stop", _P, "intent", "Stop"),
    _yn("Waiting", _P, "intent", "Waiting"),
    _yn("LowVisibility", _P, "type", "Low Visibility"),
)

SCENE_QUESTIONS: tuple[QuestionSpec, ...] = (
    QuestionSpec("Weather", _S, ("SUNNY", "RAINY", "SNOWY", "FOGGY", "DARK", "UNSURE"), "UNSURE", "scene", "Weather"),
    QuestionSpec("TimeOfDay", _S, ("DAY", "EVENING", "NIGHT", "UNSURE"), "UNSURE", "scene", "Time of Day"),
    QuestionSpec(
        "RoadType",
        _S,
        ("RESIDENTIAL", "HIGHWAY", "EXPRESS", "SERVICE", "OTHER", "UNSURE"),
        "UNSURE",
        "scene",
        "Road Type",
    ),
    _yn("Intersection", _S, "scene", "Intersection"),
)

_SCHEMAS = {_V: VEHICLE_QUESTIONS, _P: PEDESTRIAN_QUESTIONS, _S: SCENE_QUESTIONS}

REASONING_GROUPS = ("signal", "intent", "type", "scene")


def schema_for(category: Category | str) -> tuple[QuestionSpec, ...]:
    return _SCHEMAS[Category(category)]


def _dim(questions: Sequence[QuestionSpec]) -> int:
    return sum(q.size for q in questions)


D_VEHICLE = _dim(VEHICLE_QUESTIONS)
D_PEDESTRIAN = _dim(PEDESTRIAN_QUESTIONS)
D_AGENT = D_VEHICLE + D_PEDESTRIAN
D_SCENE = _dim(SCENE_QUESTIONS)


def _segment_offsets(category: Category) -> list[int]:
    """Start index of each question's one-hot segment inside the category's vector."""
    base = D_VEHICLE if category is Category.PEDESTRIAN else 0
    offsets = []
    for q in schema_for(category):
        offsets.append(base)
        base += q.size
    return offsets


_OFFSETS = {c: _segment_offsets(c) for c in Category}


def schema_fingerprint() -> str:
    """Short hash over every question id and answer list, in order."""
    payload = {
        c.value: [[q.question_id, list(q.answers), q.default] for q in schema_for(c)] for c in Category
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_answers(category: Category | str) -> dict[str, str]:
    return {q.question_id: q.default for q in schema_for(category)}


def vector_dim(category: Category | str) -> int:
    return D_SCENE if Category(category) is Category.SCENE else D_AGENT


def encode(answers: Mapping[str, str], category: Category | str) -> np.ndarray:
    """Multi-hot vector for a full answer set.

    Raises:
        KeyError: a question of the schema has no answer.
        ValueError: an answer token is outside the question's vocabulary.
    """
    category = Category(category)
    x = np.zeros(vector_dim(category), dtype=np.float32)
    for q, off in zip(schema_for(category), _OFFSETS[category]):
        token = answers[q.question_id]
        try:
            j = q.answers.index(token)
        except ValueError:
            raise ValueError(f"{q.question_id}: unknown answer token {token!r}") from None
        x[off + j] = 1.0
    return x


def decode(x: np.ndarray, category: Category | str) -> dict[str, str]:
    """Inverse of :func:`encode` by per-segment argmax."""
    category = Category(category)
    x = np.asarray(x)
    if x.shape != (vector_dim(category),):
        raise ValueError(f"expected shape ({vector_dim(category)},), got {x.shape}")
    out = {}
    for q, off in zip(schema_for(category), _OFFSETS[category]):
        out[q.question_id] = q.answers[int(np.argmax(x[off : off + q.size]))]
    return out


def group_mask(category: Category | str, groups: Sequence[str]) -> np.ndarray:
    """0/1 mask over the category's vector keeping only questions in ``groups``.

    For agent categories the mask also keeps the other category's segment layout,
    so it can be applied to any agent vector.
    """
    category = Category(category)
    keep = set(groups)
    unknown = keep - set(REASONING_GROUPS)
    if unknown:
        raise ValueError(f"unknown reasoning groups: {sorted(unknown)}")
    cats = (Category.SCENE,) if category is Category.SCENE else (Category.VEHICLE, Category.PEDESTRIAN)
    mask = np.zeros(vector_dim(category), dtype=np.float32)
    for c in cats:
        for q, off in zip(schema_for(c), _OFFSETS[c]):
            if q.group in keep:
                mask[off : off + q.size] = 1.0
    return mask


@dataclass
class AgentSemantics:
    agent_id: str
    category: Category
    answers: dict[str, str]
    encoding: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.category = Category(self.category)
        if self.category is Category.SCENE:
            raise ValueError("AgentSemantics category must be VEHICLE or PEDESTRIAN")
        self.encoding = encode(self.answers, self.category)

    @classmethod
    def default(cls, agent_id: str, category: Category | str) -> "AgentSemantics":
        return cls(agent_id, Category(category), default_answers(category))


@dataclass
class SceneSemantics:
    answers: dict[str, str]
    encoding: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.encoding = encode(self.answers, Category.SCENE)

    @classmethod
    def default(cls) -> "SceneSemantics":
        return cls(default_answers(Category.SCENE))
