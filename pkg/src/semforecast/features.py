"""Semantic feature extraction and the on-disk feature / parse-report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .mllm import MllmClient
from .model import SemanticInputs
from .parsing import SCENE_KEY, ParseReport, parse_sc, parse_vsa
from .prompts import PromptKind, PromptPayload, build_all
from .scene import Scenario
from .schema import AgentSemantics, Category, SceneSemantics, schema_fingerprint


class FeatureFileError(ValueError):
    pass


@dataclass
class ScenarioFeatures:
    scenario_id: str
    step: int
    agents: dict[str, AgentSemantics] = field(default_factory=dict)
    scene: SceneSemantics | None = None

    def to_inputs(self) -> SemanticInputs:
        return SemanticInputs(
            {aid: s.encoding.astype(np.float64) for aid, s in self.agents.items()},
            None if self.scene is None else self.scene.encoding.astype(np.float64),
        )


@dataclass(frozen=True)
class ParseRecord:
    scenario_id: str
    kind: str
    step: int
    status: str
    defaulted_count: int


_KIND_CATEGORY = {PromptKind.VSA_VEHICLE: Category.VEHICLE, PromptKind.VSA_PEDESTRIAN: Category.PEDESTRIAN}


def parse_exchange(payload: PromptPayload, raw: str, features: ScenarioFeatures) -> ParseReport:
    if payload.kind is PromptKind.SC:
        scene, report = parse_sc(raw)
        features.scene = scene
    else:
        sems, report = parse_vsa(raw, _KIND_CATEGORY[payload.kind], payload.agent_order)
        for s in sems:
            features.agents[s.agent_id] = s
    return report


def query_steps(scenario: Scenario, delays_s: Sequence[float] = (0.0,)) -> list[int]:
    """Frame steps needed to serve the given delays (steps without frames are skipped)."""
    available = set(scenario.frame_steps())
    steps = {scenario.t0 - int(round(d * scenario.step_hz)) for d in delays_s}
    return sorted(s for s in steps if s in available)


def extract_features(
    scenarios: Sequence[Scenario],
    client: MllmClient,
    delays_s: Sequence[float] = (0.0,),
) -> tuple[list[ScenarioFeatures], list[ParseRecord]]:
    """Prompt, query and parse every scenario at every step the delays need."""
    jobs: list[tuple[PromptPayload, ScenarioFeatures]] = []
    feats: list[ScenarioFeatures] = []
    for sc in scenarios:
        for step in query_steps(sc, delays_s):
            f = ScenarioFeatures(sc.scenario_id, step)
            feats.append(f)
            for p in build_all(sc, step):
                jobs.append((p, f))
    exchanges = client.query_many([p for p, _ in jobs])
    records = []
    for (p, f), ex in zip(jobs, exchanges):
        rep = parse_exchange(p, ex.raw_response, f)
        records.append(ParseRecord(p.scenario_id, p.kind.value, p.step, rep.status.value, rep.defaulted_count))
    return feats, records


# ---------------------------------------------------------------------------
# files


def save_features(features: Iterable[ScenarioFeatures], path: str | Path, meta: dict | None = None) -> None:
    fp = schema_fingerprint()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for f in features:
            rows = [(aid, s.category.value, s.answers, s.encoding) for aid, s in sorted(f.agents.items())]
            if f.scene is not None:
                rows.append((SCENE_KEY, Category.SCENE.value, f.scene.answers, f.scene.encoding))
            for aid, cat, answers, enc in rows:
                rec = {
                    "scenario_id": f.scenario_id,
                    "step": f.step,
                    "agent_id": aid,
                    "category": cat,
                    "answers": answers,
                    "encoding": [int(v) for v in enc],
                    "schema_fingerprint": fp,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_features(path: str | Path) -> list[ScenarioFeatures]:
    """Read a feature file; a schema fingerprint mismatch is an error."""
    fp = schema_fingerprint()
    out: dict[tuple[str, int], ScenarioFeatures] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "_meta" in rec:
                    continue
                if rec["schema_fingerprint"] != fp:
                    raise FeatureFileError(
                        f"{path}:{n}: schema fingerprint {rec['schema_fingerprint']} does not match {fp}; "
                        "re-run `parse` with the current schema"
                    )
                key = (rec["scenario_id"], int(rec["step"]))
                f = out.setdefault(key, ScenarioFeatures(*key))
                if rec["agent_id"] == SCENE_KEY:
                    sem = f.scene = SceneSemantics(rec["answers"])
                else:
                    sem = f.agents[rec["agent_id"]] = AgentSemantics(rec["agent_id"], rec["category"], rec["answers"])
                if "encoding" in rec and [int(v) for v in sem.encoding] != rec["encoding"]:
                    raise FeatureFileError(f"{path}:{n}: stored encoding disagrees with the answers")
            except FeatureFileError:
                raise
            except (ValueError, KeyError, TypeError) as e:
                raise FeatureFileError(f"{path}:{n}: malformed feature record ({e})") from None
    return list(out.values())


def index_features(features: Iterable[ScenarioFeatures]) -> dict[str, dict[int, SemanticInputs]]:
    """scenario id -> step -> model inputs."""
    idx: dict[str, dict[int, SemanticInputs]] = {}
    for f in features:
        idx.setdefault(f.scenario_id, {})[f.step] = f.to_inputs()
    return idx


PARSE_REPORT_COLUMNS = ("scenario_id", "kind", "step", "status", "defaulted_count")


def write_parse_report(records: Iterable[ParseRecord], path: str | Path, header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARSE_REPORT_COLUMNS)
        for r in records:
            w.writerow([r.scenario_id, r.kind, r.step, r.status, r.defaulted_count])


def parse_summary(records: Sequence[ParseRecord]) -> Mapping[str, int]:
    counts = {"FULL": 0, "PARTIAL": 0, "EMPTY": 0}
    for r in records:
        counts[r.status] += 1
    return counts
