"""MLLM access: live HTTP backend, deterministic mock oracle, append-only cache.

The mock oracle reads the generator's latent labels and writes text in the same
shape a real model answers with (reasoning first, then the tagged table or the
``Final answer:`` line).  Faults are injected afterwards so parser and gate
robustness can be exercised against a known ground truth.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .parsing import render_table
from .prompts import IMG, PromptKind, PromptPayload
from .scene import AgentCategory, Scenario
from .schema import AgentSemantics, Category, SceneSemantics, schema_for

log = logging.getLogger(__name__)

OOV_TOKENS = ("MAYBE", "LIKELY", "N/A", "PROBABLY", "?")
_EPOCH = "1970-01-01T00:00:00Z"


class Source(str, Enum):
    LIVE = "LIVE"
    MOCK = "MOCK"
    CACHE = "CACHE"


class TransportError(RuntimeError):
    """All retries used up; ``attempts`` lists what happened on each try."""

    def __init__(self, message: str, attempts: list[str]):
        super().__init__(f"{message} after {len(attempts)} attempts: {attempts}")
        self.attempts = attempts


@dataclass
class MllmExchange:
    key: str
    raw_response: str
    source: Source
    latency_ms: float
    created_at: str
    scenario_id: str = ""
    kind: str = ""
    step: int = 0
    attempts: int = 1

    def to_json(self) -> str:
        d = asdict(self)
        d["source"] = self.source.value
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MllmExchange":
        d = json.loads(line)
        d["source"] = Source(d["source"])
        return cls(**d)


@dataclass(frozen=True)
class FaultProfile:
    p_wrong_answer: float = 0.0
    p_malformed_table: float = 0.0
    p_missing_row: float = 0.0
    p_out_of_vocab: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_wrong_answer", "p_malformed_table", "p_missing_row", "p_out_of_vocab"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def tag(self) -> str:
        return (
            f"w{self.p_wrong_answer:g}-m{self.p_malformed_table:g}-r{self.p_missing_row:g}"
            f"-o{self.p_out_of_vocab:g}-s{self.seed}"
        )


def exchange_key(scenario_id: str, kind: str, text: str, image_uris: Sequence[str] = (), backend: str = "") -> str:
    h = hashlib.sha256()
    for part in (backend, scenario_id, kind, text, *image_uris):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def payload_key(payload: PromptPayload, backend: str = "") -> str:
    kind = payload.kind.value if hasattr(payload.kind, "value") else str(payload.kind)
    return exchange_key(payload.scenario_id, kind, payload.text, [s.uri for s in payload.image_slots], backend)


# ---------------------------------------------------------------------------
# cache


class ResponseCache:
    """Append-only JSON-lines store of exchanges keyed by their hash.

    A corrupt line only loses its own entry.
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: dict[str, MllmExchange] = {}
        self.corrupt_lines = 0
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        ex = MllmExchange.from_json(line)
                    except (ValueError, TypeError, KeyError):
                        self.corrupt_lines += 1
                        continue
                    self._entries.setdefault(ex.key, ex)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> MllmExchange | None:
        return self._entries.get(key)

    def put(self, ex: MllmExchange) -> None:
        with self._lock:
            if ex.key in self._entries:
                return
            self._entries[ex.key] = ex
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(ex.to_json() + "\n")


# ---------------------------------------------------------------------------
# mock oracle


@dataclass
class FaultLog:
    cells_total: int = 0
    flipped: int = 0
    out_of_vocab: int = 0
    rows_total: int = 0
    rows_dropped: int = 0
    malformed: bool = False
    flipped_fields: list[tuple[str, str]] = field(default_factory=list)


def _cue_visible(truth: dict, scenario: Scenario, step: int) -> bool:
    lead_s = (scenario.t0 - step) / scenario.step_hz
    return truth["onset_s"] >= lead_s


def true_agent_answers(scenario: Scenario, agent_id: str, step: int | None = None) -> dict[str, str]:
    """What a perfect observer would answer about one agent at ``step``."""
    step = scenario.t0 if step is None else step
    truth = scenario.ground_truth_intent[agent_id]
    fam, intent = truth["family"], truth["intent"]
    cue = fam == "parked_vehicle" or _cue_visible(truth, scenario, step)
    occluded = "YES" if truth["occlusion"] > 0.5 else "NO"
    cat = scenario.agents[agent_id].category
    if cat is AgentCategory.VEHICLE:
        a = {
            "EmergencyVehicle": "YES" if truth.get("emergency") else "NO",
            "VehicleType": truth.get("vehicle_type") or "OTHER",
            "Signal": "NONE",
            "KeepForward": "UNSURE",
            "SlowDown": "UNSURE",
            "Turn": "UNSURE",
            "UTurn": "NO",
            "Parked": "NO",
            "Stop": "UNSURE",
            "HeavyOcclusion": occluded,
        }
        if cue:
            if intent in ("straight", "go"):
                a.update(KeepForward="YES", SlowDown="NO", Turn="NO", Stop="NO")
            elif intent == "turn":
                a.update(Signal="TURN SIGNAL", KeepForward="NO", SlowDown="YES", Turn="YES", Stop="NO")
            elif intent == "stop":
                a.update(Signal="BRAKE LIGHTS", KeepForward="NO", SlowDown="YES", Turn="NO", Stop="YES")
            elif intent == "parked":
                a.update(
                    Signal="HAZARD LIGHTS" if truth.get("hazard_lights") else "NONE",
                    KeepForward="NO",
                    SlowDown="NO",
                    Turn="NO",
                    Parked="YES",
                    Stop="NO",
                )
        return a
    a = {
        "JayWalking": "UNSURE",
        "Micromobility": "YES" if truth.get("micromobility") else "NO",
        "WalkSidewalk": "UNSURE",
        "Cross": "UNSURE",
        "Turn": "UNSURE",
        "Stop": "NO",
        "Waiting": "NO",
        "LowVisibility": occluded,
    }
    if cue:
        if intent == "jaywalk":
            a.update(JayWalking="YES", WalkSidewalk="NO", Cross="YES", Turn="YES")
        else:
            a.update(JayWalking="NO", WalkSidewalk="YES", Cross="NO", Turn="NO")
    return a


def true_scene_answers(scenario: Scenario) -> dict[str, str]:
    t = scenario.scene_truth
    return {
        "Weather": t["weather"],
        "TimeOfDay": t["time_of_day"],
        "RoadType": t["road_type"],
        "Intersection": t["intersection"],
    }


def _fault_rng(profile: FaultProfile, payload: PromptPayload) -> np.random.Generator:
    digest = hashlib.sha256(
        f"{profile.seed}|{payload.scenario_id}|{payload.kind.value}|{payload.step}".encode()
    ).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _explain_agent(idx: int, answers: dict[str, str], cat: Category) -> str:
    if cat is Category.VEHICLE:
        name = answers["VehicleType"]
        acts = [k for k in ("KeepForward", "SlowDown", "Turn", "UTurn", "Parked", "Stop") if answers[k] == "YES"]
        what = ", ".join(acts) if acts else "nothing certain"
        return f"* **{name} (row {idx + 1}):** Signal shows {answers['Signal'].lower()}; likely actions: {what}."
    acts = [k for k in ("JayWalking", "WalkSidewalk", "Cross", "Turn", "Stop", "Waiting") if answers[k] == "YES"]
    what = ", ".join(acts) if acts else "nothing certain"
    return f"* **Pedestrian (row {idx + 1}):** likely actions: {what}."


def _perturb_cells(rows, questions, rng, profile: FaultProfile, flog: FaultLog, row_ids):
    for r, cells in enumerate(rows):
        for k, q in enumerate(questions):
            flog.cells_total += 1
            flip = rng.random() < profile.p_wrong_answer
            oov = rng.random() < profile.p_out_of_vocab
            if flip:
                others = [t for t in q.answers if t != cells[k]]
                cells[k] = others[int(rng.integers(len(others)))]
                flog.flipped += 1
                flog.flipped_fields.append((row_ids[r], q.question_id))
            if oov:
                cells[k] = OOV_TOKENS[int(rng.integers(len(OOV_TOKENS)))]
                flog.out_of_vocab += 1


def mock_generate_logged(
    scenario: Scenario, payload: PromptPayload, fault_profile: FaultProfile | None = None
) -> tuple[str, FaultLog]:
    """Mock oracle output plus a record of every injected fault."""
    profile = fault_profile or FaultProfile()
    rng = _fault_rng(profile, payload)
    flog = FaultLog()
    if payload.kind is PromptKind.SC:
        questions = schema_for(Category.SCENE)
        answers = true_scene_answers(scenario)
        cells = [[answers[q.question_id] for q in questions]]
        _perturb_cells(cells, questions, rng, profile, flog, ["SCENE"])
        t = scenario.scene_truth
        logic = (
            f"Logic: The weather looks {t['weather'].lower()} and it is {t['time_of_day'].lower()}. "
            f"This looks like a {t['road_type'].lower()} road. "
            + ("I am approaching an intersection." if t["intersection"] == "YES" else "No intersection ahead.")
        )
        line = "Final answer: " + " ".join(f"<{c}>" for c in cells[0])
        flog.rows_total = 1
        if rng.random() < profile.p_missing_row:
            flog.rows_dropped = 1
            line = ""
        if rng.random() < profile.p_malformed_table:
            flog.malformed = True
            line = line.replace("<", "").replace(">", "")
        return f"{logic}\n\n{line}".rstrip() + "\n", flog

    cat = Category.VEHICLE if payload.kind is PromptKind.VSA_VEHICLE else Category.PEDESTRIAN
    questions = schema_for(cat)
    truth = [true_agent_answers(scenario, aid, payload.step) for aid in payload.agent_order]
    explain = "\n".join(_explain_agent(i, a, cat) for i, a in enumerate(truth))
    rows = [[a[q.question_id] for q in questions] for a in truth]
    _perturb_cells(rows, questions, rng, profile, flog, list(payload.agent_order))
    flog.rows_total = len(rows)
    kept = []
    for cells in rows:
        if rng.random() < profile.p_missing_row:
            flog.rows_dropped += 1
        else:
            kept.append(cells)
    table = render_table(kept, cat)
    if rng.random() < profile.p_malformed_table:
        flog.malformed = True
        table = table.replace("|", "; ")
    text = f"**Explanation of certain predictions:**\n{explain}\n\n<ANSWER>\n{table}\n<\\ANSWER>\n"
    return text, flog


def mock_generate(scenario: Scenario, payload: PromptPayload, fault_profile: FaultProfile | None = None) -> str:
    return mock_generate_logged(scenario, payload, fault_profile)[0]


def true_semantics(scenario: Scenario, payload: PromptPayload) -> list[AgentSemantics] | SceneSemantics:
    """Fault-free answers for a payload, for checking oracle output."""
    if payload.kind is PromptKind.SC:
        return SceneSemantics(true_scene_answers(scenario))
    cat = Category.VEHICLE if payload.kind is PromptKind.VSA_VEHICLE else Category.PEDESTRIAN
    return [AgentSemantics(a, cat, true_agent_answers(scenario, a, payload.step)) for a in payload.agent_order]


# ---------------------------------------------------------------------------
# backends and client


class Backend(Protocol):
    source: Source
    tag: str

    def generate(self, payload: PromptPayload) -> tuple[str, int]:
        """Raw text and the number of attempts used."""


class MockBackend:
    source = Source.MOCK

    def __init__(self, scenarios: Mapping[str, Scenario] | Sequence[Scenario], fault_profile: FaultProfile | None = None):
        if not isinstance(scenarios, Mapping):
            scenarios = {s.scenario_id: s for s in scenarios}
        self.scenarios = scenarios
        self.fault_profile = fault_profile or FaultProfile()
        self.tag = f"mock:{self.fault_profile.tag()}"

    def generate(self, payload: PromptPayload) -> tuple[str, int]:
        return mock_generate(self.scenarios[payload.scenario_id], payload, self.fault_profile), 1


@dataclass
class HttpConfig:
    endpoint: str
    model: str
    api_key_env: str = "MLLM_API_KEY"
    timeout_ms: int = 60_000
    max_retries: int = 5
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 30.0
    # "openai_chat" or "gemini"
    request_shape: str = "openai_chat"
    # forwarded verbatim (temperature, top_p, max_tokens, ...); nothing is assumed
    sampling: dict = field(default_factory=dict)


def _content_parts(payload: PromptPayload) -> list[tuple[str, str]]:
    """Interleave text chunks and image URIs in placeholder order."""
    chunks = payload.text.split(IMG)
    parts: list[tuple[str, str]] = []
    for i, chunk in enumerate(chunks):
        if chunk:
            parts.append(("text", chunk))
        if i < len(payload.image_slots):
            parts.append(("image", payload.image_slots[i].uri))
    return parts


def build_request(cfg: HttpConfig, payload: PromptPayload) -> dict:
    parts = _content_parts(payload)
    if cfg.request_shape == "openai_chat":
        content = [
            {"type": "text", "text": v} if k == "text" else {"type": "image_url", "image_url": {"url": v}}
            for k, v in parts
        ]
        return {"model": cfg.model, "messages": [{"role": "user", "content": content}], **cfg.sampling}
    if cfg.request_shape == "gemini":
        gparts = [{"text": v} if k == "text" else {"file_data": {"file_uri": v}} for k, v in parts]
        body = {"contents": [{"role": "user", "parts": gparts}]}
        if cfg.sampling:
            body["generationConfig"] = dict(cfg.sampling)
        return body
    raise ValueError(f"unknown request_shape {cfg.request_shape!r}")


def read_response(cfg: HttpConfig, body: dict) -> str:
    """Pull the generated text out of a provider reply; odd shapes pass through as JSON."""
    try:
        if cfg.request_shape == "openai_chat":
            return str(body["choices"][0]["message"]["content"])
        return "".join(p.get("text", "") for p in body["candidates"][0]["content"]["parts"])
    except (KeyError, IndexError, TypeError, AttributeError):
        return json.dumps(body, sort_keys=True)


class RateLimiter:
    """Token bucket capping in-flight requests, with an optional refill rate."""

    def __init__(self, max_concurrent: int = 4, per_second: float | None = None):
        self._sem = threading.BoundedSemaphore(max_concurrent)
        self.per_second = per_second
        self._lock = threading.Lock()
        self._next = 0.0

    def __enter__(self):
        self._sem.acquire()
        if self.per_second:
            with self._lock:
                now = time.monotonic()
                wait = max(0.0, self._next - now)
                self._next = max(now, self._next) + 1.0 / self.per_second
            if wait:
                time.sleep(wait)
        return self

    def __exit__(self, *exc):
        self._sem.release()


_RETRY_STATUS = {408, 429, 500, 502, 503, 504}


class HttpBackend:
    source = Source.LIVE

    def __init__(
        self,
        cfg: HttpConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        limiter: RateLimiter | None = None,
    ):
        self.cfg = cfg
        self.tag = f"http:{cfg.model}"
        self.client = client or httpx.Client(timeout=cfg.timeout_ms / 1000.0)
        self.sleep = sleep
        self.limiter = limiter or RateLimiter()

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            return {}
        if self.cfg.request_shape == "gemini":
            return {"x-goog-api-key": key}
        return {"Authorization": f"Bearer {key}"}

    def generate(self, payload: PromptPayload) -> tuple[str, int]:
        body = build_request(self.cfg, payload)
        attempts: list[str] = []
        for attempt in range(1, self.cfg.max_retries + 2):
            try:
                with self.limiter:
                    resp = self.client.post(self.cfg.endpoint, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                attempts.append(f"{type(exc).__name__}: {exc}")
            else:
                if resp.status_code < 400:
                    try:
                        return read_response(self.cfg, resp.json()), attempt
                    except ValueError:
                        return resp.text, attempt
                attempts.append(f"HTTP {resp.status_code}")
                if resp.status_code not in _RETRY_STATUS:
                    raise TransportError("non-retryable HTTP status", attempts)
            if attempt <= self.cfg.max_retries:
                delay = min(self.cfg.backoff_cap_s, self.cfg.backoff_base_s * 2 ** (attempt - 1))
                log.warning("MLLM request failed (%s); retrying in %.1fs", attempts[-1], delay)
                self.sleep(delay)
        raise TransportError("MLLM request failed", attempts)


class MllmClient:
    def __init__(self, backend: Backend, cache: ResponseCache | None = None, max_concurrent: int = 4):
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache(None)
        self.max_concurrent = max_concurrent

    def _cached(self, payload: PromptPayload) -> MllmExchange | None:
        hit = self.cache.get(payload_key(payload, self.backend.tag))
        if hit is None:
            return None
        return MllmExchange(
            hit.key, hit.raw_response, Source.CACHE, hit.latency_ms, hit.created_at,
            hit.scenario_id, hit.kind, hit.step, hit.attempts,
        )

    def _generate(self, payload: PromptPayload) -> MllmExchange:
        t = time.perf_counter()
        raw, attempts = self.backend.generate(payload)
        if self.backend.source is Source.MOCK:
            # mock entries stay byte-reproducible
            latency, created = 0.0, _EPOCH
        else:
            latency = round((time.perf_counter() - t) * 1000.0, 3)
            created = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        return MllmExchange(
            payload_key(payload, self.backend.tag), raw, self.backend.source, latency, created,
            payload.scenario_id, payload.kind.value, payload.step, attempts,
        )

    def query(self, payload: PromptPayload) -> MllmExchange:
        hit = self._cached(payload)
        if hit is not None:
            return hit
        ex = self._generate(payload)
        self.cache.put(ex)
        return ex

    def query_many(self, payloads: Sequence[PromptPayload]) -> list[MllmExchange]:
        """Query in parallel (bounded) and return results in input order.

        Cache appends happen in input order, so the cache file does not depend on
        thread scheduling.
        """
        results: list[MllmExchange | None] = [self._cached(p) for p in payloads]
        todo = [i for i, r in enumerate(results) if r is None]
        if self.max_concurrent <= 1 or len(todo) <= 1:
            fresh = [self._generate(payloads[i]) for i in todo]
        else:
            with ThreadPoolExecutor(max_workers=self.max_concurrent) as pool:
                fresh = list(pool.map(lambda i: self._generate(payloads[i]), todo))
        seen: dict[str, MllmExchange] = {}
        for i, ex in zip(todo, fresh):
            if ex.key in seen:
                # duplicate payload within the call: second one reads as a cache hit
                ex = seen[ex.key]
                results[i] = MllmExchange(ex.key, ex.raw_response, Source.CACHE, ex.latency_ms, ex.created_at,
                                          ex.scenario_id, ex.kind, ex.step, ex.attempts)
                continue
            seen[ex.key] = ex
            self.cache.put(ex)
            results[i] = ex
        return results  # type: ignore[return-value]


class OfflineBackend:
    """Backend for cache-only replay: any miss is an error."""

    source = Source.CACHE

    def __init__(self, tag: str):
        self.tag = tag

    def generate(self, payload: PromptPayload) -> tuple[str, int]:
        raise TransportError(f"cache miss for {payload.scenario_id}/{payload.kind.value} in offline mode", [])
