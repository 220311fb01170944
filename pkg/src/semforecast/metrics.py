"""Displacement, miss, and ranking metrics plus the analysis helpers.

All per-agent quantities are computed in the agent's t0 frame, which leaves
every metric unchanged (displacements and heading changes are rigid-motion
invariant).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import SemanticInputs
from .scene import ConfigError, wrap_angle

BUCKETS = ("stationary", "straight", "straight_left", "straight_right", "left", "right", "u_turn")


@dataclass(frozen=True)
class EvalProfile:
    """How a horizon is cut and what counts as a miss.

    ``cut_s`` empty means a single cut at the end of the horizon.  With
    ``heading_frame_miss`` the miss test compares lateral / longitudinal error in
    the ground-truth heading frame against per-cut thresholds; otherwise the
    final displacement is compared with ``miss_threshold_m``.
    """

    name: str
    hz: float
    cut_s: tuple[float, ...] = ()
    heading_frame_miss: bool = False
    lat_thresholds: tuple[float, ...] = ()
    lon_thresholds: tuple[float, ...] = ()
    miss_threshold_m: float = 2.0

    def cut_steps(self, horizon: int) -> list[int]:
        if not self.cut_s:
            return [horizon]
        steps = [int(round(c * self.hz)) for c in self.cut_s]
        if max(steps) > horizon:
            raise ConfigError(f"profile {self.name}: cut point {max(self.cut_s)} s exceeds horizon {horizon / self.hz} s")
        return steps

    def scaled(self, c: float) -> "EvalProfile":
        return EvalProfile(
            self.name, self.hz, self.cut_s, self.heading_frame_miss,
            tuple(c * v for v in self.lat_thresholds), tuple(c * v for v in self.lon_thresholds),
            c * self.miss_threshold_m,
        )


def womd_profile(hz: float = 10.0, lat_3s: float = 1.0, lon_3s: float = 2.0) -> EvalProfile:
    # thresholds double from 3 s to 8 s, linear in between
    def interp(v, t):
        return v * (1.0 + (t - 3.0) / 5.0)

    cuts = (3.0, 5.0, 8.0)
    return EvalProfile("womd", hz, cuts, True, tuple(interp(lat_3s, t) for t in cuts), tuple(interp(lon_3s, t) for t in cuts))


def nusc_profile(hz: float = 2.0, threshold_m: float = 2.0) -> EvalProfile:
    return EvalProfile("nusc", hz, (), False, (), (), threshold_m)


PROFILES = {"womd": womd_profile, "nusc": nusc_profile}


@dataclass
class AgentPrediction:
    """Predicted modes and ground truth for one agent, both in its t0 frame."""

    scenario_id: str
    agent_id: str
    trajs: np.ndarray  # (K, T', 2)
    probs: np.ndarray  # (K,)
    gt: np.ndarray  # (T', 2)
    gt_heading: np.ndarray  # (T',) relative to the t0 heading

    def top(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        order = sorted(range(len(self.probs)), key=lambda j: (-self.probs[j], j))[:k]
        return self.trajs[order], self.probs[order]


# ---------------------------------------------------------------------------
# displacement


def _ade_at(trajs: np.ndarray, gt: np.ndarray, cut: int) -> np.ndarray:
    return np.linalg.norm(trajs[:, :cut] - gt[None, :cut], axis=-1).mean(-1)


def _fde_at(trajs: np.ndarray, gt: np.ndarray, cut: int) -> np.ndarray:
    return np.linalg.norm(trajs[:, cut - 1] - gt[None, cut - 1], axis=-1)


def min_ade(pred: AgentPrediction, k: int, profile: EvalProfile) -> float:
    trajs, _ = pred.top(k)
    cuts = profile.cut_steps(len(pred.gt))
    return float(np.mean([_ade_at(trajs, pred.gt, c).min() for c in cuts]))


def min_fde(pred: AgentPrediction, k: int, profile: EvalProfile) -> float:
    trajs, _ = pred.top(k)
    cuts = profile.cut_steps(len(pred.gt))
    return float(np.mean([_fde_at(trajs, pred.gt, c).min() for c in cuts]))


def mode_hits(pred: AgentPrediction, trajs: np.ndarray, profile: EvalProfile) -> np.ndarray:
    """(n_cuts, K) boolean: mode is not a miss at that cut."""
    cuts = profile.cut_steps(len(pred.gt))
    rows = []
    for i, c in enumerate(cuts):
        err = trajs[:, c - 1] - pred.gt[c - 1]
        if profile.heading_frame_miss:
            h = float(pred.gt_heading[c - 1])
            lon = err[:, 0] * math.cos(h) + err[:, 1] * math.sin(h)
            lat = -err[:, 0] * math.sin(h) + err[:, 1] * math.cos(h)
            rows.append((np.abs(lat) <= profile.lat_thresholds[i]) & (np.abs(lon) <= profile.lon_thresholds[i]))
        else:
            rows.append(np.linalg.norm(err, axis=-1) <= profile.miss_threshold_m)
    return np.asarray(rows)


def agent_miss(pred: AgentPrediction, k: int, profile: EvalProfile) -> float:
    """Fraction of cut points at which none of the top-k modes hits."""
    trajs, _ = pred.top(k)
    return float(np.mean(~mode_hits(pred, trajs, profile).any(axis=1)))


def miss_rate(preds: Sequence[AgentPrediction], k: int, profile: EvalProfile) -> float:
    if not preds:
        raise ValueError("no predictions")
    return float(np.mean([agent_miss(p, k, profile) for p in preds]))


# ---------------------------------------------------------------------------
# motion buckets and mAP


def motion_bucket(gt: np.ndarray, gt_heading: np.ndarray, stationary_m: float = 2.0) -> str:
    if float(np.linalg.norm(gt[-1])) < stationary_m:
        return "stationary"
    dh = math.degrees(float(wrap_angle(gt_heading[-1])))
    a = abs(dh)
    if a < 15.0:
        return "straight"
    if a <= 45.0:
        return "straight_left" if dh > 0 else "straight_right"
    if a <= 135.0:
        return "left" if dh > 0 else "right"
    return "u_turn"


def average_precision(scores: Sequence[float], labels: Sequence[bool], n_positive: int) -> float:
    """Area under the interpolated precision-recall envelope.

    Entries are ranked by descending score (ties keep input order).
    """
    if n_positive <= 0:
        raise ValueError("n_positive must be positive")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(labels, dtype=np.float64)[order]
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_positive
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _ranked_entries(preds: Sequence[AgentPrediction], k: int, profile: EvalProfile, cut_index: int, soft: bool):
    """(score, label) entries for one bucket at one cut."""
    entries = []
    for p in preds:
        trajs, probs = p.top(k)
        hits = mode_hits(p, trajs, profile)[cut_index]
        first = True
        # modes visited by descending probability, so the first hit is the best-ranked one
        for j in range(len(probs)):
            if hits[j]:
                if first:
                    entries.append((float(probs[j]), True))
                    first = False
                elif not soft:
                    entries.append((float(probs[j]), False))
            else:
                entries.append((float(probs[j]), False))
    return entries


def map_scores(preds: Sequence[AgentPrediction], k: int, profile: EvalProfile) -> tuple[float | None, float | None]:
    """(mAP, soft-mAP) averaged over non-empty motion buckets; (None, None) if all empty."""
    by_bucket: dict[str, list[AgentPrediction]] = {}
    for p in preds:
        by_bucket.setdefault(motion_bucket(p.gt, p.gt_heading), []).append(p)
    if not by_bucket:
        return None, None
    n_cuts = len(profile.cut_steps(len(preds[0].gt)))
    hard, soft = [], []
    for name in BUCKETS:
        group = by_bucket.get(name)
        if not group:
            continue
        ap_h, ap_s = [], []
        for c in range(n_cuts):
            for is_soft, acc in ((False, ap_h), (True, ap_s)):
                ent = _ranked_entries(group, k, profile, c, is_soft)
                acc.append(average_precision([e[0] for e in ent], [e[1] for e in ent], len(group)))
        hard.append(float(np.mean(ap_h)))
        soft.append(float(np.mean(ap_s)))
    return float(np.mean(hard)), float(np.mean(soft))


def bucket_ap(preds: Sequence[AgentPrediction], k: int, profile: EvalProfile) -> dict[str, float]:
    out = {}
    for name in BUCKETS:
        group = [p for p in preds if motion_bucket(p.gt, p.gt_heading) == name]
        if group:
            out[name] = map_scores(group, k, profile)[0]
    return out


# ---------------------------------------------------------------------------
# analysis helpers


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 denominator) over sqrt(n)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError("standard error needs at least two values")
    return float(x.std(ddof=1) / math.sqrt(x.size))


def jackknife_se(groups: Sequence[str], statistic, items: Sequence) -> float | None:
    """Leave-one-group-out jackknife standard error of ``statistic(items)``."""
    ids = sorted(set(groups))
    if len(ids) < 2:
        return None
    vals = []
    for g in ids:
        sub = [it for it, gi in zip(items, groups) if gi != g]
        v = statistic(sub)
        if v is None:
            return None
        vals.append(v)
    v = np.asarray(vals)
    n = len(v)
    return float(math.sqrt((n - 1) / n * np.sum((v - v.mean()) ** 2)))


def hardest_split(per_scenario: Mapping[str, float], fraction: float = 0.1) -> set[str]:
    """Top ceil(fraction * N) scenario ids by value, ties broken by id."""
    if not per_scenario:
        raise ValueError("empty input")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = math.ceil(fraction * len(per_scenario) - 1e-9)
    ranked = sorted(per_scenario.items(), key=lambda kv: (-kv[1], kv[0]))
    return {sid for sid, _ in ranked[:n]}


def latency_shift(
    semantics_by_step: Mapping[int, SemanticInputs],
    t0: int,
    hz: float,
    delay_s: float,
) -> SemanticInputs | None:
    """Semantics computed ``delay_s`` before t0, or None (zero features) if absent."""
    if delay_s < 0:
        raise ValueError("delay must be non-negative")
    return semantics_by_step.get(t0 - int(round(delay_s * hz)))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    k: int
    profile: str
    n_scenarios: int
    n_agents: int
    minADE: float
    minFDE: float
    miss_rate: float
    mAP: float | None
    soft_mAP: float | None
    se: dict[str, float | None] = field(default_factory=dict)
    per_horizon: dict[str, dict[str, float]] = field(default_factory=dict)
    per_bucket: dict[str, dict[str, float]] = field(default_factory=dict)
    per_scenario_minADE: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    eval_fingerprint: str = ""
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _per_scenario(preds: Sequence[AgentPrediction], fn) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for p in preds:
        acc.setdefault(p.scenario_id, []).append(fn(p))
    return {sid: float(np.mean(v)) for sid, v in sorted(acc.items())}


def evaluate(
    preds: Sequence[AgentPrediction],
    k: int,
    profile: EvalProfile,
    with_map: bool = True,
    label: str = "",
) -> MetricsReport:
    """Full report: scenario-averaged displacement / miss metrics plus mAP."""
    if not preds:
        raise ValueError("no predictions to evaluate")
    ade = _per_scenario(preds, lambda p: min_ade(p, k, profile))
    fde = _per_scenario(preds, lambda p: min_fde(p, k, profile))
    miss = _per_scenario(preds, lambda p: agent_miss(p, k, profile))
    n = len(ade)

    def se(v):
        return standard_error(list(v.values())) if n >= 2 else None

    m_ap = s_ap = None
    se_map = se_soft = None
    buckets: dict[str, dict[str, float]] = {}
    if with_map:
        m_ap, s_ap = map_scores(preds, k, profile)
        groups = [p.scenario_id for p in preds]
        se_map = jackknife_se(groups, lambda sub: map_scores(sub, k, profile)[0] if sub else None, preds)
        se_soft = jackknife_se(groups, lambda sub: map_scores(sub, k, profile)[1] if sub else None, preds)
        aps = bucket_ap(preds, k, profile)
        for name in BUCKETS:
            members = [p for p in preds if motion_bucket(p.gt, p.gt_heading) == name]
            if members:
                buckets[name] = {
                    "count": len(members),
                    "minADE": float(np.mean([min_ade(p, k, profile) for p in members])),
                    "AP": aps[name],
                }
    horizon = {}
    cuts = profile.cut_steps(len(preds[0].gt))
    for i, c in enumerate(cuts):
        sub = EvalProfile(profile.name, profile.hz, (), profile.heading_frame_miss,
                          profile.lat_thresholds[i : i + 1], profile.lon_thresholds[i : i + 1], profile.miss_threshold_m)
        cut_preds = [
            AgentPrediction(p.scenario_id, p.agent_id, p.trajs[:, :c], p.probs, p.gt[:c], p.gt_heading[:c]) for p in preds
        ]
        horizon[f"{c / profile.hz:g}s"] = {
            "minADE": float(np.mean(list(_per_scenario(cut_preds, lambda p: min_ade(p, k, sub)).values()))),
            "minFDE": float(np.mean(list(_per_scenario(cut_preds, lambda p: min_fde(p, k, sub)).values()))),
            "miss_rate": float(np.mean(list(_per_scenario(cut_preds, lambda p: agent_miss(p, k, sub)).values()))),
        }
    return MetricsReport(
        k=k,
        profile=profile.name,
        n_scenarios=n,
        n_agents=len(preds),
        minADE=float(np.mean(list(ade.values()))),
        minFDE=float(np.mean(list(fde.values()))),
        miss_rate=float(np.mean(list(miss.values()))),
        mAP=m_ap,
        soft_mAP=s_ap,
        se={"minADE": se(ade), "minFDE": se(fde), "miss_rate": se(miss), "mAP": se_map, "soft_mAP": se_soft},
        per_horizon=horizon,
        per_bucket=buckets,
        per_scenario_minADE=ade,
        label=label,
    )


def relative_improvement(baseline: float, other: float) -> float:
    return (baseline - other) / baseline if baseline else 0.0


def subset(preds: Iterable[AgentPrediction], scenario_ids: set[str]) -> list[AgentPrediction]:
    return [p for p in preds if p.scenario_id in scenario_ids]
