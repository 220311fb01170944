"""Reusable experiment pipeline: synthetic splits, semantics, paired training, ablations."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .features import extract_features, index_features, ParseRecord
from .metrics import AgentPrediction, EvalProfile, MetricsReport, evaluate, latency_shift
from .mllm import FaultProfile, MllmClient, MockBackend, ResponseCache
from .model import Batch, Forecaster, PredictorConfig, SemanticInputs, collate
from .scene import GeneratorConfig, Scenario, dumps_scenario, generate_synthetic
from .schema import REASONING_GROUPS
from .train import TrainConfig, mean_abs_alpha, predict, train

# rows of the reasoning-group ablation; the empty set is the semantics-free baseline
DEFAULT_GROUP_GRID: tuple[tuple[str, ...], ...] = (
    (),
    ("signal", "intent"),
    ("intent", "type"),
    ("signal", "type"),
    ("scene",),
    REASONING_GROUPS,
)
DEFAULT_GAIN_MODES = ("none", "added", "constant", "learned")
DEFAULT_DELAYS_S = (0.0, 1.0, 2.0)


def group_label(groups: Sequence[str]) -> str:
    return "+".join(groups) if groups else "none"


def split_fingerprint(scenarios: Sequence[Scenario]) -> str:
    h = hashlib.sha256()
    for sc in scenarios:
        h.update(dumps_scenario(sc).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def make_splits(gen: GeneratorConfig, n_train: int, n_eval: int, seed: int) -> tuple[list[Scenario], list[Scenario]]:
    """Disjoint train / eval scenario sets (ids carry their own generator seed)."""
    tr = generate_synthetic(replace(gen, n_scenarios=n_train), 2 * seed + 1000)
    ev = generate_synthetic(replace(gen, n_scenarios=n_eval), 2 * seed + 1001)
    return tr, ev


SemanticIndex = Mapping[str, Mapping[int, SemanticInputs]]


def mock_semantics(
    scenarios: Sequence[Scenario],
    fault: FaultProfile | None = None,
    delays_s: Sequence[float] = (0.0,),
    cache: ResponseCache | None = None,
) -> tuple[dict[str, dict[int, SemanticInputs]], list[ParseRecord]]:
    client = MllmClient(MockBackend(scenarios, fault or FaultProfile()), cache, max_concurrent=1)
    feats, records = extract_features(scenarios, client, delays_s)
    return index_features(feats), records


def semantics_for(scenarios: Sequence[Scenario], index: SemanticIndex, delay_s: float = 0.0) -> list[SemanticInputs | None]:
    """Per-scenario model inputs as they were ``delay_s`` before t0."""
    return [latency_shift(index.get(sc.scenario_id, {}), sc.t0, sc.step_hz, delay_s) for sc in scenarios]


@dataclass
class Variant:
    """One trained model configuration of an ablation."""

    label: str
    use_semantics: bool = True
    groups: tuple[str, ...] = REASONING_GROUPS
    gain_mode: str = "learned"

    def model_config(self, base: PredictorConfig) -> PredictorConfig:
        if not self.use_semantics:
            return replace(base, use_semantics=False)
        return replace(base, use_semantics=True, groups=tuple(self.groups), gain_mode=self.gain_mode)


def group_variants(grid: Sequence[Sequence[str]] = DEFAULT_GROUP_GRID) -> list[Variant]:
    return [Variant(group_label(g), bool(g), tuple(g)) for g in grid]


def gain_variants(modes: Sequence[str] = DEFAULT_GAIN_MODES) -> list[Variant]:
    out = []
    for m in modes:
        if m == "none":
            out.append(Variant("gain=none", use_semantics=False))
        else:
            out.append(Variant(f"gain={m}", gain_mode=m))
    return out


@dataclass
class TrainedVariant:
    variant: Variant
    model: Forecaster
    log: list[dict]
    alpha: float


def train_variant(
    variant: Variant,
    train_sc: Sequence[Scenario],
    train_index: SemanticIndex | None,
    base_cfg: PredictorConfig,
    train_cfg: TrainConfig,
    batch: Batch | None = None,
    log_path=None,
    log_comment: str = "",
) -> TrainedVariant:
    cfg = variant.model_config(base_cfg)
    cfg = replace(cfg, history_len=train_sc[0].t0, future_len=train_sc[0].future_len)
    sem = semantics_for(train_sc, train_index) if (variant.use_semantics and train_index is not None) else None
    if batch is None:
        batch = collate(train_sc)
    res = train(train_sc, sem, cfg, train_cfg, batch=batch, log_path=log_path, log_comment=log_comment)
    b = batch.with_semantics(sem) if sem is not None else batch
    return TrainedVariant(variant, res.model, res.log, mean_abs_alpha(res.model, b))


def predict_variant(
    tv: TrainedVariant,
    eval_sc: Sequence[Scenario],
    eval_index: SemanticIndex | None,
    delay_s: float = 0.0,
    k_prime: int | None = None,
    threshold_m: float = 1.0,
    batch: Batch | None = None,
) -> list[AgentPrediction]:
    if batch is None:
        batch = collate(eval_sc)
    if tv.variant.use_semantics and eval_index is not None:
        batch = batch.with_semantics(semantics_for(eval_sc, eval_index, delay_s))
    return predict(tv.model, batch, eval_sc, k_prime, threshold_m)


@dataclass
class PairResult:
    """Baseline and semantics-augmented models trained on the same data and seed.

    ``semantic[name][delay]`` holds predictions of the model trained with fault
    profile ``name`` and evaluated with semantics delayed by ``delay`` seconds.
    """

    seed: int
    eval_fingerprint: str
    baseline: list[AgentPrediction]
    semantic: dict[str, dict[float, list[AgentPrediction]]] = field(default_factory=dict)
    alpha: dict[str, float] = field(default_factory=dict)

    def report(self, preds: list[AgentPrediction], k: int, profile: EvalProfile, label: str, with_map: bool = False) -> MetricsReport:
        r = evaluate(preds, k, profile, with_map, label=label)
        r.eval_fingerprint = self.eval_fingerprint
        return r


def run_pair(
    gen: GeneratorConfig,
    n_train: int,
    n_eval: int,
    seed: int,
    base_cfg: PredictorConfig,
    train_cfg: TrainConfig,
    faults: Mapping[str, FaultProfile] | None = None,
    delays_s: Sequence[float] = (0.0,),
    k_prime: int | None = None,
    threshold_m: float = 1.0,
) -> PairResult:
    """Train one baseline and one learned-gain model per fault profile, sharing data and seed."""
    faults = faults or {"clean": FaultProfile()}
    train_sc, eval_sc = make_splits(gen, n_train, n_eval, seed)
    tcfg = replace(train_cfg, seed=seed)
    btr, bev = collate(train_sc), collate(eval_sc)
    base = train_variant(Variant("baseline", use_semantics=False), train_sc, None, base_cfg, tcfg, btr)
    result = PairResult(seed, split_fingerprint(eval_sc), predict_variant(base, eval_sc, None, 0.0, k_prime, threshold_m, bev))
    for name, fault in faults.items():
        tr_idx, _ = mock_semantics(train_sc, fault, (0.0,))
        ev_idx, _ = mock_semantics(eval_sc, fault, delays_s)
        sem = train_variant(Variant("semantics"), train_sc, tr_idx, base_cfg, tcfg, btr)
        result.semantic[name] = {
            d: predict_variant(sem, eval_sc, ev_idx, d, k_prime, threshold_m, bev) for d in delays_s
        }
        result.alpha[name] = sem.alpha
    return result
