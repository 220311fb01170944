import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (
    SMALL_NUSC,
    SMALL_WOMD,
    random_instance,
    ref_average_precision,
    ref_map,
    ref_min_ade,
    ref_min_fde,
    ref_miss_rate,
    two_pass_se,
    welford_se,
)
from semforecast.metrics import (
    AgentPrediction,
    EvalProfile,
    average_precision,
    evaluate,
    hardest_split,
    jackknife_se,
    latency_shift,
    map_scores,
    min_ade,
    min_fde,
    miss_rate,
    motion_bucket,
    nusc_profile,
    relative_improvement,
    standard_error,
    womd_profile,
)
from semforecast.model import SemanticInputs
from semforecast.scene import ConfigError


def _straight(n=8, speed=1.0):
    gt = np.stack([np.arange(1, n + 1) * speed, np.zeros(n)], axis=1)
    return gt, np.zeros(n)


def test_exact_prediction_scores_zero():
    gt, h = _straight()
    p = AgentPrediction("s", "a", gt[None].copy(), np.array([1.0]), gt, h)
    for prof in (SMALL_WOMD, SMALL_NUSC):
        assert min_ade(p, 1, prof) == 0 and min_fde(p, 1, prof) == 0
        assert miss_rate([p], 1, prof) == 0
    assert map_scores([p], 1, SMALL_WOMD)[0] == 1.0


def test_constant_offset():
    gt, h = _straight()
    p = AgentPrediction("s", "a", (gt + [3.0, 4.0])[None], np.array([1.0]), gt, h)
    assert min_ade(p, 1, SMALL_NUSC) == pytest.approx(5.0)
    assert min_fde(p, 1, SMALL_NUSC) == pytest.approx(5.0)
    assert min_ade(p, 1, SMALL_WOMD) == pytest.approx(5.0)


def test_all_far_predictions_miss():
    gt, h = _straight()
    preds = [AgentPrediction("s", f"a{i}", (gt + [6.0, 8.0])[None], np.array([1.0]), gt, h) for i in range(4)]
    assert miss_rate(preds, 1, SMALL_NUSC) == 1.0
    assert map_scores(preds, 1, SMALL_NUSC) == (0.0, 0.0)


def test_top_k_uses_most_probable_modes():
    gt, h = _straight()
    trajs = np.stack([gt + 10, gt, gt + 1])
    p = AgentPrediction("s", "a", trajs, np.array([0.5, 0.1, 0.4]), gt, h)
    assert min_ade(p, 1, SMALL_NUSC) == pytest.approx(10 * math.sqrt(2))
    assert min_ade(p, 2, SMALL_NUSC) == pytest.approx(math.sqrt(2))
    assert min_ade(p, 3, SMALL_NUSC) == 0.0


def test_heading_frame_miss():
    gt, _ = _straight()
    # ground truth heads along +y at the end, so an x error is lateral
    h = np.full(8, math.pi / 2)
    lateral = AgentPrediction("s", "a", (gt + [1.5, 0.0])[None], np.array([1.0]), gt, h)
    longitudinal = AgentPrediction("s", "b", (gt + [0.0, 1.5])[None], np.array([1.0]), gt, h)
    prof = EvalProfile("x", 1.0, (8.0,), True, (1.0,), (2.0,))
    assert miss_rate([lateral], 1, prof) == 1.0
    assert miss_rate([longitudinal], 1, prof) == 0.0


def test_profiles():
    w = womd_profile()
    assert w.cut_steps(80) == [30, 50, 80]
    assert w.lat_thresholds == pytest.approx((1.0, 1.4, 2.0))
    assert w.lon_thresholds == pytest.approx((2.0, 2.8, 4.0))
    with pytest.raises(ConfigError):
        w.cut_steps(40)
    assert nusc_profile().cut_steps(12) == [12]


@pytest.mark.parametrize("profile", [SMALL_WOMD, SMALL_NUSC], ids=["womd", "nusc"])
@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 3))
def test_displacement_and_miss_match_brute_force(profile, seed, k):
    preds = random_instance(np.random.default_rng(seed), n_agents=6)
    for p in preds:
        assert abs(min_ade(p, k, profile) - ref_min_ade(p, k, profile)) <= 1e-12
        assert abs(min_fde(p, k, profile) - ref_min_fde(p, k, profile)) <= 1e-12
    assert abs(miss_rate(preds, k, profile) - ref_miss_rate(preds, k, profile)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=30))
def test_average_precision_matches_reference(entries):
    scores = [s for s, _ in entries]
    labels = [b for _, b in entries]
    n_pos = max(1, sum(labels))
    assert abs(average_precision(scores, labels, n_pos) - ref_average_precision(scores, labels, n_pos)) <= 1e-12


@pytest.mark.parametrize("profile", [SMALL_WOMD, SMALL_NUSC], ids=["womd", "nusc"])
@pytest.mark.parametrize("seed", range(10))
def test_map_matches_brute_force(profile, seed):
    preds = random_instance(np.random.default_rng(seed), n_agents=20)
    got = map_scores(preds, 3, profile)
    ref = ref_map(preds, 3, profile)
    assert abs(got[0] - ref[0]) <= 1e-9 and abs(got[1] - ref[1]) <= 1e-9
    assert 0 <= got[0] <= got[1] + 1e-12 <= 1 + 1e-12


def test_soft_map_ignores_duplicate_hits():
    gt, h = _straight()
    trajs = np.stack([gt, gt + 0.1])
    preds = [AgentPrediction("s", "a", trajs, np.array([0.3, 0.7]), gt, h)]
    hard, soft = map_scores(preds, 2, SMALL_NUSC)
    assert soft == 1.0 and hard == 1.0
    other = AgentPrediction("s", "b", np.stack([gt + 9, gt]), np.array([0.8, 0.2]), gt, h)
    hard, soft = map_scores(preds + [other], 2, SMALL_NUSC)
    assert soft >= hard


def test_map_undefined_without_predictions():
    assert map_scores([], 1, SMALL_NUSC) == (None, None)


def test_motion_buckets():
    n = 8
    gt, _ = _straight(n, speed=2.0)
    assert motion_bucket(gt, np.zeros(n)) == "straight"
    assert motion_bucket(gt * 0.1, np.zeros(n)) == "stationary"
    for deg, name in ((30, "straight_left"), (-30, "straight_right"), (90, "left"), (-90, "right"), (170, "u_turn")):
        assert motion_bucket(gt, np.full(n, math.radians(deg))) == name


def test_scale_equivariance():
    preds = random_instance(np.random.default_rng(5), n_agents=10)
    c = 3.7
    scaled = [AgentPrediction(p.scenario_id, p.agent_id, p.trajs * c, p.probs, p.gt * c, p.gt_heading) for p in preds]
    for a, b in zip(preds, scaled):
        assert min_ade(b, 2, SMALL_WOMD) == pytest.approx(c * min_ade(a, 2, SMALL_WOMD), rel=1e-12)
        assert min_fde(b, 2, SMALL_NUSC) == pytest.approx(c * min_fde(a, 2, SMALL_NUSC), rel=1e-12)
    for prof in (SMALL_WOMD, SMALL_NUSC):
        assert miss_rate(scaled, 2, prof.scaled(c)) == miss_rate(preds, 2, prof)


def test_permutation_invariance():
    preds = random_instance(np.random.default_rng(6), n_agents=15)
    shuffled = preds[:]
    random.Random(0).shuffle(shuffled)
    a = evaluate(preds, 3, SMALL_WOMD)
    b = evaluate(shuffled, 3, SMALL_WOMD)
    for key in ("minADE", "minFDE", "miss_rate", "mAP", "soft_mAP"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-12)


def test_evaluate_report_fields():
    preds = random_instance(np.random.default_rng(7), n_agents=21)
    r = evaluate(preds, 3, SMALL_WOMD, label="x")
    assert r.n_scenarios == 7 and r.n_agents == 21
    assert set(r.per_horizon) == {"3s", "5s", "8s"}
    assert all(math.isfinite(v) for v in r.se.values())
    assert 0 <= r.miss_rate <= 1 and 0 <= r.mAP <= 1
    assert r.minADE == pytest.approx(np.mean(list(r.per_scenario_minADE.values())))


def test_standard_error():
    assert standard_error([3.0, 3.0, 3.0]) == 0.0
    assert standard_error([0.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        standard_error([1.0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=int(rng.integers(2, 200))).tolist()
        assert abs(standard_error(x) - two_pass_se(x)) <= 1e-12
        assert abs(standard_error(x) - welford_se(x)) <= 1e-12


def test_jackknife_of_mean_equals_standard_error():
    x = np.random.default_rng(1).normal(size=12)
    ids = [f"s{i}" for i in range(12)]
    se = jackknife_se(ids, lambda sub: float(np.mean(sub)), list(x))
    assert se == pytest.approx(standard_error(x), rel=1e-12)
    assert jackknife_se(["a", "a"], np.mean, [1.0, 2.0]) is None


def test_hardest_split():
    vals = {f"s{i}": float(i) for i in range(10)}
    assert hardest_split(vals, 0.1) == {"s9"}
    assert hardest_split({f"s{i}": 1.0 for i in range(10)}, 0.2) == {"s0", "s1"}
    assert hardest_split(vals, 1.0) == set(vals)
    assert hardest_split({f"s{i}": float(i) for i in range(11)}, 0.1) == {"s10", "s9"}
    with pytest.raises(ValueError):
        hardest_split({})


def test_latency_shift():
    sem = {10: SemanticInputs({}, None), 5: SemanticInputs({"a": np.ones(3)}, None)}
    assert latency_shift(sem, 10, 10.0, 0.0) is sem[10]
    assert latency_shift(sem, 10, 10.0, 0.5) is sem[5]
    assert latency_shift(sem, 10, 10.0, 2.0) is None
    with pytest.raises(ValueError):
        latency_shift(sem, 10, 10.0, -1.0)


def test_relative_improvement():
    assert relative_improvement(2.0, 1.5) == 0.25
    assert relative_improvement(0.0, 1.0) == 0.0
