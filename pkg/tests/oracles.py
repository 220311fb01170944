"""Slow, loop-based reference implementations used to check the metrics module."""

import math

import numpy as np

from semforecast.metrics import AgentPrediction, EvalProfile


def top_modes(probs, k):
    idx = sorted(range(len(probs)), key=lambda j: (-probs[j], j))
    return idx[:k]


def cut_steps(profile, horizon):
    if not profile.cut_s:
        return [horizon]
    return [int(round(c * profile.hz)) for c in profile.cut_s]


def ref_min_ade(p, k, profile):
    vals = []
    for cut in cut_steps(profile, len(p.gt)):
        best = math.inf
        for m in top_modes(p.probs, k):
            d = sum(math.hypot(p.trajs[m, t, 0] - p.gt[t, 0], p.trajs[m, t, 1] - p.gt[t, 1]) for t in range(cut)) / cut
            best = min(best, d)
        vals.append(best)
    return sum(vals) / len(vals)


def ref_min_fde(p, k, profile):
    vals = []
    for cut in cut_steps(profile, len(p.gt)):
        t = cut - 1
        vals.append(min(math.hypot(p.trajs[m, t, 0] - p.gt[t, 0], p.trajs[m, t, 1] - p.gt[t, 1])
                        for m in top_modes(p.probs, k)))
    return sum(vals) / len(vals)


def ref_hit(p, m, i, cut, profile):
    t = cut - 1
    dx, dy = p.trajs[m, t, 0] - p.gt[t, 0], p.trajs[m, t, 1] - p.gt[t, 1]
    if not profile.heading_frame_miss:
        return math.hypot(dx, dy) <= profile.miss_threshold_m
    # project the error on the ground-truth heading and its normal
    h = float(p.gt_heading[t])
    dist, ang = math.hypot(dx, dy), math.atan2(dy, dx) - h
    lon, lat = dist * math.cos(ang), dist * math.sin(ang)
    return abs(lat) <= profile.lat_thresholds[i] + 1e-12 and abs(lon) <= profile.lon_thresholds[i] + 1e-12


def ref_miss_rate(preds, k, profile):
    total = 0.0
    for p in preds:
        cuts = cut_steps(profile, len(p.gt))
        misses = 0
        for i, cut in enumerate(cuts):
            if not any(ref_hit(p, m, i, cut, profile) for m in top_modes(p.probs, k)):
                misses += 1
        total += misses / len(cuts)
    return total / len(preds)


def ref_average_precision(scores, labels, n_positive):
    """Each positive contributes the best precision reached at or after its rank."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    lab = [bool(labels[i]) for i in ranked]
    precisions = []
    for r in range(1, len(lab) + 1):
        precisions.append(sum(lab[:r]) / r)
    ap = 0.0
    for r in range(len(lab)):
        if lab[r]:
            ap += max(precisions[r:])
    return ap / n_positive


def ref_bucket(p):
    gt, h = p.gt, p.gt_heading
    if math.hypot(gt[-1, 0], gt[-1, 1]) < 2.0:
        return "stationary"
    d = math.degrees(math.atan2(math.sin(h[-1]), math.cos(h[-1])))
    if abs(d) < 15:
        return "straight"
    if abs(d) <= 45:
        return "straight_left" if d > 0 else "straight_right"
    if abs(d) <= 135:
        return "left" if d > 0 else "right"
    return "u_turn"


def ref_map(preds, k, profile):
    buckets = {}
    for p in preds:
        buckets.setdefault(ref_bucket(p), []).append(p)
    hard, soft = [], []
    for group in buckets.values():
        cuts = cut_steps(profile, len(group[0].gt))
        h_aps, s_aps = [], []
        for i, cut in enumerate(cuts):
            for is_soft, acc in ((False, h_aps), (True, s_aps)):
                scores, labels = [], []
                for p in group:
                    modes = top_modes(p.probs, k)
                    hits = [m for m in modes if ref_hit(p, m, i, cut, profile)]
                    for m in modes:
                        if hits and m == hits[0]:
                            scores.append(p.probs[m])
                            labels.append(True)
                        elif m in hits and is_soft:
                            continue
                        else:
                            scores.append(p.probs[m])
                            labels.append(False)
                acc.append(ref_average_precision(scores, labels, len(group)))
        hard.append(sum(h_aps) / len(h_aps))
        soft.append(sum(s_aps) / len(s_aps))
    return sum(hard) / len(hard), sum(soft) / len(soft)


def welford_se(values):
    n, mean, m2 = 0, 0.0, 0.0
    for x in values:
        n += 1
        d = x - mean
        mean += d / n
        m2 += d * (x - mean)
    return math.sqrt(m2 / (n - 1)) / math.sqrt(n)


def two_pass_se(values):
    n = len(values)
    mean = sum(values) / n
    return math.sqrt(sum((x - mean) ** 2 for x in values) / (n - 1)) / math.sqrt(n)


SMALL_WOMD = EvalProfile("womd", 1.0, (3.0, 5.0, 8.0), True, (1.0, 1.4, 2.0), (2.0, 2.8, 4.0))
SMALL_NUSC = EvalProfile("nusc", 1.0, (), False, (), (), 2.0)


def random_instance(rng, n_agents=20, k=3, horizon=8, spread=2.0):
    """Random agents whose modes scatter around the ground truth."""
    preds = []
    for a in range(n_agents):
        turn = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, 3.0)
        t = np.arange(1, horizon + 1)
        heading = turn * t / horizon
        gt = np.stack([np.cumsum(speed * np.cos(heading)), np.cumsum(speed * np.sin(heading))], axis=1)
        trajs = gt[None] + rng.normal(scale=spread, size=(k, horizon, 2)).cumsum(1) / 2
        probs = rng.dirichlet(np.ones(k))
        preds.append(AgentPrediction(f"s{a % 7}", f"a{a}", trajs, probs, gt, heading))
    return preds
