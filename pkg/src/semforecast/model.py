"""Encoder-decoder trajectory forecaster with gated semantic side inputs.

Agent and map polylines become tokens, a transformer encoder mixes them, and a
query decoder emits K Gaussian-mixture trajectory modes per agent.  Semantic
multi-hot vectors enter through a linear embedding scaled by a learned gain
``alpha = tanh(mlp(z))`` before being added to the agent tokens (and, for the
scene vector, to the pooled scene feature the decoder reads).

Every agent decodes in its own frame at t0: origin at its current position,
x axis along its heading.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .scene import AgentCategory, LightState, MapKind, Scenario, wrap_angle
from .schema import D_AGENT, D_SCENE, Category, REASONING_GROUPS, group_mask

POS_SCALE = 50.0
VEL_SCALE = 10.0
MAP_POINTS = 10
SIGMA_FLOOR = 1e-3
GAIN_MODES = ("learned", "constant", "added")


@dataclass
class PredictorConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 2048
    n_modes: int = 6
    gain_hidden: int = 32
    use_semantics: bool = True
    # learned: tanh(mlp(z)); constant: tanh(c) with one trainable c per gate; added: 1
    gain_mode: str = "learned"
    # reasoning groups whose answers reach the model (others are zeroed)
    groups: tuple[str, ...] = REASONING_GROUPS
    history_len: int = 10
    future_len: int = 80

    def __post_init__(self):
        self.groups = tuple(self.groups)
        if self.gain_mode not in GAIN_MODES:
            raise ValueError(f"gain_mode must be one of {GAIN_MODES}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = list(self.groups)
        return d


class GainMLP(nn.Module):
    """Bias-free two-layer perceptron d -> h -> 1, so a zero input gives a zero gain."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, 1, bias=False)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(z))).squeeze(-1)


class ConstantGain(nn.Module):
    def __init__(self):
        super().__init__()
        self.c = nn.Parameter(torch.zeros(()))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.c.expand(z.shape[:-1])


class UnitGain(nn.Module):
    """Marker for a fixed gain of one (handled in :func:`gate_value`)."""

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.ones(z.shape[:-1], dtype=z.dtype, device=z.device)


def gate_value(gain: nn.Module, z: torch.Tensor) -> torch.Tensor:
    if isinstance(gain, UnitGain):
        return torch.ones(z.shape[:-1], dtype=z.dtype, device=z.device)
    return torch.tanh(gain(z))


def gated_augment(f: torch.Tensor, z: torch.Tensor, gain: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    """``f + alpha * z`` with ``alpha = tanh(gain(z))``; returns (f', alpha)."""
    if f.shape != z.shape:
        raise ValueError(f"feature shape {tuple(f.shape)} != embedding shape {tuple(z.shape)}")
    alpha = gate_value(gain, z)
    return f + alpha.unsqueeze(-1) * z, alpha


def embed_semantics(x: torch.Tensor, emb: nn.Linear) -> torch.Tensor:
    if x.shape[-1] != emb.in_features:
        raise ValueError(f"semantic vector has {x.shape[-1]} entries, embedding expects {emb.in_features}")
    return emb(x)


def _mlp(d_in: int, d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d), nn.ReLU(), nn.Linear(d, d))


def agent_feature_dim(history_len: int) -> int:
    return 7 * history_len + 4 + 2 + 3


MAP_FEATURE_DIM = 2 * MAP_POINTS + 3 + 5


class Forecaster(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.agent_proj = _mlp(agent_feature_dim(cfg.history_len), d)
        self.map_proj = _mlp(MAP_FEATURE_DIM, d)
        self.encoder = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(d, cfg.n_heads, cfg.ffn_dim, dropout=0.0, batch_first=True),
            cfg.n_layers,
            enable_nested_tensor=False,
        )
        self.queries = nn.Parameter(torch.randn(cfg.n_modes, d) * 0.1)
        self.decoder = nn.TransformerDecoder(
            nn.TransformerDecoderLayer(d, cfg.n_heads, cfg.ffn_dim, dropout=0.0, batch_first=True),
            cfg.n_decoder_layers,
        )
        self.traj_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, cfg.future_len * 4))
        self.logit_head = nn.Linear(d, 1)
        with torch.no_grad():
            # start with sigma near 2 m so early losses stay moderate
            self.traj_head[-1].bias.view(cfg.future_len, 4)[:, 2:] = math.log(math.expm1(2.0))
        if cfg.use_semantics:
            self.emb_agent = nn.Linear(D_AGENT, d, bias=False)
            self.emb_scene = nn.Linear(D_SCENE, d, bias=False)
            self.gain_agent = self._make_gain()
            self.gain_scene = self._make_gain()
            self.register_buffer("agent_mask", torch.from_numpy(group_mask(Category.VEHICLE, cfg.groups)))
            self.register_buffer("scene_mask", torch.from_numpy(group_mask(Category.SCENE, cfg.groups)))

    def _make_gain(self) -> nn.Module:
        if self.cfg.gain_mode == "learned":
            return GainMLP(self.cfg.d_model, self.cfg.gain_hidden)
        if self.cfg.gain_mode == "constant":
            return ConstantGain()
        return UnitGain()

    def semantic_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.split(".")[0] in
                ("emb_agent", "emb_scene", "gain_agent", "gain_scene")]

    def forward(self, batch: dict) -> dict:
        cfg = self.cfg
        agent_tok = self.agent_proj(batch["agent_feats"])  # (B, A, d)
        map_tok = self.map_proj(batch["map_feats"])  # (B, P, d)
        B, A, _ = agent_tok.shape
        alpha_a = torch.zeros(B, A, dtype=agent_tok.dtype)
        alpha_s = torch.zeros(B, dtype=agent_tok.dtype)
        if cfg.use_semantics:
            xa = batch["agent_sem"] * self.agent_mask
            za = embed_semantics(xa, self.emb_agent)
            agent_tok, alpha_a = gated_augment(agent_tok, za, self.gain_agent)
        tokens = torch.cat([agent_tok, map_tok], dim=1)
        pad = torch.cat([~batch["agent_valid"], ~batch["map_valid"]], dim=1)
        memory = self.encoder(tokens, src_key_padding_mask=pad)
        keep = (~pad).unsqueeze(-1).to(memory.dtype)
        f_scene = (memory * keep).sum(1) / keep.sum(1).clamp_min(1.0)
        if cfg.use_semantics:
            xs = batch["scene_sem"] * self.scene_mask
            zs = embed_semantics(xs, self.emb_scene)
            f_scene, alpha_s = gated_augment(f_scene, zs, self.gain_scene)

        d = cfg.d_model
        K = cfg.n_modes
        q = self.queries.view(1, 1, K, d) + memory[:, :A].unsqueeze(2) + f_scene.view(B, 1, 1, d)
        q = q.reshape(B * A, K, d)
        mem = memory.unsqueeze(1).expand(B, A, *memory.shape[1:]).reshape(B * A, *memory.shape[1:])
        mpad = pad.unsqueeze(1).expand(B, A, pad.shape[1]).reshape(B * A, pad.shape[1])
        h = self.decoder(q, mem, memory_key_padding_mask=mpad)
        out = self.traj_head(h).view(B, A, K, cfg.future_len, 4)
        # residual around a constant-velocity extrapolation
        mean = out[..., :2] * POS_SCALE + batch["anchor"].unsqueeze(2)
        sigma = F.softplus(out[..., 2:]) + SIGMA_FLOOR
        logits = self.logit_head(h).view(B, A, K)
        return {
            "mean": mean,
            "sigma": sigma,
            "log_prob": torch.log_softmax(logits, dim=-1),
            "alpha_agent": alpha_a,
            "alpha_scene": alpha_s,
        }


def count_parameters(model: nn.Module, names: Sequence[str] | None = None) -> int:
    if names is None:
        return sum(p.numel() for p in model.parameters())
    params = dict(model.named_parameters())
    return sum(params[n].numel() for n in names)


# ---------------------------------------------------------------------------
# loss


def mixture_loss(out: dict, batch: dict, scenario_ids: Sequence[str] | None = None) -> torch.Tensor:
    """Hard-assignment mixture loss, averaged over valid agents.

    The mode with the lowest average displacement to the ground truth is chosen;
    the loss is ``-log p`` of that mode plus the summed per-step negative log
    density of its diagonal Gaussians at the ground-truth points.
    """
    gt = batch["future"]  # (B, A, T', 2) agent frame
    fmask = batch["future_valid"].to(gt.dtype)  # (B, A, T')
    valid = batch["agent_valid"] & (fmask.sum(-1) > 0)
    mean, sigma = out["mean"], out["sigma"]
    err = torch.linalg.vector_norm(mean - gt.unsqueeze(2), dim=-1)  # (B, A, K, T')
    ade = (err * fmask.unsqueeze(2)).sum(-1) / fmask.sum(-1, keepdim=True).clamp_min(1.0)
    kstar = ade.detach().argmin(-1)  # (B, A)
    idx = kstar[..., None, None, None].expand(-1, -1, 1, *mean.shape[3:])
    mu = mean.gather(2, idx).squeeze(2)
    sg = sigma.gather(2, idx).squeeze(2)
    z = (gt - mu) / sg
    nll_step = (math.log(2 * math.pi) + torch.log(sg).sum(-1) + 0.5 * (z**2).sum(-1)) * fmask
    reg = nll_step.sum(-1)
    cls = -out["log_prob"].gather(-1, kstar.unsqueeze(-1)).squeeze(-1)
    per_agent = (cls + reg) * valid.to(gt.dtype)
    n = valid.sum()
    loss = per_agent.sum() / n.clamp_min(1).to(gt.dtype)
    if not torch.isfinite(loss):
        bad = ""
        if scenario_ids is not None:
            rows = (~torch.isfinite(per_agent)).any(-1).nonzero().flatten().tolist()
            bad = ", ".join(scenario_ids[r] for r in rows) or "unknown"
        raise TrainingError(f"non-finite loss (scenarios: {bad})")
    return loss


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batching


def _resample(poly: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], axis=1)


_KIND = {MapKind.LANE: 0, MapKind.ROAD_BOUNDARY: 1, MapKind.CROSSWALK: 2}
_LIGHT = {None: 0, LightState.RED: 1, LightState.YELLOW: 2, LightState.GREEN: 3, LightState.UNKNOWN: 4}
_CAT = {AgentCategory.VEHICLE: 0, AgentCategory.PEDESTRIAN: 1, AgentCategory.OTHER: 2}


def _rotate(xy: np.ndarray, heading: float) -> np.ndarray:
    """Scene-frame vectors into a frame whose x axis points along ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    return np.stack([c * xy[..., 0] + s * xy[..., 1], -s * xy[..., 0] + c * xy[..., 1]], axis=-1)


def agent_features(sc: Scenario, aid: str) -> tuple[np.ndarray, np.ndarray, float, bool]:
    """Token features, t0 origin, t0 heading and validity for one agent."""
    t0 = sc.t0
    tr = sc.agents[aid]
    w = tr.window(1, t0)
    valid_now = bool(w.valid[-1]) if len(w.steps) == t0 else False
    origin = w.position[-1].copy() if valid_now else np.zeros(2)
    heading = float(w.heading[-1]) if valid_now else 0.0
    if not valid_now:
        return np.zeros(agent_feature_dim(t0), np.float64), origin, heading, False
    m = w.valid[:, None].astype(np.float64)
    rel = _rotate(w.position - origin, heading) / POS_SCALE
    vel = _rotate(w.velocity, heading) / VEL_SCALE
    dh = wrap_angle(w.heading - heading)
    hist = np.concatenate([rel, vel, np.cos(dh)[:, None], np.sin(dh)[:, None], np.ones((t0, 1))], axis=1) * m
    now = np.array([origin[0] / POS_SCALE, origin[1] / POS_SCALE, math.cos(heading), math.sin(heading)])
    to_center = _rotate(-origin, heading) / POS_SCALE
    cat = np.zeros(3)
    cat[_CAT[tr.category]] = 1.0
    return np.concatenate([hist.ravel(), now, to_center, cat]), origin, heading, True


def map_features(sc: Scenario) -> np.ndarray:
    lights = {t.element_id: t.state for t in sc.traffic_lights if t.step == sc.t0}
    rows = []
    for m in sc.map_elements:
        pts = _resample(np.asarray(m.polyline, dtype=np.float64), MAP_POINTS) / POS_SCALE
        kind = np.zeros(3)
        kind[_KIND[m.kind]] = 1.0
        light = np.zeros(5)
        light[_LIGHT[lights.get(m.element_id)]] = 1.0
        rows.append(np.concatenate([pts.ravel(), kind, light]))
    return np.asarray(rows, dtype=np.float64).reshape(-1, MAP_FEATURE_DIM)


@dataclass
class SemanticInputs:
    """Multi-hot inputs for one scenario; absent agents and scene mean all zeros."""

    agents: dict[str, np.ndarray] = field(default_factory=dict)
    scene: np.ndarray | None = None


@dataclass
class Batch:
    tensors: dict
    scenario_ids: list[str]
    agent_ids: list[list[str]]
    origins: np.ndarray  # (B, A, 2)
    headings: np.ndarray  # (B, A)

    def __len__(self):
        return len(self.scenario_ids)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        t = torch.as_tensor(idx)
        return Batch(
            {k: v[t] for k, v in self.tensors.items()},
            [self.scenario_ids[i] for i in idx],
            [self.agent_ids[i] for i in idx],
            self.origins[idx],
            self.headings[idx],
        )

    def with_semantics(self, semantics: Sequence[SemanticInputs | None]) -> "Batch":
        """Same batch with the semantic tensors replaced."""
        B, A = self.origins.shape[:2]
        dt = self.tensors["agent_sem"].dtype
        sem_a = np.zeros((B, A, D_AGENT))
        sem_s = np.zeros((B, D_SCENE))
        for b, sem in enumerate(semantics):
            if sem is None:
                continue
            for j, aid in enumerate(self.agent_ids[b]):
                if aid in sem.agents:
                    sem_a[b, j] = sem.agents[aid]
            if sem.scene is not None:
                sem_s[b] = sem.scene
        t = dict(self.tensors)
        t["agent_sem"] = torch.as_tensor(sem_a, dtype=dt)
        t["scene_sem"] = torch.as_tensor(sem_s, dtype=dt)
        return Batch(t, self.scenario_ids, self.agent_ids, self.origins, self.headings)


def collate(
    scenarios: Sequence[Scenario],
    semantics: Sequence[SemanticInputs | None] | None = None,
    dtype: torch.dtype = torch.float32,
    require_future: bool = True,
    map_order: Sequence[Sequence[int]] | None = None,
) -> Batch:
    """Pad scenarios into one tensor batch (agents sorted by id)."""
    if not scenarios:
        raise ValueError("empty scenario list")
    t0 = scenarios[0].t0
    fut = scenarios[0].future_len
    for sc in scenarios:
        if sc.t0 != t0 or sc.future_len != fut:
            raise ValueError("all scenarios in a batch need the same history and horizon lengths")
    B = len(scenarios)
    A = max(len(sc.agents) for sc in scenarios)
    P = max(max(len(sc.map_elements), 1) for sc in scenarios)
    af = np.zeros((B, A, agent_feature_dim(t0)))
    av = np.zeros((B, A), dtype=bool)
    mf = np.zeros((B, P, MAP_FEATURE_DIM))
    mv = np.zeros((B, P), dtype=bool)
    fu = np.zeros((B, A, fut, 2))
    fv = np.zeros((B, A, fut), dtype=bool)
    anchor = np.zeros((B, A, fut, 2))
    origins = np.zeros((B, A, 2))
    headings = np.zeros((B, A))
    ids = []
    for b, sc in enumerate(scenarios):
        aids = sc.agent_ids()
        ids.append(aids)
        for j, aid in enumerate(aids):
            feats, origin, heading, ok = agent_features(sc, aid)
            af[b, j], origins[b, j], headings[b, j], av[b, j] = feats, origin, heading, ok
            if ok:
                v = _rotate(sc.agents[aid].window(t0, t0).velocity[0], heading)
                anchor[b, j] = np.arange(1, fut + 1)[:, None] / sc.step_hz * v
            if ok and require_future:
                tr = sc.agents[aid].window(t0 + 1, sc.horizon)
                if len(tr.steps) == fut:
                    fu[b, j] = _rotate(tr.position - origin, heading)
                    fv[b, j] = tr.valid
        m = map_features(sc)
        if map_order is not None:
            m = m[list(map_order[b])]
        mf[b, : len(m)] = m
        mv[b, : len(m)] = True
        if not mv[b].any():
            mv[b, 0] = True  # keep at least one key for attention
    tensors = {
        "agent_feats": torch.as_tensor(af, dtype=dtype),
        "agent_valid": torch.as_tensor(av),
        "map_feats": torch.as_tensor(mf, dtype=dtype),
        "map_valid": torch.as_tensor(mv),
        "future": torch.as_tensor(fu, dtype=dtype),
        "future_valid": torch.as_tensor(fv),
        "anchor": torch.as_tensor(anchor, dtype=dtype),
        "agent_sem": torch.zeros(B, A, D_AGENT, dtype=dtype),
        "scene_sem": torch.zeros(B, D_SCENE, dtype=dtype),
    }
    batch = Batch(tensors, [sc.scenario_id for sc in scenarios], ids, origins, headings)
    if semantics is not None:
        batch = batch.with_semantics(semantics)
    return batch


# ---------------------------------------------------------------------------
# forecasts and aggregation


@dataclass
class Forecast:
    """Mixture output for one agent, in its t0 frame.

    ``means``/``sigmas`` have shape (K, T', 2); ``probs`` sums to one.
    """

    agent_id: str
    probs: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    origin: np.ndarray
    heading: float
    valid: bool = True
    alpha: float = 0.0
    aggregated: tuple[np.ndarray, np.ndarray] | None = None

    def to_scene(self, traj: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        R = np.array([[c, -s], [s, c]])
        return traj @ R.T + self.origin


def forecasts_from_output(out: dict, batch: Batch, k_prime: int | None = None, threshold_m: float = 1.0):
    """Per-scenario lists of :class:`Forecast` (valid agents only), aggregated."""
    probs = out["log_prob"].detach().exp().double().numpy()
    means = out["mean"].detach().double().numpy()
    sigmas = out["sigma"].detach().double().numpy()
    alphas = out["alpha_agent"].detach().double().numpy()
    valid = batch.tensors["agent_valid"].numpy()
    result = []
    for b, aids in enumerate(batch.agent_ids):
        row = []
        for j, aid in enumerate(aids):
            if not valid[b, j]:
                continue
            p = probs[b, j] / probs[b, j].sum()
            fc = Forecast(aid, p, means[b, j], sigmas[b, j], batch.origins[b, j], float(batch.headings[b, j]),
                          True, float(alphas[b, j]))
            kp = len(p) if k_prime is None else k_prime
            trajs, ps, _ = aggregate(fc.means, fc.probs, kp, threshold_m)
            fc.aggregated = (trajs, ps)
            row.append(fc)
        result.append(row)
    return result


def aggregate(means: np.ndarray, probs: np.ndarray, k_prime: int, threshold_m: float):
    """Greedy endpoint-based merge of mixture modes.

    Modes are visited by descending probability (ties: lower index first).  A mode
    whose endpoint lies within ``threshold_m`` of an already selected
    representative's endpoint is absorbed into the nearest such representative and
    its probability is added there.  Otherwise it becomes a new representative
    while fewer than ``k_prime`` exist, and is dropped once the quota is full.
    Surviving probabilities are renormalized.

    Returns:
        (trajectories (K', T', 2), probabilities (K',), member lists per representative)
    """
    K = len(probs)
    if not 1 <= k_prime <= K:
        raise ValueError(f"k_prime must lie in [1, {K}]")
    order = sorted(range(K), key=lambda k: (-probs[k], k))
    reps: list[int] = []
    mass: list[float] = []
    members: list[list[int]] = []
    for k in order:
        end = means[k, -1]
        best, best_d = None, None
        for r, rep in enumerate(reps):
            dist = float(np.linalg.norm(end - means[rep, -1]))
            if dist <= threshold_m and (best_d is None or dist < best_d):
                best, best_d = r, dist
        if best is not None:
            mass[best] += float(probs[k])
            members[best].append(k)
        elif len(reps) < k_prime:
            reps.append(k)
            mass.append(float(probs[k]))
            members.append([k])
    m = np.asarray(mass)
    return means[reps], m / m.sum(), members
