"""Training loop, checkpoints, and conversion of model output into metric inputs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .metrics import AgentPrediction
from .model import (
    Batch,
    Forecaster,
    PredictorConfig,
    SemanticInputs,
    TrainingError,
    aggregate,
    collate,
    mixture_loss,
)
from .scene import Scenario, wrap_angle
from .schema import schema_fingerprint

CHECKPOINT_MAGIC = b"SEMFCKPT"
CHECKPOINT_VERSION = 1
DIVERGENCE_LOSS = 1e6
SEMANTIC_PREFIXES = ("emb_agent", "emb_scene", "gain_agent", "gain_scene")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    # cosine decay from lr down to lr * min_lr_ratio
    min_lr_ratio: float = 0.01
    log_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0


@dataclass
class TrainResult:
    model: Forecaster
    log: list[dict]
    initial_loss: float
    final_loss: float


def _mean_abs(alpha: torch.Tensor, mask: torch.Tensor) -> float:
    m = mask.to(alpha.dtype)
    return float((alpha.abs() * m).sum() / m.sum().clamp_min(1.0))


def train(
    scenarios: Sequence[Scenario],
    semantics: Sequence[SemanticInputs | None] | None,
    model_cfg: PredictorConfig,
    train_cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    batch: Batch | None = None,
    log_comment: str = "",
) -> TrainResult:
    """Mini-batch Adam with cosine decay; deterministic given ``train_cfg.seed``.

    Raises:
        ValueError: empty training set.
        TrainingError: the loss exceeds the divergence limit or becomes non-finite.
    """
    if not scenarios and batch is None:
        raise ValueError("training set is empty")
    torch.manual_seed(train_cfg.seed)
    if batch is None:
        batch = collate(scenarios, semantics)
    elif semantics is not None:
        batch = batch.with_semantics(semantics)
    model = Forecaster(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    total = max(train_cfg.steps, 1)
    floor = train_cfg.min_lr_ratio

    def lr_factor(step):
        return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor)
    rng = np.random.default_rng(train_cfg.seed)
    n = len(batch)
    bs = min(train_cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    log: list[dict] = []
    initial = final = float("nan")
    model.train()
    for step in range(1, train_cfg.steps + 1):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos : pos + bs])
        pos += bs
        mb = batch.subset(idx)
        out = model(mb.tensors)
        loss = mixture_loss(out, mb.tensors, mb.scenario_ids)
        lv = loss.item()
        if lv > DIVERGENCE_LOSS:
            _write_log(log, log_path, log_comment)
            raise TrainingError(f"loss {lv:.3g} exceeds {DIVERGENCE_LOSS:g} at step {step} (scenarios: {', '.join(mb.scenario_ids)})")
        opt.zero_grad()
        loss.backward()
        gn = float(torch.sqrt(sum((p.grad.detach() ** 2).sum() for p in model.parameters() if p.grad is not None)))
        opt.step()
        sched.step()
        if step == 1:
            initial = lv
        final = lv
        if step == 1 or step % train_cfg.log_every == 0 or step == train_cfg.steps:
            log.append({
                "step": step,
                "loss": lv,
                "grad_norm": gn,
                "mean_abs_alpha": _mean_abs(out["alpha_agent"].detach(), mb.tensors["agent_valid"]),
                "mean_abs_alpha_scene": float(out["alpha_scene"].detach().abs().mean()),
            })
        if checkpoint_dir and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"step_{step:06d}.ckpt")
    model.eval()
    _write_log(log, log_path, log_comment)
    return TrainResult(model, log, initial, final)


LOG_COLUMNS = ("step", "loss", "grad_norm", "mean_abs_alpha", "mean_abs_alpha_scene")


def _write_log(log: list[dict], path: str | Path | None, comment: str = "") -> None:
    if not path:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# gain statistics


@torch.no_grad()
def mean_abs_alpha(model: Forecaster, batch: Batch, chunk: int = 64) -> float:
    """Mean |alpha| of the agent gate over valid agents that carry semantics."""
    if not model.cfg.use_semantics:
        return 0.0
    total, count = 0.0, 0
    for s in range(0, len(batch), chunk):
        mb = batch.subset(np.arange(s, min(s + chunk, len(batch))))
        out = model(mb.tensors)
        m = mb.tensors["agent_valid"] & (mb.tensors["agent_sem"].abs().sum(-1) > 0)
        total += float((out["alpha_agent"].abs() * m).sum())
        count += int(m.sum())
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# prediction


@torch.no_grad()
def predict(
    model: Forecaster,
    batch: Batch,
    scenarios: Sequence[Scenario],
    k_prime: int | None = None,
    threshold_m: float = 1.0,
    chunk: int = 64,
) -> list[AgentPrediction]:
    """Aggregated forecasts paired with ground truth, for every valid agent."""
    by_id = {sc.scenario_id: sc for sc in scenarios}
    model.eval()
    preds = []
    for s in range(0, len(batch), chunk):
        mb = batch.subset(np.arange(s, min(s + chunk, len(batch))))
        out = model(mb.tensors)
        probs = out["log_prob"].exp().double().numpy()
        means = out["mean"].double().numpy()
        valid = mb.tensors["agent_valid"].numpy()
        fut = mb.tensors["future"].double().numpy()
        fvalid = mb.tensors["future_valid"].numpy()
        for b, aids in enumerate(mb.agent_ids):
            sc = by_id[mb.scenario_ids[b]]
            for j, aid in enumerate(aids):
                if not valid[b, j] or not fvalid[b, j].all():
                    continue
                p = probs[b, j] / probs[b, j].sum()
                kp = len(p) if k_prime is None else k_prime
                trajs, ps, _ = aggregate(means[b, j], p, kp, threshold_m)
                track = sc.agents[aid].window(sc.t0 + 1, sc.horizon)
                gh = wrap_angle(track.heading - mb.headings[b, j])
                preds.append(AgentPrediction(sc.scenario_id, aid, trajs, ps, fut[b, j], np.asarray(gh)))
    return preds


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(model: Forecaster, path: str | Path, extra: dict | None = None) -> dict:
    """Binary checkpoint: magic, manifest length, JSON manifest, raw little-endian tensors."""
    cfg = model.cfg.to_dict()
    tensors = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "schema_fingerprint": schema_fingerprint(),
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "tensors": tensors,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return manifest


def read_manifest(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path: str | Path) -> tuple[Forecaster, dict]:
    manifest = read_manifest(path)
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest['format_version']}")
    if manifest["schema_fingerprint"] != schema_fingerprint():
        raise CheckpointError(f"{path}: trained with schema {manifest['schema_fingerprint']}, current is {schema_fingerprint()}")
    cfg = dict(manifest["config"])
    cfg["groups"] = tuple(cfg["groups"])
    model = Forecaster(PredictorConfig(**cfg))
    raw = Path(path).read_bytes()
    base = len(CHECKPOINT_MAGIC) + 8 + len(json.dumps(manifest, sort_keys=True).encode())
    params = dict(model.named_parameters())
    missing = sorted(set(params) - {t["name"] for t in manifest["tensors"]})
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    with torch.no_grad():
        for t in manifest["tensors"]:
            if t["name"] not in params:
                raise CheckpointError(f"{path}: unexpected tensor {t['name']}")
            dt = np.dtype(t["dtype"]).newbyteorder("<")
            arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(t["shape"])), offset=base + t["offset"]).reshape(t["shape"])
            params[t["name"]].copy_(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))))
    model.eval()
    return model, manifest


def parameter_counts(manifest: dict) -> dict[str, int]:
    """Trainable parameter totals from a checkpoint manifest, split into semantic add-ons and the rest."""
    sem = base = 0
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["name"].split(".")[0] in SEMANTIC_PREFIXES:
            sem += n
        else:
            base += n
    return {"semantic": sem, "base": base, "total": sem + base}


def manifest_for(model: Forecaster) -> dict:
    """Shape manifest without writing a file."""
    return {
        "config": model.cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()],
    }


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
