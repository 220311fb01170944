"""Markdown / CSV tables and figures for metric reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

COLUMNS = (("minADE", "minADE"), ("minFDE", "minFDE"), ("miss_rate", "Miss Rate"), ("mAP", "mAP"), ("soft_mAP", "soft-mAP"))
_PNG_META = {"Software": None}


class ReportMismatchError(ValueError):
    pass


def check_comparable(reports: Sequence[MetricsReport]) -> str:
    """Common eval-split fingerprint, or an error if reports disagree."""
    fps = {r.eval_fingerprint for r in reports}
    if len(fps) != 1:
        detail = ", ".join(f"{r.label or '?'}={r.eval_fingerprint or '<none>'}" for r in reports)
        raise ReportMismatchError(f"reports come from different eval splits ({detail})")
    return fps.pop()


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def markdown_table(reports: Sequence[MetricsReport], title: str = "", with_se: bool = True) -> str:
    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| Method | " + " | ".join(h for _, h in COLUMNS) + " |")
    lines.append("|---|" + "---:|" * len(COLUMNS))
    for r in reports:
        lines.append(f"| {r.label} | " + " | ".join(_fmt(getattr(r, k)) for k, _ in COLUMNS) + " |")
    if with_se:
        for r in reports:
            lines.append(f"| Std. Err. ({r.label}) | " + " | ".join(_fmt(r.se.get(k)) for k, _ in COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def write_csv(reports: Sequence[MetricsReport], path: str | Path, config_hash: str = "", extra: Sequence[dict] | None = None) -> None:
    """One row per report; ``extra`` adds per-row columns (e.g. the ablation table name)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = list(extra) if extra is not None else [{} for _ in reports]
    extra_keys = sorted({k for e in extra for k in e})
    header = ["label", *extra_keys, "k", "profile", "n_scenarios", "n_agents"]
    for k, _ in COLUMNS:
        header += [k, f"{k}_se"]
    header += ["eval_fingerprint", "config_hash"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r, e in zip(reports, extra):
            row = [r.label, *[e.get(k, "") for k in extra_keys], r.k, r.profile, r.n_scenarios, r.n_agents]
            for k, _ in COLUMNS:
                v, se = getattr(r, k), r.se.get(k)
                row += ["" if v is None else f"{v:.6f}", "" if se is None else f"{se:.6f}"]
            row += [r.eval_fingerprint, r.config_hash]
            w.writerow(row)


def save_report_json(report: MetricsReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_report_json(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_markdown(text: str, path: str | Path, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = f"<!-- config_hash: {config_hash} -->\n" if config_hash else ""
    path.write_text(head + text, encoding="utf-8")


# ---------------------------------------------------------------------------
# figures


def plot_latency(delays_s: Sequence[float], uplift_pct: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(list(delays_s), list(uplift_pct), marker="o")
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("semantic input delay (s)")
    ax.set_ylabel("minADE improvement over baseline (%)")
    ax.set_xticks(list(delays_s))
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_bars(labels: Sequence[str], values: Sequence[float], path: str | Path, ylabel: str = "minADE") -> None:
    fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(labels) + 1.5), 3.2))
    ax.bar(range(len(labels)), list(values), color="#4c72b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(list(labels), rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    lo = min(values) if values else 0.0
    hi = max(values) if values else 1.0
    pad = 0.1 * (hi - lo) if hi > lo else 0.1 * max(abs(hi), 1e-3)
    ax.set_ylim(max(0.0, lo - 3 * pad), hi + pad)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
