"""Command-line pipeline: gen, query, parse, train, eval, ablate, report.

Artifacts live under ``paths.out``::

    scenarios/{train,eval}.jsonl     gen
    cache.jsonl                      query
    features/{train,eval}.jsonl      parse (+ parse_report.csv)
    checkpoints/<variant>.ckpt       train (+ <variant>.log.csv)
    reports/<label>.{json,csv,md}    eval
    ablate/...                       ablate
    report/...                       report (tables and figures)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import RunConfig, load_config
from .experiments import (
    TrainedVariant,
    Variant,
    gain_variants,
    group_label,
    make_splits,
    predict_variant,
    split_fingerprint,
    train_variant,
)
from .features import (
    FeatureFileError,
    extract_features,
    index_features,
    load_features,
    parse_summary,
    query_steps,
    save_features,
    write_parse_report,
)
from .metrics import EvalProfile, MetricsReport, evaluate, nusc_profile, relative_improvement, womd_profile
from .mllm import HttpBackend, MllmClient, MockBackend, OfflineBackend, ResponseCache, TransportError
from .model import TrainingError, collate
from .prompts import build_all
from .report import (
    ReportMismatchError,
    check_comparable,
    load_report_json,
    markdown_table,
    plot_bars,
    plot_latency,
    save_report_json,
    write_csv,
    write_markdown,
)
from .scene import ConfigError, Scenario, ScenarioParseError, load_scenarios, save_scenarios
from .train import CheckpointError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRANSPORT = 0, 1, 2, 3
SPLITS = ("train", "eval")
SNAPSHOT_NAME = "config.resolved.json"


class DataError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# artifact helpers


def _meta(cfg: RunConfig, **kw) -> dict:
    return {"config_hash": cfg.hash(), **kw}


def _scenario_path(cfg: RunConfig, split: str) -> Path:
    return cfg.out / "scenarios" / f"{split}.jsonl"


def _feature_path(cfg: RunConfig, split: str) -> Path:
    return cfg.out / "features" / f"{split}.jsonl"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path}; run `semforecast {producer}` first")
    return path


def _load_split(cfg: RunConfig, split: str) -> list[Scenario]:
    scs = load_scenarios(_require(_scenario_path(cfg, split), "gen"))
    if not scs:
        raise DataError(f"{_scenario_path(cfg, split)} holds no scenarios")
    return scs


def _load_index(cfg: RunConfig, split: str):
    return index_features(load_features(_require(_feature_path(cfg, split), "parse")))


def _backend_tag(cfg: RunConfig, scenarios: Sequence[Scenario]) -> str:
    if cfg.mllm.backend == "http" or (cfg.mllm.backend == "offline" and cfg.mllm.http.get("model")):
        return f"http:{cfg.mllm.http.get('model', '')}"
    return MockBackend(scenarios, cfg.mllm.fault_profile()).tag


def _make_backend(cfg: RunConfig, scenarios: Sequence[Scenario]):
    if cfg.mllm.backend == "mock":
        return MockBackend(scenarios, cfg.mllm.fault_profile())
    if cfg.mllm.backend == "http":
        return HttpBackend(cfg.mllm.http_config())
    return OfflineBackend(_backend_tag(cfg, scenarios))


def _split_delays(cfg: RunConfig, split: str) -> list[float]:
    delays = sorted({0.0, *map(float, cfg.mllm.delays_s), *map(float, cfg.ablate.delays_s)})
    return [0.0] if split == "train" else delays


def eval_profile(cfg: RunConfig, hz: float) -> EvalProfile:
    if cfg.eval.profile == "womd":
        return womd_profile(hz, cfg.eval.lat_threshold_3s, cfg.eval.lon_threshold_3s)
    return nusc_profile(hz, cfg.eval.nusc_threshold_m)


def _save_report(cfg: RunConfig, report: MetricsReport, directory: Path, stem: str) -> None:
    report.config_hash = cfg.hash()
    save_report_json(report, directory / f"{stem}.json")
    write_csv([report], directory / f"{stem}.csv", cfg.hash())
    write_markdown(markdown_table([report]), directory / f"{stem}.md", cfg.hash())


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: RunConfig, args) -> int:
    gen = cfg.data.generator_config()
    train_sc, eval_sc = make_splits(gen, cfg.data.n_train, cfg.data.n_eval, cfg.data.seed)
    for split, scs in zip(SPLITS, (train_sc, eval_sc)):
        save_scenarios(scs, _scenario_path(cfg, split), _meta(cfg, split=split, fingerprint=split_fingerprint(scs)))
        _say(f"gen: wrote {len(scs)} {split} scenarios to {_scenario_path(cfg, split)}")
    cfg.write_snapshot(cfg.out / "scenarios")
    return EXIT_OK


def cmd_query(cfg: RunConfig, args) -> int:
    cache = ResponseCache(cfg.paths.cache_path)
    for split in SPLITS:
        scs = _load_split(cfg, split)
        client = MllmClient(_make_backend(cfg, scs), cache, cfg.mllm.max_concurrent)
        payloads = [p for sc in scs for step in query_steps(sc, _split_delays(cfg, split)) for p in build_all(sc, step)]
        before = len(cache)
        client.query_many(payloads)
        _say(f"query: {split}: {len(payloads)} prompts, {len(cache) - before} new cache entries")
    cfg.write_snapshot(cfg.paths.cache_path.parent)
    return EXIT_OK


def cmd_parse(cfg: RunConfig, args) -> int:
    cache = ResponseCache(_require(cfg.paths.cache_path, "query"))
    records = []
    for split in SPLITS:
        scs = _load_split(cfg, split)
        client = MllmClient(OfflineBackend(_backend_tag(cfg, scs)), cache, 1)
        try:
            feats, recs = extract_features(scs, client, _split_delays(cfg, split))
        except TransportError as e:
            raise DataError(f"{e}; run `semforecast query` first") from None
        save_features(feats, _feature_path(cfg, split), _meta(cfg, split=split))
        records += recs
        counts = parse_summary(recs)
        _say(f"parse: {split}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    write_parse_report(records, cfg.out / "features" / "parse_report.csv", f"config_hash={cfg.hash()}")
    cfg.write_snapshot(cfg.out / "features")
    return EXIT_OK


def _variants_arg(name: str) -> list[Variant]:
    if name == "all":
        return [Variant("baseline", use_semantics=False), Variant("semantics")]
    if name == "baseline":
        return [Variant("baseline", use_semantics=False)]
    return [Variant("semantics")]


def cmd_train(cfg: RunConfig, args) -> int:
    scs = _load_split(cfg, "train")
    batch = collate(scs)
    ckdir = cfg.out / "checkpoints"
    for v in _variants_arg(args.variant):
        index = _load_index(cfg, "train") if v.use_semantics else None
        tv = train_variant(v, scs, index, cfg.model, cfg.train, batch,
                           ckdir / f"{v.label}.log.csv", f"config_hash={cfg.hash()}")
        save_checkpoint(tv.model, ckdir / f"{v.label}.ckpt",
                        {"config_hash": cfg.hash(), "variant": v.label, "train_fingerprint": split_fingerprint(scs)})
        _say(f"train: {v.label}: final loss {tv.log[-1]['loss']:.3f}, mean |alpha| {tv.alpha:.3f}")
    cfg.write_snapshot(ckdir)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    scs = _load_split(cfg, "eval")
    fp = split_fingerprint(scs)
    batch = collate(scs)
    profile = eval_profile(cfg, scs[0].step_hz)
    outdir = cfg.out / "reports"
    for v in _variants_arg(args.variant):
        path = _require(cfg.out / "checkpoints" / f"{v.label}.ckpt", "train")
        model, _ = load_checkpoint(path)
        index = _load_index(cfg, "eval") if model.cfg.use_semantics else None
        tv = TrainedVariant(v, model, [], 0.0)
        delay = float(args.delay)
        preds = predict_variant(tv, scs, index, delay, cfg.eval.k_prime, cfg.eval.threshold_m, batch)
        label = v.label if delay == 0 else f"{v.label}@{delay:g}s"
        rep = evaluate(preds, cfg.eval.k, profile, cfg.eval.with_map, label=label)
        rep.eval_fingerprint = fp
        _save_report(cfg, rep, outdir, label)
        _say(f"eval: {label}: minADE {rep.minADE:.3f} minFDE {rep.minFDE:.3f} MR {rep.miss_rate:.3f}")
    cfg.write_snapshot(outdir)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    train_sc, eval_sc = _load_split(cfg, "train"), _load_split(cfg, "eval")
    tr_idx, ev_idx = _load_index(cfg, "train"), _load_index(cfg, "eval")
    fp = split_fingerprint(eval_sc)
    btr, bev = collate(train_sc), collate(eval_sc)
    profile = eval_profile(cfg, eval_sc[0].step_hz)
    outdir = cfg.out / "ablate"
    tables = ("groups", "gain", "delay") if args.table == "all" else (args.table,)

    trained: dict[tuple, TrainedVariant] = {}

    def get(v: Variant) -> TrainedVariant:
        key = (v.use_semantics, tuple(v.groups) if v.use_semantics else (), v.gain_mode if v.use_semantics else "")
        if key not in trained:
            trained[key] = train_variant(v, train_sc, tr_idx if v.use_semantics else None, cfg.model, cfg.train, btr)
        return trained[key]

    def run(v: Variant, label: str, delay: float = 0.0) -> MetricsReport:
        tv = get(v)
        preds = predict_variant(tv, eval_sc, ev_idx, delay, cfg.eval.k_prime, cfg.eval.threshold_m, bev)
        rep = evaluate(preds, cfg.eval.k, profile, cfg.eval.with_map, label=label)
        rep.eval_fingerprint = fp
        rep.config_hash = cfg.hash()
        return rep

    rows: list[tuple[str, MetricsReport, dict]] = []
    for table in tables:
        if table == "groups":
            for g in cfg.ablate.groups:
                v = Variant(group_label(g), bool(g), tuple(g))
                rows.append((table, run(v, f"groups={v.label}"), {"groups": v.label}))
        elif table == "gain":
            for v in gain_variants(cfg.ablate.gain_modes):
                rep = run(v, v.label)
                rows.append((table, rep, {"alpha": f"{get(v).alpha:.4f}"}))
        elif table == "delay":
            base = run(Variant("baseline", use_semantics=False), "delay=baseline")
            rows.append((table, base, {"delay_s": ""}))
            for d in cfg.ablate.delays_s:
                rep = run(Variant("semantics"), f"delay={float(d):g}s", float(d))
                rows.append((table, rep, {"delay_s": f"{float(d):g}",
                                          "uplift_pct": f"{100 * relative_improvement(base.minADE, rep.minADE):.3f}"}))
        else:
            raise UsageError(f"unknown ablation table {table!r}")
        _say(f"ablate: {table}: {sum(1 for t, _, _ in rows if t == table)} rows")

    summary = []
    for table, rep, extra in rows:
        stem = rep.label.replace("=", "_").replace("+", "-")
        save_report_json(rep, outdir / table / f"{stem}.json")
        summary.append({"table": table, "label": rep.label, "path": f"{table}/{stem}.json", **extra})
    (outdir / "summary.json").write_text(
        json.dumps({"config_hash": cfg.hash(), "eval_fingerprint": fp, "rows": summary}, indent=1, sort_keys=True) + "\n"
    )
    write_csv([r for _, r, _ in rows], outdir / "ablation.csv", cfg.hash(), [{"table": t, **e} for t, _, e in rows])
    md = "".join(markdown_table([r for t, r, _ in rows if t == table], title=table, with_se=False) + "\n" for table in tables)
    write_markdown(md, outdir / "ablation.md", cfg.hash())
    cfg.write_snapshot(outdir)
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    if args.inputs:
        paths = [Path(p) for p in args.inputs]
    else:
        paths = sorted(p for p in (cfg.out / "reports").glob("*.json") if p.name != SNAPSHOT_NAME)
    reports = []
    for p in paths:
        if not p.exists():
            raise DataError(f"missing report {p}; run `semforecast eval` first")
        try:
            reports.append(load_report_json(p))
        except (ValueError, TypeError, KeyError) as e:
            raise DataError(f"{p}: not a metrics report ({e})") from None
    summary_path = cfg.out / "ablate" / "summary.json"
    ablation = json.loads(summary_path.read_text()) if (summary_path.exists() and not args.inputs) else None
    ab_reports = []
    if ablation:
        ab_reports = [(row, load_report_json(cfg.out / "ablate" / row["path"])) for row in ablation["rows"]]
    if not reports and not ab_reports:
        raise DataError(f"no reports found under {cfg.out / 'reports'}; run `semforecast eval` or `semforecast ablate` first")
    try:
        check_comparable(reports + [r for _, r in ab_reports])
    except ReportMismatchError as e:
        raise DataError(f"refusing to compare: {e}") from None

    outdir = cfg.out / "report"
    outdir.mkdir(parents=True, exist_ok=True)
    md = []
    figures = []
    if reports:
        md.append(markdown_table(reports, title="Evaluation"))
        write_csv(reports, outdir / "report.csv", cfg.hash())
        plot_bars([r.label for r in reports], [r.minADE for r in reports], outdir / "minade.png")
        figures.append("minade.png")
    if ab_reports:
        for table in ("groups", "gain", "delay"):
            sub = [(row, r) for row, r in ab_reports if row["table"] == table]
            if not sub:
                continue
            md.append(markdown_table([r for _, r in sub], title=f"Ablation: {table}", with_se=False))
            if table == "delay":
                pts = [(float(row["delay_s"]), float(row["uplift_pct"])) for row, _ in sub if row.get("delay_s")]
                plot_latency([d for d, _ in pts], [u for _, u in pts], outdir / "latency.png")
                figures.append("latency.png")
            else:
                plot_bars([r.label for _, r in sub], [r.minADE for _, r in sub], outdir / f"{table}.png")
                figures.append(f"{table}.png")
        write_csv([r for _, r in ab_reports], outdir / "ablation.csv", cfg.hash(),
                  [{k: v for k, v in row.items() if k not in ("path", "label")} for row, _ in ab_reports])
    md.append("".join(f"![{f}]({f})\n" for f in figures))
    write_markdown("\n".join(md), outdir / "report.md", cfg.hash())
    cfg.write_snapshot(outdir)
    _say(f"report: wrote {outdir / 'report.md'} and {len(figures)} figure(s)")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "query": cmd_query,
    "parse": cmd_parse,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (TOML syntax), repeatable")
    common.add_argument("--out", help="shortcut for --set paths.out=...")

    p = _Parser(prog="semforecast", description="Semantic side-input trajectory forecasting pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen", parents=[common], help="generate synthetic train/eval scenarios")
    sub.add_parser("query", parents=[common], help="query the multimodal model into the cache")
    sub.add_parser("parse", parents=[common], help="parse cached responses into feature files")
    for name, helptext in (("train", "train predictor checkpoints"), ("eval", "evaluate checkpoints")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--variant", choices=("baseline", "semantics", "all"), default="all")
        if name == "eval":
            sp.add_argument("--delay", type=float, default=0.0, help="semantic input delay in seconds")
    sp = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    sp.add_argument("--table", choices=("groups", "gain", "delay", "all"), default="all")
    sp = sub.add_parser("report", parents=[common], help="render tables and figures")
    sp.add_argument("inputs", nargs="*", help="report JSON files (default: all under <out>/reports)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"paths.out='{args.out}'")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"semforecast {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TransportError as e:
        print(f"semforecast {args.command}: transport error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (DataError, ScenarioParseError, FeatureFileError, CheckpointError, TrainingError) as e:
        print(f"semforecast {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
