"""Command-line entry point: pipeline, train, bench, stats and bench-manifest subcommands.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Run settings come
from flags, then from a JSON config file (``--config`` or ``$VIDEDIT_CONFIG``),
then from built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import signal
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import torch

from . import plotting
from .adapters import (
    AdapterEndpoint,
    AdapterSet,
    Capability,
    default_mock_registry,
    load_registry,
    make_adapter,
)
from .bench import (
    REFERENCE_COUNTS,
    AggregationError,
    BenchLoadError,
    ConfigError,
    aggregate,
    build_fixture,
    emit_table,
    evaluate_pair,
    format_score,
    load_manifest,
    subsample,
)
from .core import TABLE_ORDER, Category, read_jsonl, read_pair_manifest, write_jsonl
from .editnet import (
    EditorConfig,
    TrainConfig,
    TrainingDivergedError,
    init_train_state,
    load_checkpoint,
    make_train_sample,
    train,
)
from .filtering import DataError, compute_dataset_stats, stats_from_counts
from .pipeline import PipelineConfig, judge_pairs, run_pipeline, write_outputs
from .store import ArtifactStore

log = logging.getLogger("videdit")

CONFIG_ENV = "VIDEDIT_CONFIG"
PROFILES = ("desk", "full")
EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_INTERRUPTED = 0, 1, 2, 130


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    store: Path = Path("videdit-store")
    seed: int = 0
    workers: int = 1
    registry: Optional[Path] = None
    profile: str = "desk"
    allow_http: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["store"] = str(self.store)
        d["registry"] = None if self.registry is None else str(self.registry)
        return d


def resolve_config(args, environ=os.environ) -> RunConfig:
    """Flags override the config file, which overrides defaults."""
    values = {}
    path = args.config or environ.get(CONFIG_ENV)
    if path:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = set(values) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in RunConfig.__dataclass_fields__:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            values[key] = flag
    try:
        rc = RunConfig(**values)
        rc = replace(rc, store=Path(rc.store), registry=None if rc.registry is None else Path(rc.registry),
                     seed=int(rc.seed), workers=int(rc.workers), allow_http=bool(rc.allow_http))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad run config: {exc}") from None
    if rc.profile not in PROFILES:
        raise UsageError(f"profile must be one of {PROFILES}")
    if rc.workers < 1:
        raise UsageError("workers must be >= 1")
    return rc


def build_registry(rc: RunConfig) -> dict:
    """Mock endpoints for every capability, overridden by entries of the registry file."""
    registry = default_mock_registry(rc.seed)
    if rc.registry is not None:
        try:
            registry.update(load_registry(rc.registry))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot load adapter registry {rc.registry}: {exc}") from None
    return registry


def check_http_policy(rc: RunConfig, endpoints) -> None:
    http = sorted(ep.capability.value for ep in endpoints if not ep.is_mock)
    if http and rc.profile == "desk" and not rc.allow_http:
        raise UsageError(f"desk profile forbids http adapters ({', '.join(http)}); pass --allow-http to override")


def pipeline_config(rc: RunConfig) -> PipelineConfig:
    if rc.profile == "full":
        return PipelineConfig(seed=rc.seed, height=64, width=64, raw_frames=160, window=(65, 129))
    return PipelineConfig(seed=rc.seed)


def parse_categories(text: str) -> list[Category]:
    if text.strip().lower() == "all":
        return list(TABLE_ORDER)
    out = []
    for name in text.split(","):
        try:
            cat = Category.parse(name)
        except ValueError:
            raise UsageError(f"unknown category {name.strip()!r}") from None
        if cat not in out:
            out.append(cat)
    order = {c: i for i, c in enumerate(TABLE_ORDER)}
    return sorted(out, key=order.__getitem__)


def _out_dir(args, rc: RunConfig, name: str) -> Path:
    out = Path(args.out) if args.out else rc.store / name
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- pipeline ---------------------------------------------------------------


def cmd_pipeline(args, rc: RunConfig) -> int:
    categories = parse_categories(args.categories)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    registry = build_registry(rc)
    check_http_policy(rc, registry.values())
    store = ArtifactStore(rc.store)
    adapters = AdapterSet(registry, store)
    out = _out_dir(args, rc, "pipeline")
    try:
        result = run_pipeline(args.n, store, adapters, categories, pipeline_config(rc), rc.workers)
        judge_pairs(result, adapters, args.threshold, args.retention, rc.workers)
    except KeyboardInterrupt:
        partial = write_jsonl(out / "jobs.partial.jsonl", store.list_jobs())
        print(f"interrupted; job records flushed to {partial}; rerun to resume", file=sys.stderr)
        return EXIT_INTERRUPTED
    paths = write_outputs(result, store, out)
    print(paths["manifest"])
    report = result.report or {}
    log.info("pairs %d, kept %d, judge failures %d", len(result.pairs), report.get("total_kept", 0),
             len(result.judge_failures))
    if result.failed_jobs:
        print(f"{len(result.failed_jobs)} job(s) failed:", file=sys.stderr)
        for job in result.failed_jobs:
            print(f"  {job.id}: step {job.failed_step}: {job.error}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# --- train ------------------------------------------------------------------


def cmd_train(args, rc: RunConfig) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    try:
        pairs = read_pair_manifest(args.manifest)
    except (OSError, KeyError, ValueError) as exc:
        raise RuntimeFailure(f"cannot read pair manifest {args.manifest}: {exc}") from None
    if not pairs:
        raise RuntimeFailure(f"pair manifest {args.manifest} is empty")
    out = _out_dir(args, rc, "train")
    ckpt = out / "checkpoint.npz"
    log_path = out / "train_log.jsonl"
    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except (OSError, KeyError, ValueError) as exc:
            raise RuntimeFailure(f"cannot load checkpoint {args.resume}: {exc}") from None
        cfg = state.editor.config
    else:
        _, h, w, c = pairs[0].source.shape
        cfg = EditorConfig(height=h, width=w, channels=c)
        base = TrainConfig.full_scale(args.stage) if rc.profile == "full" else TrainConfig()
        tcfg = replace(base, seed=rc.seed, lr=args.lr if args.lr is not None else base.lr,
                       batch_size=args.batch_size or base.batch_size)
        torch.manual_seed(rc.seed)
        state = init_train_state(cfg, tcfg)
        log_path.write_text("")
    try:
        samples = [make_train_sample(p, cfg) for p in pairs]
    except ValueError as exc:
        raise RuntimeFailure(f"pairs do not fit the editor geometry: {exc}") from None
    try:
        losses = train(samples, args.steps, state, log_path=log_path, checkpoint=ckpt)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    bad = [n for n, p in state.editor.named_parameters() if not torch.isfinite(p).all()]
    if bad:
        print(f"non-finite parameters after training: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAILURE
    if losses:
        log.info("step %d, first loss %.4f, last loss %.4f", state.step, losses[0], losses[-1])
    print(ckpt)
    return EXIT_OK


# --- bench ------------------------------------------------------------------


def _http_endpoint(cap: Capability, url: str, args) -> AdapterEndpoint:
    return AdapterEndpoint(cap, transport="http", base_url=url, timeout=args.timeout, max_retries=args.retries)


def _parse_script(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3 or not all(p.lstrip("-").isdigit() for p in parts):
        raise UsageError("--judge-script takes three comma-separated integers, e.g. 4,4,4")
    return [int(p) for p in parts]


def cmd_bench(args, rc: RunConfig) -> int:
    registry = build_registry(rc)
    model_ep = registry[Capability.EDIT_MODEL_UNDER_TEST]
    judge_ep = registry[Capability.JUDGE]
    if args.model_endpoint:
        model_ep = _http_endpoint(Capability.EDIT_MODEL_UNDER_TEST, args.model_endpoint, args)
    if args.judge_endpoint:
        judge_ep = _http_endpoint(Capability.JUDGE, args.judge_endpoint, args)
    if args.judge_script:
        if not judge_ep.is_mock:
            raise UsageError("--judge-script applies to the mock judge only")
        judge_ep = replace(judge_ep, options={**judge_ep.options, "script": _parse_script(args.judge_script)})
    check_http_policy(rc, [model_ep, judge_ep])
    try:
        manifest = load_manifest(args.manifest)
    except (OSError, BenchLoadError) as exc:
        raise RuntimeFailure(f"cannot load bench manifest: {exc}") from None
    if args.subsample is not None:
        if args.subsample < 1:
            raise UsageError("--subsample must be >= 1")
        manifest = subsample(manifest, args.subsample, rc.seed)
    store = ArtifactStore(rc.store)
    model = make_adapter(model_ep, store)
    judge = make_adapter(judge_ep, store)
    out = _out_dir(args, rc, "bench")
    rows = []
    # rows are flushed as they complete, so an interrupted run leaves a valid partial file
    try:
        with open(out / "results.jsonl", "w", encoding="utf-8") as fh, ThreadPoolExecutor(rc.workers) as pool:
            for row in pool.map(lambda e: evaluate_pair(e, model, judge, store, manifest), manifest.entries):
                rows.append(row)
                fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
                fh.flush()
    except KeyboardInterrupt:
        print(f"interrupted after {len(rows)} of {manifest.total} pairs; partial rows in {out / 'results.jsonl'}",
              file=sys.stderr)
        return EXIT_INTERRUPTED
    failed = [r for r in rows if not r.ok]
    meta = {
        "method": args.method,
        "model_endpoint": model_ep.base_url or "in_process_mock",
        "judge_endpoint": judge_ep.base_url or "in_process_mock",
        "manifest": str(args.manifest),
        "subsample": args.subsample,
        "seed": rc.seed,
        "evaluated": len(rows),
    }
    try:
        table = aggregate(rows, args.aggregate, meta)
    except AggregationError as exc:
        print(f"bench failed: {exc}", file=sys.stderr)
        for msg, n in Counter(r.error for r in failed).most_common(5):
            print(f"  {n} x {msg}", file=sys.stderr)
        return EXIT_FAILURE
    emit_table(table, "markdown", out / "table.md", args.method)
    emit_table(table, "csv", out / "table.csv", args.method)
    (out / "table.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    plotting.plot_category_bars({c.value: table.category_means[c] for c in TABLE_ORDER if c in table.category_means},
                                out / "table.png", title=f"{args.method}: overall {format_score(table.overall)}",
                                ylabel="mean score", ylim=(0, 5.4))
    if failed:
        print(f"{len(failed)} pair(s) failed and were excluded", file=sys.stderr)
    print(out / "table.md")
    return EXIT_OK


# --- stats ------------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _score_distribution(scored: list[dict]) -> dict:
    dims = ("compliance", "consistency", "quality")
    dist = {d: {s: 0 for s in range(1, 6)} for d in dims}
    for rec in scored:
        scores = rec.get("scores") or {d: rec.get(d) for d in dims}
        for d in dims:
            if scores.get(d) is not None:
                dist[d][int(scores[d])] += 1
    return dist


def cmd_stats(args, rc: RunConfig) -> int:
    if bool(args.manifest) == bool(args.counts):
        raise UsageError("pass exactly one of --manifest or --counts")
    out = _out_dir(args, rc, "stats")
    try:
        if args.counts:
            counts = json.loads(Path(args.counts).read_text())
            stats = stats_from_counts(counts)
            records = []
        else:
            records = read_jsonl(args.manifest)
            stats = compute_dataset_stats(records)
    except (OSError, ValueError, KeyError) as exc:
        # DataError (empty manifest, zero counts) is a ValueError
        raise RuntimeFailure(f"cannot compute statistics: {exc}") from None
    report = stats.to_dict()
    if math.isnan(report["mean_instruction_words"]):
        report["mean_instruction_words"] = None
    report["percent"] = {k: format_score(100 * v) for k, v in stats.ratios.items()}
    total = sum(stats.counts.values())
    _write_csv(out / "category_ratios.csv", ["category", "count", "percent"],
               [[k, v, format_score(100 * v / total)] for k, v in stats.counts.items()])
    plotting.plot_category_bars({k: 100 * v for k, v in stats.ratios.items()}, out / "category_ratios.png",
                                title=f"{total} pairs", ylabel="% of pairs")
    if records:
        lengths = Counter(stats.instruction_lengths)
        _write_csv(out / "instruction_lengths.csv", ["words", "count"], sorted(lengths.items()))
        plotting.plot_histogram(lengths, out / "instruction_lengths.png", "instruction length", "words")
        if stats.frame_histogram:
            _write_csv(out / "frames.csv", ["frames", "count"], sorted(stats.frame_histogram.items()))
        scored_path = Path(args.scored) if args.scored else Path(args.manifest).parent / "scored.jsonl"
        if scored_path.exists():
            dist = _score_distribution(read_jsonl(scored_path))
            report["score_distribution"] = {d: {str(s): n for s, n in v.items()} for d, v in dist.items()}
            _write_csv(out / "score_distribution.csv", ["score", *dist],
                       [[s, *(dist[d][s] for d in dist)] for s in range(1, 6)])
            plotting.plot_score_distribution(dist, out / "score_distribution.png", "judge scores")
        elif args.scored:
            raise RuntimeFailure(f"scored file {scored_path} not found")
    path = out / "stats.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(path)
    return EXIT_OK


# --- bench-manifest ---------------------------------------------------------


def cmd_bench_manifest(args, rc: RunConfig) -> int:
    out = _out_dir(args, rc, "bench_fixture")
    if args.reference:
        path = build_fixture(out, REFERENCE_COUNTS, rc.seed)
    else:
        if args.per_category < 1:
            raise UsageError("--per-category must be >= 1")
        path = build_fixture(out, args.per_category, rc.seed)
    print(path)
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV})")
    common.add_argument("--store", help="artifact store directory; outputs go under it")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--registry", help="adapter registry JSON; missing capabilities use mocks")
    common.add_argument("--profile", choices=PROFILES)
    common.add_argument("--allow-http", action="store_true", default=None, help="permit http adapters under desk profile")
    common.add_argument("--out", help="output directory (default: a subdirectory of the store)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="videdit", description="Instruction-guided video editing data and evaluation tools.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pipeline", parents=[common], help="build, judge and filter edit pairs from synthetic clips")
    sp.add_argument("--categories", default="all", help="'all' or a comma-separated list")
    sp.add_argument("--n", type=int, default=2, help="number of source clips")
    sp.add_argument("--threshold", type=float, default=3.0)
    sp.add_argument("--retention", choices=("mean", "min"), default="mean")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("train", parents=[common], help="train the editor on a pair manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--stage", type=int, choices=(1, 2), default=1, help="learning-rate stage under the full profile")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bench", parents=[common], help="evaluate an editing model on a bench manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--subsample", type=int, help="entries per category")
    sp.add_argument("--aggregate", choices=("micro", "macro"), default="micro")
    sp.add_argument("--method", default="model", help="row label in the table")
    sp.add_argument("--model-endpoint", help="http base URL of the model under test")
    sp.add_argument("--judge-endpoint", help="http base URL of the judge")
    sp.add_argument("--judge-script", help="fixed mock judge scores, e.g. 4,4,4")
    sp.add_argument("--timeout", type=float, default=30.0)
    sp.add_argument("--retries", type=int, default=3)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("stats", parents=[common], help="dataset statistics with CSV/JSON data and PNG figures")
    sp.add_argument("--manifest", help="pair or bench manifest (JSON Lines)")
    sp.add_argument("--counts", help="JSON object of category -> count")
    sp.add_argument("--scored", help="scored manifest (default: scored.jsonl next to the manifest)")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("bench-manifest", parents=[common], help="write a synthetic bench fixture")
    sp.add_argument("--per-category", type=int, default=2)
    sp.add_argument("--reference", action="store_true", help="use the full bench category counts (431 entries)")
    sp.set_defaults(func=cmd_bench_manifest)
    return p


def _on_sigterm(signum, frame):
    raise KeyboardInterrupt


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        previous = signal.signal(signal.SIGTERM, _on_sigterm)
    except ValueError:  # not the main thread
        previous = None
    try:
        rc = resolve_config(args)
        return args.func(args, rc)
    except UsageError as exc:
        print(f"videdit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, DataError, ConfigError) as exc:
        print(f"videdit {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)


if __name__ == "__main__":
    sys.exit(main())
