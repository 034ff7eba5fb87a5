"""End-to-end pipeline: Stage 1 per clip, Stage 2 per (clip, category), Stage 3 judge filtering."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..adapters import AdapterError, Capability
from ..bench import build_judge_prompt
from ..core import TABLE_ORDER, Category, write_jsonl
from ..filtering import (
    JudgeParseError,
    enforce_compliance_cap,
    parse_judge_response,
    retain,
    scored_record,
)
from .jobs import DONE, PipelineConfig, StageJob, make_raw_clip, run_stage, stage1_job, stage2_job

# Subtitle pairs are rendered exactly, so they skip the judge.
FILTER_EXEMPT = (Category.SUBTITLES_EDIT,)


@dataclass
class PipelineResult:
    jobs: list
    pairs: list  # pair records from finished Stage-2 jobs, in job order
    scored: list = field(default_factory=list)
    retained: list = field(default_factory=list)
    report: Optional[dict] = None
    judge_failures: list = field(default_factory=list)

    @property
    def failed_jobs(self) -> list:
        return [j for j in self.jobs if j.status != DONE]


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_pipeline(n_clips: int, store, adapters, categories: Sequence[Category] = TABLE_ORDER,
                 config: Optional[PipelineConfig] = None, workers: int = 1) -> PipelineResult:
    config = config or PipelineConfig()
    raw = [make_raw_clip(store, i, config) for i in range(n_clips)]
    s1 = _map(lambda i: run_stage(stage1_job(i, raw[i]), adapters, store, config), range(n_clips), workers)
    jobs: list[StageJob] = list(s1)
    todo = [stage2_job(i, cat, job.artifacts["record"]) for i, job in enumerate(s1) if job.status == DONE
            for cat in categories]
    s2 = _map(lambda j: run_stage(j, adapters, store, config), todo, workers)
    jobs.extend(s2)
    pairs = []
    for job in s2:
        if job.status == DONE:
            pairs.extend(store.get_json(job.artifacts["pairs"]))
    return PipelineResult(jobs, pairs)


def judge_pairs(result: PipelineResult, adapters, threshold: float = 3.0, mode: str = "mean",
                workers: int = 1) -> PipelineResult:
    """Stage 3: score every non-exempt pair, clamp to the compliance cap, keep those at or above threshold."""
    exempt = {c.value for c in FILTER_EXEMPT}

    def score(rec):
        if rec["category"] in exempt:
            return rec, None, None
        prompt = build_judge_prompt(rec["category"], rec["instruction"])
        try:
            text = adapters.call(Capability.JUDGE, {"source": rec["source"], "edited": rec["target"], "prompt": prompt,
                                                    "request_id": rec["id"]})["text"]
            return rec, enforce_compliance_cap(parse_judge_response(text)), None
        except (AdapterError, JudgeParseError) as exc:
            return rec, None, f"{type(exc).__name__}: {exc}"

    outcomes = _map(score, result.pairs, workers)
    items = []
    for rec, triple, err in outcomes:
        if err is not None:
            result.judge_failures.append({"pair_id": rec["id"], "error": err})
            continue
        items.append((rec, triple))
        if triple is not None:
            result.scored.append(scored_record(rec["id"], rec["category"], triple))
    kept, report = retain(items, threshold, mode, exempt=FILTER_EXEMPT)
    result.retained = [rec for rec, _ in kept]
    result.report = dict(report.to_dict(), judge_failures=len(result.judge_failures))
    return result


def manifest_records(records: Sequence[dict], store, manifest_dir) -> list[dict]:
    """Pair records with clip keys replaced by clip directories relative to ``manifest_dir``."""
    out = []
    for rec in records:
        src = store.clip_path(rec["source"])
        tgt = store.clip_path(rec["target"])
        out.append({
            "id": rec["id"],
            "category": rec["category"],
            "instruction": rec["instruction"],
            "backward_instruction": rec["backward_instruction"],
            "source": os.path.relpath(src, manifest_dir),
            "target": os.path.relpath(tgt, manifest_dir),
            "frames": store.get_clip(rec["source"]).num_frames,
        })
    return out


def write_outputs(result: PipelineResult, store, out_dir) -> dict:
    """Write the retained-pair manifest, scored manifest, retention report and job summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": write_jsonl(out_dir / "pairs.jsonl", manifest_records(result.retained, store, out_dir)),
        "all_pairs": write_jsonl(out_dir / "all_pairs.jsonl", manifest_records(result.pairs, store, out_dir)),
        "scored": write_jsonl(out_dir / "scored.jsonl", result.scored),
        "jobs": write_jsonl(out_dir / "jobs.jsonl", [
            {"id": j.id, "category": j.category.value if j.category else None, "status": j.status,
             "failed_step": j.failed_step, "error": j.error} for j in result.jobs
        ]),
    }
    report_path = out_dir / "retention_report.json"
    report_path.write_text(json.dumps(result.report or {}, indent=2, sort_keys=True) + "\n")
    paths["report"] = report_path
    return paths
