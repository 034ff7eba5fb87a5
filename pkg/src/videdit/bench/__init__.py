"""Benchmark harness: manifests, rubric prompts, evaluation loop, aggregation and tables."""
from .harness import (
    REFERENCE_COUNTS,
    TABLE_HEADERS,
    AggregationError,
    BenchEntry,
    BenchLoadError,
    BenchManifest,
    ConfigError,
    FIXTURE_INSTRUCTIONS,
    EvalRow,
    ResultTable,
    aggregate,
    build_fixture,
    build_judge_prompt,
    emit_table,
    evaluate_pair,
    format_score,
    load_manifest,
    load_prompt_template,
    overall_from_category_means,
    read_rows,
    reference_manifest,
    run_bench,
    subsample,
    write_manifest,
    write_rows,
)

__all__ = [
    "REFERENCE_COUNTS",
    "TABLE_HEADERS",
    "AggregationError",
    "BenchEntry",
    "BenchLoadError",
    "BenchManifest",
    "ConfigError",
    "EvalRow",
    "FIXTURE_INSTRUCTIONS",
    "ResultTable",
    "aggregate",
    "build_fixture",
    "build_judge_prompt",
    "emit_table",
    "evaluate_pair",
    "format_score",
    "load_manifest",
    "load_prompt_template",
    "overall_from_category_means",
    "read_rows",
    "reference_manifest",
    "run_bench",
    "subsample",
    "write_manifest",
    "write_rows",
]
