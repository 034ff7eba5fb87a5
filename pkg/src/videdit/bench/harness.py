from __future__ import annotations

import csv
import io
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..adapters import AdapterError
from ..core import TABLE_ORDER, Category, load_clip, save_clip, stable_seed
from ..filtering import JudgeParseError, enforce_compliance_cap, pair_mean_score, parse_judge_response

# Published per-category sizes of the full benchmark (431 pairs).
REFERENCE_COUNTS = {
    Category.GLOBAL_STYLE: 58,
    Category.BACKGROUND_CHANGE: 59,
    Category.LOCAL_CHANGE: 65,
    Category.LOCAL_REMOVE: 59,
    Category.LOCAL_ADD: 67,
    Category.SUBTITLES_EDIT: 50,
    Category.CREATIVE_EDIT: 30,
    Category.CAMERA_MULTI_SHOT: 43,
}

TABLE_HEADERS = (
    "Overall",
    "Global Style",
    "Background Change",
    "Local Change",
    "Local Remove",
    "Local Add",
    "Subtitle Edit",
    "Creative Edit",
    "Camera Edit",
)

PLACEHOLDER = "<edit_prompt>"


class BenchLoadError(ValueError):
    pass


class ConfigError(LookupError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class BenchEntry:
    pair_id: str
    category: Category
    source: str  # clip directory, relative to the manifest file
    instruction: str

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "category": self.category.value, "source": self.source,
                "instruction": self.instruction}


@dataclass(frozen=True)
class BenchManifest:
    entries: tuple
    root: Optional[Path] = None  # directory that relative clip refs resolve against

    @property
    def counts(self) -> dict:
        out = {c: 0 for c in TABLE_ORDER}
        for e in self.entries:
            out[e.category] += 1
        return {c: n for c, n in out.items() if n}

    @property
    def total(self) -> int:
        return len(self.entries)

    def source_path(self, entry: BenchEntry) -> Path:
        p = Path(entry.source)
        return p if p.is_absolute() or self.root is None else self.root / p


def load_manifest(path) -> BenchManifest:
    """JSON Lines of {pair_id, category, source, instruction}."""
    path = Path(path)
    entries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pid, cat, src, text = rec["pair_id"], rec["category"], rec["source"], rec["instruction"]
            except (ValueError, KeyError, TypeError) as exc:
                raise BenchLoadError(f"{path}:{lineno}: malformed entry ({exc})") from None
            try:
                category = Category.parse(cat)
            except ValueError:
                raise BenchLoadError(f"{path}:{lineno}: unknown category {cat!r}") from None
            if pid in seen:
                raise BenchLoadError(f"{path}:{lineno}: duplicate pair_id {pid!r}")
            if not isinstance(text, str) or not text.strip():
                raise BenchLoadError(f"{path}:{lineno}: empty instruction")
            seen.add(pid)
            entries.append(BenchEntry(str(pid), category, str(src), text))
    return BenchManifest(tuple(entries), path.parent)


def write_manifest(manifest: BenchManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    return path


def reference_manifest(counts: Mapping = REFERENCE_COUNTS) -> BenchManifest:
    """Placeholder entries with the published category sizes (no clips attached)."""
    entries = []
    for cat in TABLE_ORDER:
        for i in range(counts.get(cat, 0)):
            pid = f"{cat.value}-{i:03d}"
            entries.append(BenchEntry(pid, cat, f"clips/{pid}", f"{cat.value} edit #{i}"))
    return BenchManifest(tuple(entries))


FIXTURE_INSTRUCTIONS = {
    Category.GLOBAL_STYLE: "Transform the video into watercolor style.",
    Category.BACKGROUND_CHANGE: "Change the background to a beach.",
    Category.LOCAL_CHANGE: "Change the red ball to a blue ball.",
    Category.LOCAL_REMOVE: "Remove the green box.",
    Category.LOCAL_ADD: "Add a yellow ball.",
    Category.SUBTITLES_EDIT: "Add the subtitle HI at the bottom.",
    Category.CREATIVE_EDIT: "Make the ball dance.",
    Category.CAMERA_MULTI_SHOT: "Change to a close shot.",
}


def build_fixture(out_dir, per_category=2, seed: int = 0, frames: int = 8) -> Path:
    """Write synthetic source clips and a manifest.

    ``per_category`` is an entry count for every category or a mapping from
    category to count (e.g. :data:`REFERENCE_COUNTS`).
    """
    from ..pipeline.synthetic import synthetic_video

    out_dir = Path(out_dir)
    counts = per_category if isinstance(per_category, Mapping) else {c: per_category for c in TABLE_ORDER}
    entries = []
    for cat in TABLE_ORDER:
        for i in range(counts.get(cat, 0)):
            pid = f"{cat.value}-{i:03d}"
            save_clip(synthetic_video(stable_seed("fixture", seed, pid) % 2**32, frames=frames), out_dir / "clips" / pid)
            entries.append(BenchEntry(pid, cat, f"clips/{pid}", FIXTURE_INSTRUCTIONS[cat]))
    return write_manifest(BenchManifest(tuple(entries)), out_dir / "manifest.jsonl")


@lru_cache(maxsize=None)
def load_prompt_template(category, prompt_dir=None) -> str:
    """Rubric text for ``category``; ``prompt_dir`` overrides the bundled templates."""
    cat = Category.parse(category) if not isinstance(category, Category) else category
    try:
        if prompt_dir is not None:
            return (Path(prompt_dir) / f"{cat.value}.txt").read_text(encoding="utf-8")
        return resources.files(__package__).joinpath("prompts", f"{cat.value}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no judge prompt template for {cat.value}") from None


def build_judge_prompt(category, instruction: str, prompt_dir=None) -> str:
    template = load_prompt_template(category, None if prompt_dir is None else str(prompt_dir))
    if PLACEHOLDER not in template:
        raise ConfigError(f"template for {category} lacks {PLACEHOLDER}")
    return template.replace(PLACEHOLDER, instruction)


def subsample(manifest: BenchManifest, n_per_category: int, seed: int = 0) -> BenchManifest:
    """Seeded uniform sample of ``n_per_category`` entries per category, original order kept."""
    by_cat: dict = {}
    for i, e in enumerate(manifest.entries):
        by_cat.setdefault(e.category, []).append(i)
    keep = []
    for cat in TABLE_ORDER:
        idx = by_cat.get(cat, [])
        if not idx:
            continue
        if n_per_category >= len(idx):
            if n_per_category > len(idx):
                warnings.warn(f"{cat.value}: only {len(idx)} entries, keeping all", stacklevel=2)
            keep.extend(idx)
            continue
        rng = np.random.default_rng(stable_seed("subsample", seed, cat.value))
        keep.extend(np.asarray(idx)[rng.choice(len(idx), n_per_category, replace=False)].tolist())
    return BenchManifest(tuple(manifest.entries[i] for i in sorted(keep)), manifest.root)


# --- evaluation ---------------------------------------------------------------


@dataclass
class EvalRow:
    pair_id: str
    category: str
    ok: bool
    compliance: Optional[int] = None
    consistency: Optional[int] = None
    quality: Optional[int] = None
    cap_violated: bool = False
    mean: Optional[float] = None
    edited: str = ""
    raw_response: str = ""
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def scores(self) -> tuple:
        return (self.compliance, self.consistency, self.quality)


def evaluate_pair(entry: BenchEntry, model_adapter, judge_adapter, store, manifest: Optional[BenchManifest] = None) -> EvalRow:
    """Edit the source with the model under test, judge the result, parse and cap the scores.

    The edited clip lives in the store and the raw judge text is kept on the
    row; any adapter or parse failure yields a failed row instead of raising.
    """
    row = EvalRow(entry.pair_id, entry.category.value, ok=False)
    try:
        src_path = manifest.source_path(entry) if manifest is not None else Path(entry.source)
        source_key = store.put_clip(load_clip(src_path))
        edited = model_adapter.call({"source": source_key, "instruction": entry.instruction, "request_id": entry.pair_id})
        row.edited = edited["video"]
        prompt = build_judge_prompt(entry.category, entry.instruction)
        judged = judge_adapter.call({"source": source_key, "edited": row.edited, "prompt": prompt,
                                     "request_id": entry.pair_id})
        row.raw_response = judged["text"]
        triple = enforce_compliance_cap(parse_judge_response(row.raw_response))
    except (AdapterError, JudgeParseError, OSError, KeyError, ValueError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
        return row
    row.ok = True
    row.compliance, row.consistency, row.quality = triple.scores()
    row.cap_violated = triple.cap_violated
    row.mean = pair_mean_score(triple)
    return row


def run_bench(manifest: BenchManifest, model_adapter, judge_adapter, store, workers: int = 1) -> list[EvalRow]:
    """Evaluate every entry; rows come back in manifest order whatever the worker count."""
    if workers <= 1:
        return [evaluate_pair(e, model_adapter, judge_adapter, store, manifest) for e in manifest.entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda e: evaluate_pair(e, model_adapter, judge_adapter, store, manifest), manifest.entries))


def write_rows(rows: Sequence[EvalRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_rows(path) -> list[EvalRow]:
    with open(path, encoding="utf-8") as fh:
        return [EvalRow(**json.loads(line)) for line in fh if line.strip()]


# --- aggregation and tables ---------------------------------------------------


@dataclass
class ResultTable:
    category_means: dict  # Category -> float
    overall: float
    counts: dict  # Category -> evaluated pairs
    n_failed: int = 0
    mode: str = "micro"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "category_means": {c.value: v for c, v in self.category_means.items()},
            "counts": {c.value: v for c, v in self.counts.items()},
            "n_failed": self.n_failed,
            "mode": self.mode,
            "metadata": self.metadata,
        }


def overall_from_category_means(means: Mapping, counts: Mapping, mode: str = "micro") -> float:
    """Micro: pair-weighted mean of category means (equals the mean over all pairs). Macro: plain mean."""
    cats = [c for c in means if c in counts] if mode == "micro" else list(means)
    if not cats:
        raise AggregationError("no categories")
    if mode == "macro":
        return float(sum(means[c] for c in cats) / len(cats))
    if mode != "micro":
        raise ValueError("mode must be 'micro' or 'macro'")
    total = sum(counts[c] for c in cats)
    return float(sum(means[c] * counts[c] for c in cats) / total)


def aggregate(rows: Sequence, mode: str = "micro", metadata: Optional[dict] = None) -> ResultTable:
    """Per-pair score = mean of the three capped dimensions; failed rows are excluded and counted."""
    ok = [r for r in rows if r.ok]
    failed = len(rows) - len(ok)
    if not ok:
        raise AggregationError(f"no successful evaluations ({failed} failed)")
    groups: dict = {}
    for r in sorted(ok, key=lambda r: r.pair_id):
        groups.setdefault(Category.parse(r.category), []).append(r.mean)
    means = {c: float(np.mean(groups[c])) for c in TABLE_ORDER if c in groups}
    counts = {c: len(groups[c]) for c in means}
    if mode == "micro":
        overall = float(np.mean([m for c in TABLE_ORDER if c in groups for m in groups[c]]))
    else:
        overall = overall_from_category_means(means, counts, mode)
    return ResultTable(means, overall, counts, failed, mode, dict(metadata or {}))


def format_score(x: Optional[float], places: int = 2) -> str:
    """Round half away from zero on the shortest decimal form, so 2.405 -> 2.41."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "-"
    d = Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)
    return str(d.copy_abs() if d.is_zero() else d)


def table_cells(table: ResultTable) -> list[str]:
    return [format_score(table.overall)] + [format_score(table.category_means.get(c)) for c in TABLE_ORDER]


def emit_table(table: ResultTable, fmt: str = "markdown", path=None, method: str = "model") -> str:
    """Render one result row with columns Method, Overall, then the eight categories."""
    header = ["Method", *TABLE_HEADERS]
    cells = [method, *table_cells(table)]
    if fmt == "markdown":
        text = "| " + " | ".join(header) + " |\n" + "|" + "---|" * len(header) + "\n| " + " | ".join(cells) + " |\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerow(cells)
        text = buf.getvalue()
    else:
        raise ValueError("format must be 'markdown' or 'csv'")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text
