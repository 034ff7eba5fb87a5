"""Stage jobs: linear step chains over adapter calls and native ops, persisted step by step.

A job's state lives in the store under ``jobs/<id>.json``. Every step returns
a dict of new artifacts (store keys or small JSON values) that is merged into
the job and written before the next step starts, so a failed job keeps what
it produced and a rerun resumes at the failed step. Rerunning a done job is a
no-op.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..adapters import AdapterError, Capability
from ..core import Category, EditPair, VideoClip, stable_seed, validate_pair
from . import builders, local_ops, subtitles
from .synthetic import synthetic_video

log = logging.getLogger(__name__)

PENDING, RUNNING, DONE, FAILED = "pending", "running", "done", "failed"

STYLES = (
    "Ghibli", "oil painting", "watercolor", "pixel art", "cyberpunk", "pencil sketch", "ukiyo-e", "pop art",
    "Van Gogh", "anime", "claymation", "comic book", "low poly", "impressionist", "film noir", "steampunk",
    "mosaic", "neon glow",
)
TIMES_OF_DAY = ("morning", "noon", "blue hour", "night")
WEATHER = ("sunny", "rainy", "snowy")
STYLE_HINTS = STYLES + tuple(f"{t} lighting" for t in TIMES_OF_DAY) + tuple(f"{w} weather" for w in WEATHER)
BACKGROUNDS = ("a beach at sunset", "a snowy forest", "a neon city street", "a desert canyon", "an underwater reef",
               "a library", "outer space")
SUBTITLE_TEXTS = ("HELLO", "WOW", "GO!", "YES", "OK", "HI", "BYE", "RUN")
CREATIVE_PROMPTS = ("the objects start to dance", "everything drifts to the left", "the scene slowly spins",
                    "the colors pulse", "the objects jump")


@dataclass(frozen=True)
class StepSpec:
    name: str
    capability: Optional[Capability] = None  # None for native ops

    def to_dict(self) -> dict:
        return {"name": self.name, "capability": self.capability.value if self.capability else None}


@dataclass
class StageJob:
    id: str
    category: Optional[Category]  # None for the Stage-1 pre-processing job
    steps: tuple
    inputs: dict
    status: str = PENDING
    artifacts: dict = field(default_factory=dict)
    failed_step: Optional[int] = None  # 1-based
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category.value if self.category else None,
            "steps": [s.to_dict() for s in self.steps],
            "inputs": self.inputs,
            "status": self.status,
            "artifacts": self.artifacts,
            "failed_step": self.failed_step,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageJob":
        steps = tuple(StepSpec(s["name"], Capability(s["capability"]) if s["capability"] else None) for s in d["steps"])
        cat = Category(d["category"]) if d["category"] else None
        return cls(d["id"], cat, steps, d["inputs"], d["status"], d["artifacts"], d["failed_step"], d["error"])


@dataclass
class PipelineConfig:
    seed: int = 0
    height: int = 32
    width: int = 32
    raw_frames: int = 20
    window: tuple = (8, 16)  # desk-scale stand-in for 65..129 frames
    n_objects: int = 2
    creative_videos: int = 3
    canny_low: float = 0.1
    canny_high: float = 0.2
    iou_threshold: float = 0.95
    shot_threshold: float = 0.1


class Context:
    def __init__(self, job: StageJob, store, adapters, config: PipelineConfig):
        self.job, self.store, self.adapters, self.config = job, store, adapters, config
        self.rng = np.random.default_rng(stable_seed("job", config.seed, job.id))

    def art(self, name):
        return self.job.artifacts[name]

    def clip(self, key) -> VideoClip:
        return self.store.get_clip(key)

    def call(self, cap: Capability, request: dict) -> dict:
        return self.adapters.call(cap, request)

    @property
    def record(self) -> dict:
        return self.store.get_json(self.job.inputs["record"])

    def source(self) -> VideoClip:
        return self.clip(self.record["clip"])

    def first_frame(self) -> str:
        return self.store.put_clip(self.source().with_frames(self.source().frames[:1]))


def _pair_blob(ctx: Context, pairs: list[EditPair]) -> dict:
    """Persist the pair list and fail loudly if any pair breaks a type invariant."""
    recs = []
    for p in pairs:
        bad = validate_pair(p)
        if bad:
            raise builders.ConstructionError(f"pair {p.id} invalid: {', '.join(map(str, bad))}")
        recs.append({
            "id": p.id,
            "category": p.category.value,
            "instruction": p.instruction,
            "backward_instruction": p.backward_instruction,
            "source": ctx.store.put_clip(p.source),
            "target": ctx.store.put_clip(p.target),
        })
    return {"pairs": ctx.store.put_json(recs)}


def _instruction(ctx: Context, category: Category, **hints) -> tuple[str, Optional[str]]:
    r = ctx.call(Capability.INSTRUCTION_GENERATE, {"category": category.value, "hints": hints})
    return r["instruction"], r.get("backward_instruction")


# --- Stage 1 ------------------------------------------------------------------


def s1_window(ctx):
    cfg = ctx.config
    raw = ctx.clip(ctx.job.inputs["raw"])
    start, length = local_ops.sample_clip_window(raw.num_frames, ctx.rng, *cfg.window)
    clip = local_ops.extract_window(raw, start, length)
    return {"clip": ctx.store.put_clip(clip), "window": [start, length]}


def s1_caption(ctx):
    return {"caption": ctx.call(Capability.CAPTION, {"clip": ctx.art("clip"), "seed": ctx.config.seed})["caption"]}


def s1_depth(ctx):
    return {"depth": ctx.call(Capability.DEPTH, {"clip": ctx.art("clip")})["depth"]}


def s1_canny(ctx):
    edges = local_ops.canny_edges(ctx.clip(ctx.art("clip")), ctx.config.canny_low, ctx.config.canny_high)
    return {"edges": ctx.store.put_clip(edges)}


def s1_detect(ctx):
    objs = ctx.call(Capability.DETECT_SEGMENT, {"clip": ctx.art("clip")})["objects"]
    return {"objects": ctx.store.put_json(objs)}


def s1_describe(ctx):
    objs = ctx.store.get_json(ctx.art("objects"))
    captions = [ctx.call(Capability.LOCAL_DESCRIBE, {"clip": ctx.art("clip"), "mask": o["mask"], "name": o["name"]})["caption"]
                for o in objs]
    return {"local_captions": ctx.store.put_json(captions)}


def s1_record(ctx):
    objs = ctx.store.get_json(ctx.art("objects"))
    caps = ctx.store.get_json(ctx.art("local_captions"))
    record = {
        "clip": ctx.art("clip"),
        "caption": ctx.art("caption"),
        "edges": ctx.art("edges"),
        "depth": ctx.art("depth"),
        "objects": [dict(o, local_caption=c) for o, c in zip(objs, caps)],
    }
    return {"record": ctx.store.put_json(record)}


# --- Stage 2 ------------------------------------------------------------------


def gs_instruction(ctx):
    style = STYLE_HINTS[int(ctx.rng.integers(len(STYLE_HINTS)))]
    fwd, bwd = _instruction(ctx, Category.GLOBAL_STYLE, style=style)
    return {"instruction": fwd, "backward": bwd, "edit_prompt": f"Restyle this image as {style}."}


def frame0(ctx):
    return {"first_frame": ctx.first_frame()}


def image_edit(ctx):
    r = ctx.call(Capability.IMAGE_EDIT, {"image": ctx.art("first_frame"), "instruction": ctx.art("edit_prompt")})
    return {"edited_frame": r["image"]}


def control_canny(ctx):
    return {"control": ctx.record["edges"]}


def controlled_video(ctx):
    r = ctx.call(Capability.CONTROLLED_VIDEO, {"control": ctx.art("control"), "first_frame": ctx.art("edited_frame"),
                                               "prompt": ctx.art("instruction")})
    return {"target": r["video"]}


def sa_pair(ctx):
    src = ctx.source()
    tgt = ctx.clip(ctx.art("target"))
    pair = EditPair(src, tgt, ctx.job.category, ctx.art("instruction"), ctx.art("backward"), id=ctx.job.id)
    return _pair_blob(ctx, [pair])


def bc_foreground(ctx):
    src = ctx.source()
    fg = local_ops.detect_foreground(src.frames[0])
    objs = ctx.record["objects"]
    masks = [ctx.clip(o["mask"]).frames[..., 0] > 0.5 for o in objs]
    mset = local_ops.MaskSet(tuple(m[0] for m in masks), tuple(o["name"] for o in objs))
    pick = local_ops.select_foreground_subset(fg, mset, ctx.config.iou_threshold)
    if pick is None:
        raise builders.ConstructionError("no object combination matches the foreground")
    idx, iou = pick
    fg_video = np.zeros(src.geometry, bool)
    for i in idx:
        fg_video |= masks[i]
    return {"fg_objects": [mset.names[i] for i in idx], "fg_iou": iou,
            "fg_mask": ctx.store.put_clip(VideoClip(fg_video.astype(float)[..., None]))}


def bc_masked_control(ctx):
    fg = ctx.clip(ctx.art("fg_mask")).frames[..., 0] > 0.5
    masked = local_ops.mask_background_of(ctx.clip(ctx.record["edges"]), fg)
    return {"control": ctx.store.put_clip(masked)}


def bc_instruction(ctx):
    bg = BACKGROUNDS[int(ctx.rng.integers(len(BACKGROUNDS)))]
    subject = " and ".join(ctx.art("fg_objects"))
    fwd, bwd = _instruction(ctx, Category.BACKGROUND_CHANGE, background=bg, subject=subject)
    return {"instruction": fwd, "backward": bwd, "edit_prompt": f"Change the background to {bg}."}


def _pick_object(ctx):
    objs = ctx.record["objects"]
    if not objs:
        raise builders.ConstructionError("clip has no detected objects")
    return objs[int(ctx.rng.integers(len(objs)))]


def _absent_name(ctx):
    from ..adapters.mock import PALETTE

    present = {o["name"] for o in ctx.record["objects"]}
    free = [n for n in PALETTE if n not in present]
    return free[int(ctx.rng.integers(len(free)))]


def lc_instruction(ctx):
    obj = _pick_object(ctx)
    new = _absent_name(ctx)
    fwd, bwd = _instruction(ctx, Category.LOCAL_CHANGE, object=obj["name"], new=new)
    return {"instruction": fwd, "backward": bwd, "edit_prompt": f"Turn the {obj['name']} into a {new}.",
            "object": obj["name"]}


def la_object(ctx):
    obj = _pick_object(ctx)
    return {"object": obj["name"], "object_mask": obj["mask"], "object_caption": obj["local_caption"]}


def la_inpaint(ctx):
    r = ctx.call(Capability.INPAINT, {"clip": ctx.record["clip"], "mask": ctx.art("object_mask")})
    return {"inpainted": r["video"]}


def la_instruction(ctx):
    fwd, bwd = _instruction(ctx, Category.LOCAL_ADD, object=ctx.art("object"))
    return {"instruction": fwd, "backward": bwd}


def la_pair(ctx):
    pair = builders.build_local_add_pair(ctx.source(), ctx.clip(ctx.art("inpainted")), ctx.art("object_caption"),
                                         ctx.art("instruction"), ctx.art("backward"), id=ctx.job.id)
    return _pair_blob(ctx, [pair])


def lr_add_prompt(ctx):
    name = _absent_name(ctx)
    return {"object": name, "edit_prompt": f"Add a {name} to the image."}


def i2v_from_edit(ctx):
    r = ctx.call(Capability.I2V, {"image": ctx.art("edited_frame"), "prompt": ctx.art("edit_prompt"),
                                  "num_frames": ctx.source().num_frames, "seed": ctx.config.seed})
    return {"donor": r["video"]}


def lr_segment(ctx):
    objs = ctx.call(Capability.DETECT_SEGMENT, {"clip": ctx.art("donor"), "queries": [ctx.art("object")]})["objects"]
    if not objs:
        raise builders.ConstructionError(f"added {ctx.art('object')} not found in generated video")
    return {"object_mask": objs[0]["mask"]}


def lr_paste(ctx):
    mask = ctx.clip(ctx.art("object_mask")).frames[..., 0] > 0.5
    pasted = local_ops.composite_masked(ctx.source(), ctx.clip(ctx.art("donor")), mask)
    return {"with_object": ctx.store.put_clip(pasted)}


def lr_instruction(ctx):
    fwd, bwd = _instruction(ctx, Category.LOCAL_REMOVE, object=ctx.art("object"))
    return {"instruction": fwd, "backward": bwd}


def lr_pair(ctx):
    pair = builders.build_local_remove_pair(ctx.source(), ctx.clip(ctx.art("with_object")), f"the {ctx.art('object')}",
                                            ctx.art("instruction"), ctx.art("backward"), id=ctx.job.id)
    return _pair_blob(ctx, [pair])


def se_texts(ctx):
    a, b = ctx.rng.choice(len(SUBTITLE_TEXTS), 2, replace=False)
    style = subtitles.STYLES[int(ctx.rng.integers(len(subtitles.STYLES)))]
    return {"text_a": SUBTITLE_TEXTS[a], "text_b": SUBTITLE_TEXTS[b], "style": style.id}


def se_pairs(ctx):
    """All nine task x position variations."""
    src = ctx.source()
    style = next(s for s in subtitles.STYLES if s.id == ctx.art("style"))
    a, b = ctx.art("text_a"), ctx.art("text_b")
    pairs = []
    for pos in subtitles.POSITIONS:
        instr = {}
        for task in subtitles.TASKS:
            instr[task] = _instruction(ctx, Category.SUBTITLES_EDIT, task=task, text=a, text_b=b, position=pos)
        pairs.extend(subtitles.build_subtitle_triplet(src, a, b, pos, style, instr, id_prefix=f"{ctx.job.id}-"))
    return _pair_blob(ctx, pairs)


def cm_generate(ctx):
    n = max(2, ctx.source().num_frames // 3)
    r = ctx.call(Capability.MULTI_SHOT_GENERATE, {"image": ctx.first_frame(), "prompt": ctx.record["caption"],
                                                  "frames_per_shot": n, "seed": ctx.config.seed})
    return {"multishot": r["video"], "shot_labels": [s["shot_type"] for s in r["shots"]]}


def cm_segment(ctx):
    video = ctx.clip(ctx.art("multishot"))
    segs = builders.segment_shots(video, ctx.config.shot_threshold)
    labeled = builders.label_shots(segs, ctx.art("shot_labels"))
    return {"shots": [[s.start, s.end, s.shot_type] for s in labeled]}


def cm_pairs(ctx):
    video = ctx.clip(ctx.art("multishot"))
    shots = [builders.ShotSegment(*s) for s in ctx.art("shots")]

    def instruct(a, b):
        return _instruction(ctx, Category.CAMERA_MULTI_SHOT, source=a, target=b)

    return _pair_blob(ctx, builders.build_camera_pairs(shots, video, instruct, id_prefix=f"{ctx.job.id}-"))


def cr_generate(ctx):
    k = ctx.config.creative_videos
    idx = ctx.rng.choice(len(CREATIVE_PROMPTS), k, replace=False)
    prompts = [CREATIVE_PROMPTS[i] for i in idx]
    first = ctx.first_frame()
    n = ctx.source().num_frames
    videos = [ctx.call(Capability.I2V, {"image": first, "prompt": p, "num_frames": n, "seed": ctx.config.seed})["video"]
              for p in prompts]
    return {"prompts": prompts, "videos": videos}


def cr_pairs(ctx):
    videos = [ctx.clip(k) for k in ctx.art("videos")]
    prompts = ctx.art("prompts")

    def instruct(i, j):
        return _instruction(ctx, Category.CREATIVE_EDIT, source=prompts[i], target=prompts[j])

    return _pair_blob(ctx, builders.build_creative_pairs(videos, instruct, id_prefix=f"{ctx.job.id}-"))


NATIVE = None
STEP_FUNCS: dict[str, Callable] = {}


def _chain(*items) -> tuple:
    out = []
    for name, fn, cap in items:
        STEP_FUNCS[name] = fn
        out.append(StepSpec(name, cap))
    return tuple(out)


IE, CV, IG = Capability.IMAGE_EDIT, Capability.CONTROLLED_VIDEO, Capability.INSTRUCTION_GENERATE

STAGE1_CHAIN = _chain(
    ("window", s1_window, NATIVE),
    ("caption", s1_caption, Capability.CAPTION),
    ("depth", s1_depth, Capability.DEPTH),
    ("canny", s1_canny, NATIVE),
    ("detect_segment", s1_detect, Capability.DETECT_SEGMENT),
    ("local_describe", s1_describe, Capability.LOCAL_DESCRIBE),
    ("clip_record", s1_record, NATIVE),
)

CHAINS = {
    Category.GLOBAL_STYLE: _chain(
        ("gs_instruction", gs_instruction, IG),
        ("first_frame", frame0, NATIVE),
        ("image_edit", image_edit, IE),
        ("canny_control", control_canny, NATIVE),
        ("controlled_video", controlled_video, CV),
        ("sa_pair", sa_pair, NATIVE),
    ),
    Category.BACKGROUND_CHANGE: _chain(
        ("foreground_subset", bc_foreground, NATIVE),
        ("mask_background", bc_masked_control, NATIVE),
        ("bc_instruction", bc_instruction, IG),
        ("first_frame", frame0, NATIVE),
        ("image_edit", image_edit, IE),
        ("controlled_video", controlled_video, CV),
        ("sa_pair", sa_pair, NATIVE),
    ),
    Category.LOCAL_CHANGE: _chain(
        ("lc_instruction", lc_instruction, IG),
        ("first_frame", frame0, NATIVE),
        ("image_edit", image_edit, IE),
        ("canny_control", control_canny, NATIVE),
        ("controlled_video", controlled_video, CV),
        ("sa_pair", sa_pair, NATIVE),
    ),
    Category.LOCAL_ADD: _chain(
        ("pick_object", la_object, NATIVE),
        ("inpaint", la_inpaint, Capability.INPAINT),
        ("la_instruction", la_instruction, IG),
        ("la_pair", la_pair, NATIVE),
    ),
    Category.LOCAL_REMOVE: _chain(
        ("add_prompt", lr_add_prompt, NATIVE),
        ("first_frame", frame0, NATIVE),
        ("image_edit", image_edit, IE),
        ("i2v", i2v_from_edit, Capability.I2V),
        ("segment_added", lr_segment, Capability.DETECT_SEGMENT),
        ("paste", lr_paste, NATIVE),
        ("lr_instruction", lr_instruction, IG),
        ("lr_pair", lr_pair, NATIVE),
    ),
    Category.SUBTITLES_EDIT: _chain(
        ("subtitle_texts", se_texts, NATIVE),
        ("subtitle_pairs", se_pairs, IG),
    ),
    Category.CAMERA_MULTI_SHOT: _chain(
        ("multi_shot", cm_generate, Capability.MULTI_SHOT_GENERATE),
        ("segment_shots", cm_segment, NATIVE),
        ("camera_pairs", cm_pairs, IG),
    ),
    Category.CREATIVE_EDIT: _chain(
        ("creative_videos", cr_generate, Capability.I2V),
        ("creative_pairs", cr_pairs, IG),
    ),
}


def run_stage(job: StageJob, adapters, store, config: Optional[PipelineConfig] = None) -> StageJob:
    """Run the job's remaining steps in order; failures become job state, never exceptions."""
    config = config or PipelineConfig()
    if job.status == DONE:
        return job
    saved = store.read_job(job.id)
    if saved is not None and saved["status"] == DONE:
        return StageJob.from_dict(saved)
    if saved is not None:
        job.artifacts = dict(saved["artifacts"], **job.artifacts)
    start = job.failed_step - 1 if job.failed_step else 0
    if saved is not None and saved.get("failed_step"):
        start = saved["failed_step"] - 1
    job.status, job.failed_step, job.error = RUNNING, None, ""
    ctx = Context(job, store, adapters, config)
    for i in range(start, len(job.steps)):
        step = job.steps[i]
        # per-step seeding keeps a resumed job identical to an uninterrupted one
        ctx.rng = np.random.default_rng(stable_seed("job", config.seed, job.id, i))
        try:
            produced = STEP_FUNCS[step.name](ctx)
        except (AdapterError, ValueError, KeyError) as exc:
            job.status, job.failed_step = FAILED, i + 1
            job.error = f"step {i + 1} ({step.name}): {type(exc).__name__}: {exc}"
            log.warning("job %s failed: %s", job.id, job.error)
            store.write_job(job.id, job.to_dict())
            return job
        job.artifacts.update(produced)
        store.write_job(job.id, job.to_dict())
    job.status = DONE
    store.write_job(job.id, job.to_dict())
    return job


def stage1_job(clip_index: int, raw_key: str) -> StageJob:
    return StageJob(f"clip{clip_index:03d}-stage1", None, STAGE1_CHAIN, {"raw": raw_key, "clip_index": clip_index})


def stage2_job(clip_index: int, category: Category, record_key: str) -> StageJob:
    return StageJob(f"clip{clip_index:03d}-{category.value}", category, CHAINS[category],
                    {"record": record_key, "clip_index": clip_index})


def make_raw_clip(store, clip_index: int, config: PipelineConfig) -> str:
    seed = stable_seed("raw", config.seed, clip_index) % (1 << 32)
    clip = synthetic_video(seed, config.raw_frames, config.height, config.width, config.n_objects)
    return store.put_clip(clip)
