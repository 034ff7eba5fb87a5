import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import best_subset, mask_iou as oracle_iou
from videdit.adapters import AdapterSet, default_mock_registry
from videdit.core import Category, ParameterError, VideoClip, quantize, validate_pair
from videdit.pipeline import (
    CHAINS,
    DONE,
    FAILED,
    POSITIONS,
    SHOT_TYPES,
    TASKS,
    ConstructionError,
    LayoutError,
    MaskSet,
    PipelineConfig,
    ShotSegment,
    SubtitleStyle,
    TooShortError,
    band_rows,
    build_camera_pairs,
    build_creative_pairs,
    build_local_add_pair,
    build_local_remove_pair,
    build_subtitle_triplet,
    canny_edges,
    composite_masked,
    dilate_video,
    judge_pairs,
    mask_background_of,
    mask_iou,
    render_subtitle,
    run_pipeline,
    run_stage,
    sample_clip_window,
    segment_shots,
    select_foreground_subset,
    stage1_job,
    stage2_job,
    synthetic_video,
    text_raster,
)
from videdit.pipeline.jobs import make_raw_clip
from videdit.store import ArtifactStore


def clip_of(frames):
    return VideoClip(quantize(frames))


# --- windowing --------------------------------------------------------------


def test_window_forced():
    assert sample_clip_window(129, 0, 129, 129) == (0, 129)


def test_window_range_and_determinism():
    draws = [sample_clip_window(500, s) for s in range(300)]
    assert all(65 <= n <= 129 and 0 <= a and a + n <= 500 for a, n in draws)
    assert sample_clip_window(500, 42) == sample_clip_window(500, 42)


def test_window_too_short():
    with pytest.raises(TooShortError):
        sample_clip_window(64, 0)


def test_window_capped_by_video_length():
    for s in range(50):
        start, n = sample_clip_window(70, s)
        assert 65 <= n <= 70 and start + n <= 70


# --- canny ------------------------------------------------------------------


def test_canny_constant_frame_no_edges():
    out = canny_edges(VideoClip(np.full((2, 16, 16, 3), 0.4)))
    assert out.shape == (2, 16, 16, 1)
    assert not out.frames.any()


@pytest.mark.parametrize("c", [5, 8, 11])
def test_canny_vertical_step(c):
    frames = np.zeros((1, 16, 20, 1))
    frames[..., c:, :] = 1.0
    edges = canny_edges(VideoClip(frames)).frames[0, :, :, 0]
    # oracle: strongest horizontal gradient per row sits at the step
    grad = np.abs(np.diff(frames[0, :, :, 0], axis=1))
    assert set(np.argmax(grad, axis=1) + 1) == {c}
    cols = set(np.nonzero(edges)[1])
    assert cols and cols <= {c - 1, c, c + 1}
    assert set(np.unique(edges)) <= {0.0, 1.0}


def test_canny_binary_output(rng):
    out = canny_edges(VideoClip(rng.random((3, 16, 16, 3))))
    assert set(np.unique(out.frames)) <= {0.0, 1.0}


def test_canny_threshold_order():
    with pytest.raises(ParameterError):
        canny_edges(VideoClip(np.zeros((1, 8, 8, 1))), 0.3, 0.2)


# --- masks ------------------------------------------------------------------


def test_mask_iou_examples():
    a = np.zeros((2, 2), bool)
    b = np.zeros((2, 2), bool)
    assert mask_iou(a, b) == 1.0
    a[0, 0] = a[0, 1] = True
    b[0, 1] = b[1, 1] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    with pytest.raises(ParameterError):
        mask_iou(a, np.zeros((3, 3), bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_iou_matches_set_oracle(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 6, 6)) < 0.4
    assert mask_iou(a, b) == oracle_iou(a, b)


def test_subset_full_union():
    r = np.random.default_rng(0)
    masks = [r.random((8, 8)) < 0.3 for _ in range(4)]
    fg = np.logical_or.reduce(masks)
    idx, iou = select_foreground_subset(fg, masks)
    assert iou == 1.0
    assert np.array_equal(np.logical_or.reduce([masks[i] for i in idx]), fg)


def test_subset_single_mask():
    fg = np.zeros((8, 8), bool)
    fg[:3, :3] = True
    other = np.zeros((8, 8), bool)
    other[5:, 5:] = True
    assert select_foreground_subset(fg, MaskSet((fg.copy(), other), ("a", "b"))) == ((0,), 1.0)


def test_subset_none_and_empty():
    fg = np.zeros((4, 4), bool)
    fg[0] = True
    m = np.zeros((4, 4), bool)
    m[3] = True
    assert select_foreground_subset(fg, [m]) is None
    assert select_foreground_subset(fg, []) is None


def test_subset_matches_oracle(rng):
    for _ in range(150):
        n = int(rng.integers(1, 8))
        masks = [rng.random((8, 8)) < rng.uniform(0.05, 0.4) for _ in range(n)]
        pick = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        fg = np.logical_or.reduce([masks[i] for i in pick])
        flips = rng.random((8, 8)) < 0.02
        fg = fg ^ flips
        thr = float(rng.choice([0.5, 0.8, 0.95]))
        assert select_foreground_subset(fg, masks, thr) == best_subset(fg, masks, thr)


def test_subset_greedy_beyond_limit():
    masks = []
    for i in range(14):
        m = np.zeros((4, 14), bool)
        m[:, i] = True
        masks.append(m)
    fg = np.zeros((4, 14), bool)
    fg[:, :5] = True
    idx, iou = select_foreground_subset(fg, masks, 0.9, exhaustive_limit=12)
    assert idx == (0, 1, 2, 3, 4) and iou == 1.0


def test_composite_and_mask_background(rng):
    base = clip_of(rng.random((2, 6, 6, 3)))
    donor = clip_of(rng.random((2, 6, 6, 3)))
    none = np.zeros((2, 6, 6), bool)
    assert composite_masked(base, donor, none).same_pixels(base)
    assert composite_masked(base, donor, ~none).same_pixels(donor)
    checker = (np.indices((2, 6, 6)).sum(0) % 2).astype(bool)
    out = composite_masked(base, donor, checker)
    assert np.array_equal(out.frames, np.where(checker[..., None], donor.frames, base.frames))
    assert mask_background_of(base, ~none).same_pixels(base)
    assert not mask_background_of(base, none).frames.any()
    assert np.array_equal(mask_background_of(base, checker).frames, base.frames * checker[..., None])
    with pytest.raises(ParameterError):
        composite_masked(base, donor, np.zeros((2, 5, 6), bool))


# --- subtitles --------------------------------------------------------------


def test_render_locality_and_band(rng):
    clip = clip_of(rng.random((3, 32, 32, 3)))
    for pos in POSITIONS:
        out = render_subtitle(clip, "HELLO", pos)
        r0, r1 = band_rows(32, pos)
        changed = np.any(out.frames != clip.frames, axis=(0, 2, 3))
        assert changed.any()
        assert not changed[:r0].any() and not changed[r1:].any()


def test_render_raster_count_on_black():
    clip = VideoClip(np.zeros((4, 32, 32, 3)))
    out = render_subtitle(clip, "HI", "top")
    lit = np.count_nonzero(out.frames.any(axis=-1))
    assert lit == int(text_raster("HI").sum()) * 4
    assert int(text_raster("HI").sum()) == 17 + 11  # ink pixels in the H and I glyphs


def test_render_layout_error():
    clip = VideoClip(np.zeros((1, 32, 32, 3)))
    with pytest.raises(LayoutError):
        render_subtitle(clip, "TOO LONG", "top")
    with pytest.raises(LayoutError):
        render_subtitle(clip, "HI", "top", SubtitleStyle(scale=2))  # 14 rows > 10-row band
    with pytest.raises(LayoutError):
        render_subtitle(clip, "", "top")


def test_subtitle_triplet_round_trip(rng):
    clip = clip_of(rng.random((2, 32, 32, 3)))
    for pos in POSITIONS:
        add, rem, rep = build_subtitle_triplet(clip, "HI", "OK", pos)
        assert rem.target.same_pixels(add.source) and add.source.same_pixels(clip)
        assert rem.source.same_pixels(add.target)
        assert {p.category for p in (add, rem, rep)} == {Category.SUBTITLES_EDIT}
        assert not validate_pair(add) and not validate_pair(rem) and not validate_pair(rep)
    same = build_subtitle_triplet(clip, "HI", "HI", "middle")[2]
    assert same.source.same_pixels(same.target)


# --- builders ---------------------------------------------------------------


def test_local_add_remove_construction(rng):
    orig = clip_of(rng.random((2, 8, 8, 3)))
    other = clip_of(rng.random((2, 8, 8, 3)))
    add = build_local_add_pair(orig, other, "a red ball")
    rem = build_local_remove_pair(orig, other, "a red ball")
    assert add.target is orig and rem.target is orig
    assert add.category is Category.LOCAL_ADD and rem.category is Category.LOCAL_REMOVE
    with pytest.raises(ParameterError):
        build_local_add_pair(orig, clip_of(rng.random((2, 4, 4, 3))), "x")


def test_segment_shots_examples():
    assert [(s.start, s.end) for s in segment_shots(VideoClip(np.full((6, 4, 4, 1), 0.3)))] == [(0, 6)]
    frames = np.concatenate([np.full((3, 4, 4, 1), v) for v in (0.1, 0.5, 0.9)])
    assert [(s.start, s.end) for s in segment_shots(VideoClip(frames))] == [(0, 3), (3, 6), (6, 9)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_segment_shots_partition(seed, thr):
    r = np.random.default_rng(seed)
    video = VideoClip(r.random((int(r.integers(2, 12)), 4, 4, 1)))
    segs = segment_shots(video, thr)
    assert segs[0].start == 0 and segs[-1].end == video.num_frames
    assert all(a.end == b.start for a, b in zip(segs, segs[1:]))
    assert sum(len(s) for s in segs) == video.num_frames


def test_camera_pairs_enumeration(rng):
    video = clip_of(rng.random((9, 8, 8, 3)))
    shots = [ShotSegment(0, 3, "wide"), ShotSegment(3, 6, "close"), ShotSegment(6, 9, "medium")]
    pairs = build_camera_pairs(shots, video)
    assert len(pairs) == 6
    got = {tuple(p.id.split("-to-")) for p in pairs}
    assert got == {(a, b) for a, b in itertools.product(SHOT_TYPES, SHOT_TYPES) if a != b}
    assert all(p.category is Category.CAMERA_MULTI_SHOT and not validate_pair(p) for p in pairs)
    with pytest.raises(ConstructionError):
        build_camera_pairs(shots[:2], video)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_creative_pairs_count(n, rng):
    videos = [clip_of(rng.random((2, 8, 8, 3))) for _ in range(n)]
    pairs = build_creative_pairs(videos)
    assert len(pairs) == n * (n - 1)
    assert all(p.source is not p.target for p in pairs)


def test_creative_needs_two(rng):
    with pytest.raises(ConstructionError):
        build_creative_pairs([clip_of(rng.random((2, 8, 8, 3)))])


# --- orchestration ------------------------------------------------------------


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "store")


def _record(store, adapters, cfg):
    raw = make_raw_clip(store, 0, cfg)
    job = run_stage(stage1_job(0, raw), adapters, store, cfg)
    assert job.status == DONE
    return job.artifacts["record"]


def test_global_style_job_persists_artifacts(store):
    cfg = PipelineConfig(seed=3)
    adapters = AdapterSet(default_mock_registry(3), store)
    job = run_stage(stage2_job(0, Category.GLOBAL_STYLE, _record(store, adapters, cfg)), adapters, store, cfg)
    assert job.status == DONE
    for name in ("edited_frame", "control", "target", "pairs"):
        assert store.has(job.artifacts[name])
    assert store.get_clip(job.artifacts["edited_frame"]).num_frames == 1
    assert store.read_job(job.id)["status"] == DONE
    before = store.checksum()
    again = run_stage(stage2_job(0, Category.GLOBAL_STYLE, job.inputs["record"]), adapters, store, cfg)
    assert again.status == DONE and store.checksum() == before


def test_failed_step_index_and_resume(store):
    cfg = PipelineConfig(seed=1)
    healthy = AdapterSet(default_mock_registry(1), store, sleep=lambda s: None)
    record = _record(store, healthy, cfg)
    flaky = AdapterSet(default_mock_registry(1, inpaint={"max_retries": 1, "options": {"faults": ["fail"] * 4}}),
                       store, sleep=lambda s: None)
    job = run_stage(stage2_job(0, Category.LOCAL_ADD, record), flaky, store, cfg)
    assert CHAINS[Category.LOCAL_ADD][1].name == "inpaint"
    assert job.status == FAILED and job.failed_step == 2
    assert "object" in job.artifacts and "inpainted" not in job.artifacts
    assert store.read_job(job.id)["failed_step"] == 2
    resumed = run_stage(stage2_job(0, Category.LOCAL_ADD, record), healthy, store, cfg)
    assert resumed.status == DONE
    fresh_store = ArtifactStore(store.root.parent / "fresh")
    fresh = AdapterSet(default_mock_registry(1), fresh_store)
    clean = run_stage(stage2_job(0, Category.LOCAL_ADD, _record(fresh_store, fresh, cfg)), fresh, fresh_store, cfg)
    assert clean.artifacts["pairs"] == resumed.artifacts["pairs"]


def test_pipeline_pairs_valid_and_local(store):
    adapters = AdapterSet(default_mock_registry(5), store)
    res = run_pipeline(2, store, adapters, config=PipelineConfig(seed=5))
    assert not res.failed_jobs
    cats = {p["category"] for p in res.pairs}
    assert cats == {c.value for c in Category}
    for rec in res.pairs:
        src, tgt = store.get_clip(rec["source"]), store.get_clip(rec["target"])
        from videdit.core import EditPair

        assert not validate_pair(EditPair(src, tgt, Category(rec["category"]), rec["instruction"]))
        if rec["category"] in ("LocalAdd", "LocalRemove"):
            diff = np.any(src.frames != tgt.frames, axis=-1)
            assert diff.any()
    subs = [p for p in res.pairs if p["category"] == "SubtitlesEdit"]
    assert len(subs) == 2 * 9
    variants = {tuple(p["id"].rsplit("-", 2)[-2:]) for p in subs}
    assert variants == {(t, p) for t in TASKS for p in POSITIONS}
    judge_pairs(res, adapters)
    assert res.report["exempt"]["SubtitlesEdit"] == 18
    assert all(res.report["kept"].get(c.value, 0) >= 1 for c in Category if c is not Category.SUBTITLES_EDIT)


def test_synthetic_video_on_grid():
    clip = synthetic_video(3, frames=5)
    assert clip.shape == (5, 32, 32, 3)
    assert np.array_equal(quantize(clip.frames), clip.frames)
    assert np.array_equal(synthetic_video(3, frames=5).frames, clip.frames)


def test_dilate_video():
    m = np.zeros((1, 5, 5), bool)
    m[0, 2, 2] = True
    assert dilate_video(m).sum() == 9
