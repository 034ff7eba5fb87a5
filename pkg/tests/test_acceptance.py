"""Acceptance criteria, one test each, with runtime budgets.

Every test records a PASS/FAIL line; the lines are printed at the end of the
pytest run (see conftest.py) and when this file is executed directly.
"""
import functools
import itertools
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from gradcheck import check_module_gradient
from oracles import best_subset_bits, dense_moe
from videdit.adapters import AdapterSet, canonical_judge_text, default_mock_registry
from videdit.bench import REFERENCE_COUNTS, format_score, overall_from_category_means
from videdit.connector import ConnectorConfig, MoEFFN, connector_forward, gate_select, init_connector, moe_ffn_forward
from videdit.core import TABLE_ORDER, Category, EditPair, ScoreTriple, VideoClip, quantize, read_jsonl, \
    read_pair_manifest, validate_pair
from videdit.editnet import (
    EditorConfig,
    TrainConfig,
    collate,
    evaluate_loss,
    init_train_state,
    make_train_sample,
    train,
    training_step,
)
from videdit.filtering import (
    LabeledPair,
    enforce_compliance_cap,
    judge_accuracy,
    parse_judge_response,
    retain,
    stats_from_counts,
)
from videdit.pipeline import (
    DONE,
    POSITIONS,
    SHOT_TYPES,
    TASKS,
    PipelineConfig,
    ShotSegment,
    build_camera_pairs,
    build_creative_pairs,
    build_subtitle_triplet,
    dilate_video,
    run_stage,
    sample_clip_window,
    select_foreground_subset,
    stage1_job,
    stage2_job,
    synthetic_video,
)
from videdit.pipeline.jobs import make_raw_clip
from videdit.store import ArtifactStore

RESULTS = {}

REPORTED_MEANS = (3.11, 2.72, 3.19, 1.42, 2.41, 2.56, 2.01, 1.24)
DATASET_COUNTS = {
    "GlobalStyle": 431716, "BackgroundChange": 396212, "LocalChange": 478696, "LocalRemove": 400595,
    "LocalAdd": 337541, "SubtitlesEdit": 400000, "CreativeEdit": 381045, "CameraMultiShot": 200042,
}


def criterion(number, title, budget):
    """Time the test, enforce the budget, and record a PASS/FAIL line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                fn(*args, **kwargs)
            except BaseException as exc:
                elapsed = time.perf_counter() - start
                RESULTS[number] = f"FAIL  {number:2d}. {title} ({elapsed:.1f}s): {type(exc).__name__}: {exc}"
                raise
            elapsed = time.perf_counter() - start
            ok = elapsed < budget
            RESULTS[number] = f"{'PASS' if ok else 'FAIL'}  {number:2d}. {title} ({elapsed:.1f}s, budget {budget}s)"
            assert ok, f"criterion {number} took {elapsed:.1f}s, budget {budget}s"

        return run

    return wrap


def random_moe(rng, d=4, ff=5, e=6, k=2, gate_scale=1.0):
    moe = MoEFFN(d, ff, e, k).double()
    with torch.no_grad():
        moe.gate.copy_(torch.from_numpy(rng.standard_normal((e, d)) * gate_scale))
        for ex in moe.expert:
            for p in ex.parameters():
                p.copy_(torch.from_numpy(rng.standard_normal(p.shape)))
    return moe


def moe_params(moe):
    gate = moe.gate.detach().numpy()
    experts = [tuple(getattr(ex, n).detach().numpy() for n in ("W1", "b1", "W2", "b2")) for ex in moe.expert]
    return gate, experts


def style_pairs(n, seed=0):
    pairs = []
    for i in range(n):
        src = synthetic_video(seed * 1000 + i, frames=8)
        tgt = quantize(np.clip(0.6 * src.frames[..., ::-1] + 0.25, 0, 1))
        pairs.append(EditPair(src, VideoClip(tgt), Category.GLOBAL_STYLE, f"Apply warm film look {i % 4}.", id=str(i)))
    return pairs


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# ---------------------------------------------------------------------------


@criterion(1, "zero-init invisibility: full editor equals connector-masked baseline", 10)
def test_c01_zero_init_invisibility():
    cfg = EditorConfig()
    rng = np.random.default_rng(1)
    worst = 0.0
    for draw in range(20):
        state = init_train_state(cfg, seed=draw)
        pairs = [EditPair(VideoClip(quantize(rng.random((8, 32, 32, 3)))), VideoClip(quantize(rng.random((8, 32, 32, 3)))),
                          Category.LOCAL_CHANGE, f"edit number {draw}") for _ in range(2)]
        batch = collate([make_train_sample(p, cfg) for p in pairs])
        x = torch.from_numpy(rng.standard_normal(batch["target"].shape)).float()
        t = torch.from_numpy(rng.random(2)).float()
        with torch.no_grad():
            full = state.editor(x, batch["source"], t, batch["text"], batch["mllm"], use_connector=True)
            base = state.editor(x, batch["source"], t, batch["text"], batch["mllm"], use_connector=False)
        worst = max(worst, float((full - base).abs().max()))
    assert worst <= 1e-6, worst


@criterion(2, "MoE forward matches dense oracle; gate weights sum to 1; k=2 of E=6", 5)
def test_c02_moe_dense_oracle(f64):
    rng = np.random.default_rng(2)
    for _ in range(500):
        moe = random_moe(rng, e=6, k=2)
        x = rng.standard_normal(4)
        want, chosen, w_oracle = dense_moe(x, *moe_params(moe), 2)
        got = moe_ffn_forward(torch.from_numpy(x), moe).detach().numpy()
        assert np.max(np.abs(got - want)) <= 1e-10
        idx, w = gate_select(torch.from_numpy(x)[None], moe.gate, 2)
        assert idx.shape == (1, 2) and len(set(idx[0].tolist())) == 2
        assert sorted(idx[0].tolist()) == chosen
        assert abs(float(w.detach().sum()) - 1.0) <= 1e-12


@criterion(3, "gradient check vs central differences, MoE FFN and connector", 30)
def test_c03_gradient_check(f64):
    rng = np.random.default_rng(3)
    tiny = ConnectorConfig(d_in=3, d_hidden=4, d_out=3, num_queries=2, n_enc_layers=1, n_dec_layers=1,
                           num_experts=3, top_k=2, d_ff=5, n_heads=2)
    done = 0
    while done < 50:
        moe = random_moe(rng, d=4, e=3, k=2, gate_scale=3.0)
        x = torch.from_numpy(rng.standard_normal((2, 4)))
        moe(x)
        if moe.last_margin <= 0.1:
            continue
        r = torch.from_numpy(rng.standard_normal((2, 4)))
        assert check_module_gradient(moe, x, lambda y: (y * r).sum(), rng, n_coords=12, n_dirs=3) < 1e-4
        done += 1
    done = 0
    while done < 50:
        model = init_connector(tiny, int(rng.integers(1 << 30)), dtype=torch.float64)
        with torch.no_grad():
            model.out_proj.weight.copy_(torch.from_numpy(rng.standard_normal((3, 4))))
            for m in model.moe_layers():
                m.gate.mul_(6.0)
        x = torch.from_numpy(rng.standard_normal((2, 3, 3)))
        model(x)
        if model.min_routing_margin() <= 0.1:
            continue
        r = torch.from_numpy(rng.standard_normal((2, 2, 3)))
        assert check_module_gradient(model, x, lambda y: (y * r).sum(), rng, n_coords=12, n_dirs=3) < 1e-4
        done += 1


@criterion(4, "connector shape contract at L_q=512; zero-init output is all zero", 5)
def test_c04_shape_contract():
    cfg = ConnectorConfig.full_scale(d_in=24, d_hidden=16, d_out=12, d_ff=32, n_heads=2)
    model = init_connector(cfg, 0)
    for b, s in ((1, 1), (2, 7), (3, 20)):
        y = connector_forward(torch.randn(b, s, 24) * 5, model)
        assert tuple(y.shape) == (b, 512, 12)
        assert torch.count_nonzero(y) == 0


@criterion(5, "foreground subset selection agrees with exhaustive oracle (1000 cases)", 60)
def test_c05_subset_selection():
    rng = np.random.default_rng(5)
    found = 0
    for case in range(1000):
        n = int(rng.integers(1, 11))
        masks = [rng.random((8, 8)) < rng.uniform(0.05, 0.35) for _ in range(n)]
        kind = case % 3
        if kind == 0:  # exact union of a random subset
            pick = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
            fg = np.logical_or.reduce([masks[i] for i in pick])
        elif kind == 1:  # union plus a few flipped pixels
            pick = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
            fg = np.logical_or.reduce([masks[i] for i in pick]) ^ (rng.random((8, 8)) < 0.03)
        else:  # unrelated foreground
            fg = rng.random((8, 8)) < 0.3
        want = best_subset_bits(fg, masks, 0.95)
        got = select_foreground_subset(fg, masks, 0.95)
        assert got == want, (case, got, want)
        found += want is not None
    assert found > 300  # the fixture exercises both outcomes


@criterion(6, "LocalAdd/LocalRemove pairing symmetry over 20 pipeline pairs", 10)
def test_c06_pairing_symmetry(tmp_path):
    store = ArtifactStore(tmp_path)
    cfg = PipelineConfig(seed=6)
    adapters = AdapterSet(default_mock_registry(6), store)
    checked = 0
    for i in range(10):
        s1 = run_stage(stage1_job(i, make_raw_clip(store, i, cfg)), adapters, store, cfg)
        assert s1.status == DONE
        original = store.get_clip(store.get_json(s1.artifacts["record"])["clip"])
        for cat in (Category.LOCAL_ADD, Category.LOCAL_REMOVE):
            job = run_stage(stage2_job(i, cat, s1.artifacts["record"]), adapters, store, cfg)
            assert job.status == DONE, job.error
            (rec,) = store.get_json(job.artifacts["pairs"])
            src, tgt = store.get_clip(rec["source"]), store.get_clip(rec["target"])
            assert np.array_equal(tgt.frames, original.frames)
            mask = store.get_clip(job.artifacts["object_mask"]).frames[..., 0] > 0.5
            support = dilate_video(mask)
            diff = np.any(src.frames != tgt.frames, axis=-1)
            assert diff.any() and not (diff & ~support).any()
            checked += 1
    assert checked == 20


@criterion(7, "subtitle add/remove round trip, band locality, nine variations", 10)
def test_c07_subtitle_round_trip():
    rng = np.random.default_rng(7)
    h = 32
    band = {p: (i * (h // 3), h if i == 2 else (i + 1) * (h // 3)) for i, p in enumerate(("top", "middle", "bottom"))}
    seen = set()
    for trial in range(4):
        clip = VideoClip(quantize(rng.random((3, h, 32, 3))))
        for pos in POSITIONS:
            pairs = dict(zip(TASKS, build_subtitle_triplet(clip, "HI", "OK", pos)))
            assert np.array_equal(pairs["remove"].source.frames, pairs["add"].target.frames)
            assert np.array_equal(pairs["remove"].target.frames, clip.frames)
            assert np.array_equal(pairs["add"].source.frames, clip.frames)
            r0, r1 = band[pos]
            for task, pair in pairs.items():
                rows = np.nonzero(np.any(pair.source.frames != pair.target.frames, axis=(0, 2, 3)))[0]
                assert rows.size and rows.min() >= r0 and rows.max() < r1
                assert not validate_pair(pair)
                seen.add((task, pos))
    assert seen == set(itertools.product(TASKS, POSITIONS)) and len(seen) == 9


@criterion(8, "filtering: cap clamp, inclusive threshold, judge accuracy 0.70", 5)
def test_c08_filtering():
    capped = enforce_compliance_cap(parse_judge_response(canonical_judge_text((3, 5, 2))))
    assert capped.scores() == (3, 3, 2) and capped.cap_violated
    kept, _ = retain([({"category": "LocalAdd"}, ScoreTriple(3, 3, 3))], 3.0)
    assert len(kept) == 1
    labels, judged = [], {}
    for i in range(20):
        positive = i % 2 == 0
        labels.append(LabeledPair.from_human_scores(f"p{i}", (5, 4, 4) if positive else (2, 3, 2)))
        judge_positive = positive if i < 14 else not positive
        text = canonical_judge_text((5, 4, 4) if judge_positive else (3, 3, 2))
        judged[f"p{i}"] = enforce_compliance_cap(parse_judge_response(text))
    assert judge_accuracy(labels, judged) == 0.70


@criterion(9, "bench overall reconciliation: micro 2.40, macro 2.33", 1)
def test_c09_overall_reconciliation():
    means = dict(zip(TABLE_ORDER, REPORTED_MEANS))
    micro = overall_from_category_means(means, REFERENCE_COUNTS, "micro")
    macro = overall_from_category_means(means, REFERENCE_COUNTS, "macro")
    oracle = sum(m * REFERENCE_COUNTS[c] for c, m in means.items()) / sum(REFERENCE_COUNTS.values())
    assert abs(micro - oracle) < 1e-12
    assert abs(micro - 2.40) <= 0.01 and format_score(micro) == "2.40"
    assert abs(macro - 2.33) <= 0.01 and format_score(macro) == "2.33"
    assert abs(micro - 2.41) < abs(macro - 2.41)


@criterion(10, "dataset ratio reconciliation: GlobalStyle 14.26% within 0.05pp", 1)
def test_c10_ratios():
    stats = stats_from_counts(DATASET_COUNTS)
    assert sum(stats.counts.values()) == 3_025_847
    pct = 100 * stats.ratios["GlobalStyle"]
    assert abs(pct - 14.26) <= 0.05
    assert format_score(pct) == "14.27"
    assert abs(sum(stats.ratios.values()) - 1.0) < 1e-12


@criterion(11, "clip windowing: 10000 draws in [65,129], endpoints hit, reproducible", 5)
def test_c11_windowing():
    def draws(seed):
        g = np.random.default_rng(seed)
        return np.array([sample_clip_window(400, g) for _ in range(10_000)])

    a = draws(11)
    lengths = a[:, 1]
    assert lengths.min() == 65 and lengths.max() == 129
    assert np.all((a[:, 0] >= 0) & (a[:, 0] + lengths <= 400))
    assert np.array_equal(a, draws(11))


@criterion(12, "camera pairs = 6, creative pairs = n(n-1)", 1)
def test_c12_combinatorics():
    rng = np.random.default_rng(12)
    video = VideoClip(quantize(rng.random((9, 8, 8, 3))))
    shots = [ShotSegment(3 * i, 3 * i + 3, s) for i, s in enumerate(("medium", "wide", "close"))]
    pairs = build_camera_pairs(shots, video)
    assert len(pairs) == 6
    assert {tuple(p.id.split("-to-")) for p in pairs} == set(itertools.permutations(SHOT_TYPES, 2))
    for n in (2, 3, 4):
        vids = [VideoClip(quantize(rng.random((2, 8, 8, 3)))) for _ in range(n)]
        assert len(build_creative_pairs(vids)) == n * (n - 1)


@criterion(13, "end-to-end mock pipeline via CLI is byte-deterministic and valid", 120)
def test_c13_cli_determinism(tmp_path):
    manifests = []
    for name in ("run1", "run2"):
        store = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "videdit", "pipeline", "--categories", "all", "--n", "2",
                               "--seed", "7", "--store", str(store)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        manifests.append(store / "pipeline" / "pairs.jsonl")
    assert manifests[0].read_bytes() == manifests[1].read_bytes()
    assert {r["category"] for r in read_jsonl(manifests[0])} == {c.value for c in Category}
    for path in (manifests[0], manifests[0].with_name("all_pairs.jsonl")):
        pairs = read_pair_manifest(path)
        assert pairs and all(validate_pair(p) == [] for p in pairs)


@criterion(14, "training smoke: 200 steps cut loss below 0.9x, params finite, W_o grad nonzero", 180)
def test_c14_training_smoke():
    cfg = EditorConfig()
    samples = [make_train_sample(p, cfg) for p in style_pairs(16)]
    torch.manual_seed(0)
    state = init_train_state(cfg, TrainConfig(lr=1e-3, batch_size=4, seed=0))
    initial = evaluate_loss(state.editor, samples, seed=0)
    state, _ = training_step(samples[:4], state)
    assert state.last_grad_norms["out_proj"] > 0
    train(samples, 199, state)
    final = evaluate_loss(state.editor, samples, seed=0)
    assert state.step == 200
    assert all(torch.isfinite(p).all() for p in state.editor.parameters())
    assert final < 0.9 * initial, (initial, final)


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
