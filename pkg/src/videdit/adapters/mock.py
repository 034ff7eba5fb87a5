"""Deterministic in-process stand-ins for every capability.

Each mock is a pure function of (request, endpoint seed, fault schedule). The
generative mocks return structurally valid media (right geometry, 8-bit grid)
rather than realistic imagery, and the editing mocks keep changes local so that
locality invariants stay checkable.

Scene convention shared with the synthetic clip generator: the background is
gray (R == G == B) and every object is painted in one exact palette color, so
detection is color matching.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy import ndimage

from ..core import Category, VideoClip, quantize, stable_seed
from .base import Capability, TransientError

# name -> 8-bit RGB; no entry is gray
PALETTE = {
    "red ball": (230, 40, 40),
    "blue box": (40, 60, 220),
    "green plant": (40, 200, 60),
    "yellow star": (240, 220, 30),
    "purple cup": (150, 50, 200),
    "orange cat": (250, 140, 20),
    "cyan kite": (30, 220, 230),
    "pink hat": (250, 110, 190),
}


def palette_rgb(name: str) -> np.ndarray:
    return np.array(PALETTE[name], dtype=np.float64) / 255.0


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def detect_objects(clip: VideoClip, queries=None) -> list[tuple[str, np.ndarray]]:
    """(name, T x H x W bool mask) for each palette color present in the clip."""
    out = []
    frames = np.round(clip.frames * 255).astype(np.int16)
    if frames.shape[-1] != 3:
        return out
    for name, rgb in PALETTE.items():
        if queries is not None and not any(q.lower() in name or name in q.lower() for q in queries):
            continue
        mask = np.all(frames == np.array(rgb), axis=-1)
        if mask.any():
            out.append((name, mask))
    return out


def boxes_of(mask_video: np.ndarray) -> list:
    boxes = []
    for m in mask_video:
        if not m.any():
            boxes.append(None)
            continue
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        boxes.append([int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1])
    return boxes


def mask_clip(mask_video: np.ndarray) -> VideoClip:
    return VideoClip(mask_video.astype(np.float64)[..., None])


def neighborhood_fill(clip: VideoClip, mask_video: np.ndarray) -> VideoClip:
    """Replace the 1-px dilation of the mask with the mean of a surrounding ring, per frame."""
    frames = clip.frames.copy()
    st = np.ones((3, 3), bool)
    for t, m in enumerate(mask_video):
        if not m.any():
            continue
        hole = ndimage.binary_dilation(m, st)
        ring = ndimage.binary_dilation(hole, st, iterations=2) & ~hole
        src = ring if ring.any() else ~hole
        fill = frames[t][src].mean(axis=0) if src.any() else np.full(frames.shape[-1], 0.5)
        frames[t][hole] = fill
    return VideoClip(quantize(frames))


def style_transform(frames: np.ndarray, instruction: str) -> np.ndarray:
    """Per-channel affine recolor plus channel permutation, seeded by the instruction."""
    r = _rng("style", instruction)
    c = frames.shape[-1]
    perm = r.permutation(c)
    a = r.uniform(0.6, 1.0, c)
    b = r.uniform(0.0, 0.3, c)
    return quantize(frames[..., perm] * a + b)


def draw_disc(image: np.ndarray, name: str, seed_parts) -> np.ndarray:
    out = image.copy()
    _, h, w, _ = out.shape
    r = _rng("disc", *seed_parts)
    rad = max(2, min(h, w) // 6)
    cy = int(r.integers(rad, h - rad))
    cx = int(r.integers(rad, w - rad))
    yy, xx = np.mgrid[:h, :w]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    out[:, disc] = palette_rgb(name)
    return out


def zoom_center(frames: np.ndarray, scale: float) -> np.ndarray:
    """Nearest-neighbor center crop by ``scale`` resized back to full size."""
    _, h, w, _ = frames.shape
    ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    rows = y0 + (np.arange(h) * ch) // h
    cols = x0 + (np.arange(w) * cw) // w
    return frames[:, rows][:, :, cols]


SHOT_SCALES = {"close": 0.5, "medium": 0.75, "wide": 1.0}

INSTRUCTION_TEMPLATES = {
    Category.GLOBAL_STYLE: ("Transform the video into {style} style.", None),
    Category.BACKGROUND_CHANGE: ("Replace the background with {background}, keeping the {subject} unchanged.", None),
    Category.LOCAL_CHANGE: ("Change the {object} into a {new}.", "Change the {new} back into a {object}."),
    Category.LOCAL_REMOVE: ("Remove the {object} from the video.", "Add a {object} to the video."),
    Category.LOCAL_ADD: ("Add a {object} to the video.", "Remove the {object} from the video."),
    Category.CAMERA_MULTI_SHOT: ("Change to a {target} shot.", "Change to a {source} shot."),
    Category.CREATIVE_EDIT: ("Turn the scene where {source} into one where {target}.", None),
}

SUBTITLE_TEMPLATES = {
    "add": 'Add the subtitle "{text}" at the {position} of the video.',
    "remove": 'Remove the subtitle "{text}" at the {position} of the video.',
    "replace": 'Replace the subtitle "{text}" at the {position} with "{text_b}".',
}

SCORE_LABELS = ("Instruction Compliance", "Consistency & Detail Fidelity", "Visual Quality & Stability")


def canonical_judge_text(scores, reasoning="Edit judged against the rubric.") -> str:
    c, k, q = scores
    return (
        f"Brief reasoning: {reasoning}\n"
        f"{SCORE_LABELS[0]}: {c}\n{SCORE_LABELS[1]}: {k}\n{SCORE_LABELS[2]}: {q}"
    )


class MockTransport:
    """Routes a capability request to its mock; applies the endpoint's fault schedule.

    ``options``:
      seed       mixes into every generated value
      faults     list consumed one entry per send: "fail" (transient), "ok"
      script     judge only: fixed [compliance, consistency, quality] or raw text
      mode       judge: "lenient" (default, mean >= 3) or "random";
                 edit_model_under_test: "identity" (default) or "style"
    """

    def __init__(self, store, options: dict | None = None):
        self.store = store
        self.options = dict(options or {})
        self.seed = int(self.options.get("seed", 0))
        self._faults = list(self.options.get("faults", []))
        self._calls = 0
        self._lock = threading.Lock()

    def send(self, capability: Capability, request: dict) -> dict:
        with self._lock:
            i = self._calls
            self._calls += 1
        if i < len(self._faults) and self._faults[i] == "fail":
            raise TransientError(f"injected fault on call {i + 1}")
        response = getattr(self, "_" + Capability(capability).value)(request)
        if "request_id" in request:
            response["request_id"] = request["request_id"]
        return response

    # -- helpers ------------------------------------------------------------
    def _clip(self, key) -> VideoClip:
        return self.store.get_clip(key)

    def _put(self, frames, fps=8.0) -> str:
        return self.store.put_clip(VideoClip(quantize(frames), fps=fps))

    # -- capabilities -------------------------------------------------------
    def _caption(self, req):
        clip = self._clip(req["clip"])
        names = [n for n, _ in detect_objects(clip)]
        things = ", ".join(f"a {n}" for n in names) if names else "no distinct objects"
        return {"caption": f"A {clip.num_frames}-frame video on a textured gray background showing {things}."}

    def _detect_segment(self, req):
        clip = self._clip(req["clip"])
        objs = []
        for name, mask in detect_objects(clip, req.get("queries")):
            objs.append({"name": name, "mask": self.store.put_clip(mask_clip(mask)), "boxes": boxes_of(mask)})
        return {"objects": objs}

    def _local_describe(self, req):
        mask = self._clip(req["mask"]).frames[..., 0] > 0.5
        present = [t for t in range(len(mask)) if mask[t].any()]
        if len(present) >= 2:
            x0 = np.argwhere(mask[present[0]])[:, 1].mean()
            x1 = np.argwhere(mask[present[-1]])[:, 1].mean()
            motion = "moving right" if x1 > x0 + 0.5 else "moving left" if x1 < x0 - 0.5 else "staying still"
        else:
            motion = "briefly visible"
        return {"caption": f"a {req['name']} {motion}"}

    def _depth(self, req):
        clip = self._clip(req["clip"])
        luma = clip.frames.mean(axis=-1, keepdims=True)
        return {"depth": self._put(1.0 - luma, clip.fps)}

    def _image_edit(self, req):
        img = self._clip(req["image"])
        text = req["instruction"]
        words = text.lower()
        if words.startswith("add "):
            name = next((n for n in PALETTE if n in words), None)
            if name is None:
                name = list(PALETTE)[stable_seed(text) % len(PALETTE)]
            return {"image": self._put(draw_disc(img.frames, name, (text, self.seed)), img.fps)}
        return {"image": self._put(style_transform(img.frames, f"{text}|{self.seed}"), img.fps)}

    def _controlled_video(self, req):
        ctrl = self._clip(req["control"]).frames
        first = self._clip(req["first_frame"]).frames[:1]
        edge = ctrl.mean(axis=-1, keepdims=True)
        return {"video": self._put(first * (1.0 - 0.5 * edge))}

    def _i2v(self, req):
        img = self._clip(req["image"]).frames[0]
        r = _rng("i2v", req["prompt"], req.get("seed", 0), self.seed)
        dy, dx = (int(v) for v in r.integers(-1, 2, size=2))
        frames = np.stack([np.roll(img, (t * dy, t * dx), axis=(0, 1)) for t in range(req["num_frames"])])
        return {"video": self._put(frames)}

    def _inpaint(self, req):
        clip = self._clip(req["clip"])
        mask = self._clip(req["mask"]).frames[..., 0] > 0.5
        return {"video": self.store.put_clip(neighborhood_fill(clip, mask))}

    def _multi_shot_generate(self, req):
        img = self._clip(req["image"]).frames[:1]
        order = list(_rng("shots", req["prompt"], req.get("seed", 0), self.seed).permutation(["close", "medium", "wide"]))
        n = req["frames_per_shot"]
        frames, shots = [], []
        for i, kind in enumerate(order):
            frames.append(np.repeat(zoom_center(img, SHOT_SCALES[kind]), n, axis=0))
            shots.append({"start": i * n, "end": (i + 1) * n, "shot_type": str(kind)})
        return {"video": self._put(np.concatenate(frames)), "shots": shots}

    def _instruction_generate(self, req):
        cat = Category.parse(req["category"])
        hints = req["hints"]
        if cat is Category.SUBTITLES_EDIT:
            fwd = SUBTITLE_TEMPLATES[hints["task"]].format(**hints)
            return {"instruction": fwd, "backward_instruction": None}
        fwd, bwd = INSTRUCTION_TEMPLATES[cat]
        return {"instruction": fwd.format(**hints), "backward_instruction": bwd.format(**hints) if bwd else None}

    def _judge(self, req):
        script = self.options.get("script")
        if isinstance(script, str):
            return {"text": script}
        if script is not None:
            return {"text": canonical_judge_text(tuple(int(s) for s in script))}
        r = _rng("judge", req["source"], req["edited"], req["prompt"], self.seed)
        if self.options.get("mode", "lenient") == "random":
            scores = tuple(int(v) for v in r.integers(1, 6, size=3))
        else:
            c = int(r.integers(4, 6))
            scores = (c, int(r.integers(3, c + 1)), int(r.integers(3, c + 1)))
        return {"text": canonical_judge_text(scores)}

    def _edit_model_under_test(self, req):
        clip = self._clip(req["source"])
        if self.options.get("mode", "identity") == "style":
            return {"video": self._put(style_transform(clip.frames, req["instruction"]), clip.fps)}
        return {"video": req["source"]}
