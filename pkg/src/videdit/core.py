"""Domain types shared across the package, plus structural validation and clip I/O."""
from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image


class ParameterError(ValueError):
    """Bad configuration value or inconsistent array shape."""


class Category(str, enum.Enum):
    GLOBAL_STYLE = "GlobalStyle"
    BACKGROUND_CHANGE = "BackgroundChange"
    LOCAL_CHANGE = "LocalChange"
    LOCAL_REMOVE = "LocalRemove"
    LOCAL_ADD = "LocalAdd"
    SUBTITLES_EDIT = "SubtitlesEdit"
    CAMERA_MULTI_SHOT = "CameraMultiShot"
    CREATIVE_EDIT = "CreativeEdit"

    @property
    def spatially_aligned(self) -> bool:
        return self not in (Category.CAMERA_MULTI_SHOT, Category.CREATIVE_EDIT)

    @classmethod
    def parse(cls, name: str) -> "Category":
        """Accept the enum value ("LocalAdd") or the member name ("LOCAL_ADD"), any case."""
        key = name.strip().replace("-", "").replace("_", "").lower()
        for member in cls:
            if key in (member.value.lower(), member.name.replace("_", "").lower()):
                return member
        raise ValueError(f"unknown category: {name!r}")


# Column order used by the published result tables.
TABLE_ORDER = (
    Category.GLOBAL_STYLE,
    Category.BACKGROUND_CHANGE,
    Category.LOCAL_CHANGE,
    Category.LOCAL_REMOVE,
    Category.LOCAL_ADD,
    Category.SUBTITLES_EDIT,
    Category.CREATIVE_EDIT,
    Category.CAMERA_MULTI_SHOT,
)


def quantize(frames: np.ndarray) -> np.ndarray:
    """Snap values onto the 8-bit grid so that PNG persistence is lossless."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8) / 255.0


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VideoClip:
    frames: np.ndarray  # T x H x W x C, float in [0, 1]
    fps: float = 8.0
    id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[..., None]
        object.__setattr__(self, "frames", _frozen(frames))

    @property
    def shape(self) -> tuple:
        return self.frames.shape

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def geometry(self) -> tuple:
        """T, H, W: the part of the shape that spatially aligned pairs must share."""
        return self.frames.shape[:3]

    def with_frames(self, frames: np.ndarray, id: Optional[str] = None) -> "VideoClip":
        return VideoClip(frames, fps=self.fps, id=self.id if id is None else id)

    def same_pixels(self, other: "VideoClip") -> bool:
        return self.frames.shape == other.frames.shape and bool(np.array_equal(self.frames, other.frames))

    def violations(self, name: str = "clip") -> list["Violation"]:
        out = []
        f = self.frames
        if f.ndim != 4:
            return [Violation(name, "frames-must-be-THWC")]
        t, h, w, c = f.shape
        if t < 1:
            out.append(Violation(name, "no-frames"))
        if h < 4 or w < 4:
            out.append(Violation(name, "frame-too-small"))
        if c not in (1, 3):
            out.append(Violation(name, "channels-not-1-or-3"))
        if f.size and not np.all(np.isfinite(f)):
            out.append(Violation(name, "non-finite-values"))
        elif f.size and (f.min() < 0.0 or f.max() > 1.0):
            out.append(Violation(name, "values-outside-unit-range"))
        return out


@dataclass(frozen=True, eq=False)
class LatentVideo:
    data: np.ndarray  # t x h x w x c_lat
    spatial_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, np.float64))
        if self.data.ndim != 4:
            raise ValueError("latent must be t x h x w x c")

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class InstructionEmbedding:
    tokens: np.ndarray  # L x d_text
    is_prefix: np.ndarray  # L, bool

    def __post_init__(self):
        object.__setattr__(self, "tokens", _frozen(self.tokens, np.float64))
        object.__setattr__(self, "is_prefix", _frozen(self.is_prefix, bool))
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("tokens must be a non-empty L x d array")
        if self.is_prefix.shape != (self.tokens.shape[0],):
            raise ValueError("prefix mask length must equal the token count")


@dataclass(frozen=True, eq=False)
class ObjectEntry:
    name: str
    boxes: tuple  # per frame (x0, y0, x1, y1); None where absent
    mask_video: np.ndarray  # T x H x W bool
    local_caption: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mask_video", _frozen(self.mask_video, bool))
        object.__setattr__(self, "boxes", tuple(None if b is None else tuple(int(v) for v in b) for b in self.boxes))


@dataclass(frozen=True, eq=False)
class ClipRecord:
    clip: VideoClip
    caption: str
    objects: tuple = ()
    edge_video: Optional[VideoClip] = None
    depth_video: Optional[VideoClip] = None

    def violations(self) -> list["Violation"]:
        out = []
        geo = self.clip.geometry
        t, h, w = geo
        for i, obj in enumerate(self.objects):
            if obj.mask_video.shape != geo:
                out.append(Violation(f"objects[{i}].mask_video", "shape-mismatch"))
            elif not obj.mask_video.any():
                out.append(Violation(f"objects[{i}].mask_video", "empty-mask"))
            for b in obj.boxes:
                if b is not None and not (0 <= b[0] <= b[2] <= w and 0 <= b[1] <= b[3] <= h):
                    out.append(Violation(f"objects[{i}].boxes", "box-out-of-frame"))
                    break
        if self.edge_video is not None and self.edge_video.geometry != geo:
            out.append(Violation("edge_video", "shape-mismatch"))
        return out


@dataclass(frozen=True, eq=False)
class EditPair:
    source: VideoClip
    target: VideoClip
    category: Category
    instruction: str
    backward_instruction: Optional[str] = None
    id: str = ""


@dataclass(frozen=True)
class ScoreTriple:
    compliance: int
    consistency: int
    quality: int
    reasoning: str = ""
    cap_violated: bool = False

    def scores(self) -> tuple:
        return (self.compliance, self.consistency, self.quality)

    def replace(self, **kw) -> "ScoreTriple":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


def validate_pair(pair) -> list[Violation]:
    """Return every broken invariant of ``pair``; an empty list means the pair is valid.

    Never raises, whatever is passed in.
    """
    out: list[Violation] = []
    try:
        instruction = getattr(pair, "instruction", None)
        if not isinstance(instruction, str) or not instruction.strip():
            out.append(Violation("instruction", "empty-instruction"))
        backward = getattr(pair, "backward_instruction", None)
        if backward is not None and (not isinstance(backward, str) or not backward.strip()):
            out.append(Violation("backward_instruction", "empty-instruction"))
        category = getattr(pair, "category", None)
        if not isinstance(category, Category):
            out.append(Violation("category", "unknown-category"))
        clips = {}
        for name in ("source", "target"):
            clip = getattr(pair, name, None)
            if not isinstance(clip, VideoClip):
                out.append(Violation(name, "not-a-clip"))
                continue
            out.extend(clip.violations(name))
            clips[name] = clip
        if (
            isinstance(category, Category)
            and category.spatially_aligned
            and len(clips) == 2
            and clips["source"].geometry != clips["target"].geometry
        ):
            out.append(Violation("target", "shape-mismatch"))
    except Exception as exc:  # totality: report instead of raising
        out.append(Violation("pair", f"unreadable: {type(exc).__name__}"))
    return out


def word_count(instruction: str) -> int:
    return len(instruction.split())


# ---------------------------------------------------------------------------
# Persistence: clip directories and pair manifests


def save_clip(clip: VideoClip, directory) -> Path:
    """Write ``clip`` as numbered PNG frames plus ``meta.json``.

    Values are quantized to 8 bits on the way out; clips already on the 8-bit
    grid (see :func:`quantize`) round-trip exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(clip.frames, 0, 1) * 255).astype(np.uint8)
    for i, frame in enumerate(data):
        img = Image.fromarray(frame[..., 0] if frame.shape[-1] == 1 else frame)
        img.save(directory / f"{i:05d}.png", optimize=False)
    meta = {"id": clip.id, "fps": clip.fps, "shape": list(clip.shape)}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return directory


def load_clip(directory) -> VideoClip:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    t, h, w, c = meta["shape"]
    frames = np.empty((t, h, w, c), dtype=np.uint8)
    for i in range(t):
        arr = np.asarray(Image.open(directory / f"{i:05d}.png"))
        frames[i] = arr.reshape(h, w, c)
    return VideoClip(frames / 255.0, fps=meta["fps"], id=meta["id"])


def pair_record(pair: EditPair, source_ref: str, target_ref: str, **extra) -> dict:
    rec = {
        "id": pair.id,
        "category": pair.category.value,
        "instruction": pair.instruction,
        "backward_instruction": pair.backward_instruction,
        "source": source_ref,
        "target": target_ref,
    }
    rec.update(extra)
    return rec


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_pair_manifest(path, pairs: Sequence[EditPair], clip_root) -> Path:
    """Write pairs as JSON Lines, saving clips under ``clip_root`` with paths relative to the manifest."""
    path = Path(path)
    clip_root = Path(clip_root)
    records = []
    for pair in pairs:
        refs = []
        for role, clip in (("src", pair.source), ("tgt", pair.target)):
            d = save_clip(clip, clip_root / f"{pair.id}_{role}")
            refs.append(os.path.relpath(d, path.parent))
        records.append(pair_record(pair, *refs))
    return write_jsonl(path, records)


def read_pair_manifest(path) -> list[EditPair]:
    path = Path(path)
    pairs = []
    for rec in read_jsonl(path):
        pairs.append(
            EditPair(
                source=load_clip(path.parent / rec["source"]),
                target=load_clip(path.parent / rec["target"]),
                category=Category(rec["category"]),
                instruction=rec["instruction"],
                backward_instruction=rec.get("backward_instruction"),
                id=rec["id"],
            )
        )
    return pairs


def stable_seed(*parts) -> int:
    """64-bit seed derived from the string forms of ``parts``; stable across processes."""
    import hashlib

    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")
