"""Pair builders for local add/remove, camera multi-shot and creative edits, plus shot segmentation."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..core import Category, EditPair, ParameterError, VideoClip

SHOT_TYPES = ("close", "medium", "wide")


class ConstructionError(ValueError):
    pass


def _same_geometry(a: VideoClip, b: VideoClip):
    if a.shape != b.shape:
        raise ParameterError(f"clip shapes differ: {a.shape} vs {b.shape}")


def build_local_add_pair(original: VideoClip, inpainted: VideoClip, obj_caption: str,
                         instruction: Optional[str] = None, backward: Optional[str] = None, id: str = "") -> EditPair:
    """The object-free inpainted clip is the source; the untouched original is the target."""
    _same_geometry(original, inpainted)
    instruction = instruction or f"Add {obj_caption} to the video."
    backward = backward or f"Remove {obj_caption} from the video."
    return EditPair(inpainted, original, Category.LOCAL_ADD, instruction, backward, id=id)


def build_local_remove_pair(original: VideoClip, synthesized_with_object: VideoClip, obj_caption: str,
                            instruction: Optional[str] = None, backward: Optional[str] = None, id: str = "") -> EditPair:
    """The clip with a pasted object is the source; the original without it is the target."""
    _same_geometry(original, synthesized_with_object)
    instruction = instruction or f"Remove {obj_caption} from the video."
    backward = backward or f"Add {obj_caption} to the video."
    return EditPair(synthesized_with_object, original, Category.LOCAL_REMOVE, instruction, backward, id=id)


@dataclass(frozen=True)
class ShotSegment:
    start: int
    end: int
    shot_type: str = "unknown"

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ParameterError(f"bad segment [{self.start}, {self.end})")
        if self.shot_type not in SHOT_TYPES + ("unknown",):
            raise ParameterError(f"unknown shot type {self.shot_type!r}")

    def __len__(self):
        return self.end - self.start

    def slice(self, video: VideoClip) -> VideoClip:
        if self.end > video.num_frames:
            raise ParameterError("segment past end of video")
        return video.with_frames(video.frames[self.start : self.end])


def frame_differences(video: VideoClip) -> np.ndarray:
    return np.abs(np.diff(video.frames, axis=0)).mean(axis=(1, 2, 3))


def segment_shots(video: VideoClip, diff_threshold: float = 0.1) -> list[ShotSegment]:
    """Cut between frames t-1 and t wherever their mean absolute difference exceeds the threshold."""
    if video.num_frames < 2:
        raise ParameterError("need at least 2 frames")
    cuts = [int(i) + 1 for i in np.flatnonzero(frame_differences(video) > diff_threshold)]
    bounds = [0] + cuts + [video.num_frames]
    return [ShotSegment(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def label_shots(segments: Sequence[ShotSegment], labels: Sequence[str]) -> list[ShotSegment]:
    if len(segments) != len(labels):
        raise ConstructionError(f"{len(segments)} segments but {len(labels)} labels")
    return [ShotSegment(s.start, s.end, lab) for s, lab in zip(segments, labels)]


def default_camera_instruction(source: str, target: str) -> tuple[str, str]:
    return f"Change to a {target} shot.", f"Change to a {source} shot."


def build_camera_pairs(shots: Sequence[ShotSegment], video: VideoClip,
                       instruct: Callable[[str, str], tuple] = default_camera_instruction, id_prefix: str = "") -> list[EditPair]:
    """All six ordered (source type, target type) pairs over one close, one medium and one wide shot."""
    by_type = {}
    for s in shots:
        if s.shot_type in by_type:
            raise ConstructionError(f"more than one {s.shot_type} shot")
        by_type[s.shot_type] = s
    missing = [t for t in SHOT_TYPES if t not in by_type]
    if missing:
        raise ConstructionError(f"missing shot types {missing}")
    pairs = []
    for a, b in itertools.permutations(SHOT_TYPES, 2):
        fwd, bwd = instruct(a, b)
        pairs.append(EditPair(by_type[a].slice(video), by_type[b].slice(video), Category.CAMERA_MULTI_SHOT,
                              fwd, bwd, id=f"{id_prefix}{a}-to-{b}"))
    return pairs


def default_creative_instruction(i: int, j: int) -> tuple[str, Optional[str]]:
    return f"Turn the scene of variant {i} into variant {j}.", None


def build_creative_pairs(videos: Sequence[VideoClip],
                         instruct: Callable[[int, int], tuple] = default_creative_instruction, id_prefix: str = "") -> list[EditPair]:
    """Every ordered pair (i, j), i != j, of videos generated from one shared frame."""
    if len(videos) < 2:
        raise ConstructionError("need at least two videos")
    pairs = []
    for i, j in itertools.permutations(range(len(videos)), 2):
        fwd, bwd = instruct(i, j)
        pairs.append(EditPair(videos[i], videos[j], Category.CREATIVE_EDIT, fwd, bwd, id=f"{id_prefix}{i}-to-{j}"))
    return pairs
