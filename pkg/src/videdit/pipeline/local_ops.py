"""Native Stage-1/Stage-2 algorithms: clip windowing, Canny edges, mask selection and compositing."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..core import ParameterError, VideoClip

LUMA = np.array([0.299, 0.587, 0.114])


class TooShortError(ValueError):
    pass


def sample_clip_window(total_frames: int, rng_seed, min_len: int = 65, max_len: int = 129) -> tuple[int, int]:
    """Uniform window length in [min_len, max_len] (capped at the video length), then a uniform start."""
    if min_len < 1 or max_len < min_len:
        raise ParameterError(f"bad window bounds [{min_len}, {max_len}]")
    if total_frames < min_len:
        raise TooShortError(f"video has {total_frames} frames, need at least {min_len}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    length = int(rng.integers(min_len, min(max_len, total_frames) + 1))
    start = int(rng.integers(0, total_frames - length + 1))
    return start, length


def extract_window(clip: VideoClip, start: int, length: int) -> VideoClip:
    if start < 0 or start + length > clip.num_frames:
        raise ParameterError("window outside clip")
    return clip.with_frames(clip.frames[start : start + length])


def luma(frames: np.ndarray) -> np.ndarray:
    return frames[..., 0] if frames.shape[-1] == 1 else frames @ LUMA


def canny_frame(gray: np.ndarray, low: float, high: float, sigma: float = 1.0) -> np.ndarray:
    g = ndimage.gaussian_filter(gray, sigma, mode="nearest") if sigma > 0 else gray
    gx = ndimage.sobel(g, axis=1, mode="nearest") / 4.0
    gy = ndimage.sobel(g, axis=0, mode="nearest") / 4.0
    mag = np.hypot(gx, gy)
    # gradient direction quantized to 0/45/90/135 degrees
    ang = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = (np.round(ang / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros_like(mag, bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag >= bwd)
    nms = np.where(keep, mag, 0.0)
    weak = nms >= low
    strong = nms >= high
    if not strong.any():
        return np.zeros_like(gray, bool)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), bool))
    good = np.unique(labels[strong])
    return np.isin(labels, good[good > 0])


def canny_edges(clip: VideoClip, low: float = 0.1, high: float = 0.2, sigma: float = 1.0) -> VideoClip:
    """Per-frame binary edges (single channel, values exactly 0 or 1).

    Luma by BT.601 weights, Gaussian blur, Sobel gradients scaled so a unit step
    has magnitude ~1, 4-direction non-maximum suppression and 8-connected
    hysteresis between ``low`` and ``high``.
    """
    if not 0 <= low <= high:
        raise ParameterError("need 0 <= low <= high")
    gray = luma(clip.frames)
    edges = np.stack([canny_frame(f, low, high, sigma) for f in gray])
    return VideoClip(edges.astype(np.float64)[..., None], fps=clip.fps)


# --- masks ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MaskSet:
    masks: tuple
    names: tuple

    def __post_init__(self):
        masks = tuple(np.asarray(m, bool) for m in self.masks)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "names", tuple(self.names))
        if len(masks) != len(self.names):
            raise ParameterError("masks and names differ in length")
        if masks and any(m.shape != masks[0].shape for m in masks):
            raise ParameterError("masks differ in shape")

    def __len__(self):
        return len(self.masks)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ParameterError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def select_foreground_subset(fg, masks, threshold: float = 0.95, exhaustive_limit: int = 12):
    """Mask combination whose union best matches ``fg``, if its IoU exceeds ``threshold``.

    Returns ``(indices, iou)`` or None. Exhaustive over all non-empty subsets
    when there are at most ``exhaustive_limit`` masks; ties on IoU go to fewer
    masks, then to the lexicographically smallest index tuple. Beyond the limit
    a greedy search adds the mask with the largest IoU gain until none helps.
    """
    if not isinstance(masks, MaskSet):
        masks = MaskSet(tuple(masks), tuple(str(i) for i in range(len(masks))))
    if not 0 < threshold <= 1:
        raise ParameterError("threshold must be in (0, 1]")
    n = len(masks)
    if n == 0:
        return None
    fg = np.asarray(fg, bool)
    if fg.shape != masks.masks[0].shape:
        raise ParameterError("foreground and masks differ in shape")
    if n > exhaustive_limit:
        return _greedy_subset(fg, masks.masks, threshold)

    # one integer code per pixel: bit i set iff mask i covers it
    code = np.zeros(fg.shape, np.int64)
    for i, m in enumerate(masks.masks):
        code |= m.astype(np.int64) << i
    codes, inv = np.unique(code.ravel(), return_inverse=True)
    fg_count = np.bincount(inv, weights=fg.ravel(), minlength=len(codes)).astype(np.int64)
    bg_count = np.bincount(inv, minlength=len(codes)).astype(np.int64) - fg_count
    subsets = np.arange(1, 1 << n, dtype=np.int64)
    hit = (subsets[:, None] & codes[None, :]) != 0
    inter = hit @ fg_count
    union = int(fg.sum()) + hit @ bg_count
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    ok = iou > threshold
    if not ok.any():
        return None
    best = iou[ok].max()
    cands = subsets[ok & (iou == best)]
    combos = [tuple(i for i in range(n) if (s >> i) & 1) for s in cands.tolist()]
    pick = min(combos, key=lambda c: (len(c), c))
    return pick, float(best)


def _greedy_subset(fg, masks, threshold):
    chosen: list[int] = []
    union = np.zeros_like(fg)
    best = -1.0
    while True:
        gains = [(mask_iou(union | m, fg), -i) for i, m in enumerate(masks) if i not in chosen]
        if not gains:
            break
        iou, neg = max(gains)
        if iou <= best:
            break
        best = iou
        chosen.append(-neg)
        union = union | masks[-neg]
    if best > threshold:
        return tuple(sorted(chosen)), float(best)
    return None


def exhaustive_subsets(n: int):
    for size in range(1, n + 1):
        yield from itertools.combinations(range(n), size)


def _check_geometry(a: VideoClip, mask_video: np.ndarray, b: Optional[VideoClip] = None):
    if mask_video.shape != a.geometry or (b is not None and b.shape != a.shape):
        raise ParameterError(
            f"geometry mismatch: {a.shape}, mask {mask_video.shape}" + (f", {b.shape}" if b is not None else "")
        )


def composite_masked(base: VideoClip, donor: VideoClip, mask_video) -> VideoClip:
    """Donor pixels where the mask is set, base pixels elsewhere."""
    mask_video = np.asarray(mask_video, bool)
    _check_geometry(base, mask_video, donor)
    return base.with_frames(np.where(mask_video[..., None], donor.frames, base.frames))


def mask_background_of(control: VideoClip, fg_mask_video) -> VideoClip:
    """Keep control values on the foreground, zero elsewhere."""
    fg_mask_video = np.asarray(fg_mask_video, bool)
    _check_geometry(control, fg_mask_video)
    return control.with_frames(control.frames * fg_mask_video[..., None])


def detect_foreground(frame: np.ndarray, tol: float = 1.0 / 255.0) -> np.ndarray:
    """Foreground of one H x W x 3 frame: pixels whose channels are not all equal (the background is gray)."""
    if frame.shape[-1] == 1:
        return np.zeros(frame.shape[:2], bool)
    return (frame.max(axis=-1) - frame.min(axis=-1)) > tol / 2


def dilate_video(mask_video: np.ndarray, iterations: int = 1) -> np.ndarray:
    st = np.ones((3, 3), bool)
    return np.stack([ndimage.binary_dilation(m, st, iterations=iterations) for m in np.asarray(mask_video, bool)])
