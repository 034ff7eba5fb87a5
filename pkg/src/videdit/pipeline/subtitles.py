"""Subtitle rendering with a built-in 5x7 bitmap font (no anti-aliasing, integer placement)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Category, EditPair, ParameterError, VideoClip, quantize

# 7 rows of 5 columns per glyph, '#' = ink
_GLYPHS = {
    "A": ".###.|#...#|#...#|#####|#...#|#...#|#...#",
    "B": "####.|#...#|#...#|####.|#...#|#...#|####.",
    "C": ".###.|#...#|#....|#....|#....|#...#|.###.",
    "D": "####.|#...#|#...#|#...#|#...#|#...#|####.",
    "E": "#####|#....|#....|####.|#....|#....|#####",
    "F": "#####|#....|#....|####.|#....|#....|#....",
    "G": ".###.|#...#|#....|#.###|#...#|#...#|.####",
    "H": "#...#|#...#|#...#|#####|#...#|#...#|#...#",
    "I": ".###.|..#..|..#..|..#..|..#..|..#..|.###.",
    "J": "..###|...#.|...#.|...#.|...#.|#..#.|.##..",
    "K": "#...#|#..#.|#.#..|##...|#.#..|#..#.|#...#",
    "L": "#....|#....|#....|#....|#....|#....|#####",
    "M": "#...#|##.##|#.#.#|#.#.#|#...#|#...#|#...#",
    "N": "#...#|#...#|##..#|#.#.#|#..##|#...#|#...#",
    "O": ".###.|#...#|#...#|#...#|#...#|#...#|.###.",
    "P": "####.|#...#|#...#|####.|#....|#....|#....",
    "Q": ".###.|#...#|#...#|#...#|#.#.#|#..#.|.##.#",
    "R": "####.|#...#|#...#|####.|#.#..|#..#.|#...#",
    "S": ".####|#....|#....|.###.|....#|....#|####.",
    "T": "#####|..#..|..#..|..#..|..#..|..#..|..#..",
    "U": "#...#|#...#|#...#|#...#|#...#|#...#|.###.",
    "V": "#...#|#...#|#...#|#...#|#...#|.#.#.|..#..",
    "W": "#...#|#...#|#...#|#.#.#|#.#.#|#.#.#|.#.#.",
    "X": "#...#|#...#|.#.#.|..#..|.#.#.|#...#|#...#",
    "Y": "#...#|#...#|.#.#.|..#..|..#..|..#..|..#..",
    "Z": "#####|....#|...#.|..#..|.#...|#....|#####",
    "0": ".###.|#...#|#..##|#.#.#|##..#|#...#|.###.",
    "1": "..#..|.##..|..#..|..#..|..#..|..#..|.###.",
    "2": ".###.|#...#|....#|...#.|..#..|.#...|#####",
    "3": "#####|...#.|..#..|...#.|....#|#...#|.###.",
    "4": "...#.|..##.|.#.#.|#..#.|#####|...#.|...#.",
    "5": "#####|#....|####.|....#|....#|#...#|.###.",
    "6": "..##.|.#...|#....|####.|#...#|#...#|.###.",
    "7": "#####|....#|...#.|..#..|.#...|.#...|.#...",
    "8": ".###.|#...#|#...#|.###.|#...#|#...#|.###.",
    "9": ".###.|#...#|#...#|.####|....#|...#.|.##..",
    " ": ".....|.....|.....|.....|.....|.....|.....",
    ".": ".....|.....|.....|.....|.....|.##..|.##..",
    ",": ".....|.....|.....|.....|.##..|..#..|.#...",
    "!": "..#..|..#..|..#..|..#..|..#..|.....|..#..",
    "?": ".###.|#...#|....#|...#.|..#..|.....|..#..",
    "'": "..#..|..#..|.#...|.....|.....|.....|.....",
    "-": ".....|.....|.....|#####|.....|.....|.....",
    ":": ".....|.##..|.##..|.....|.##..|.##..|.....",
}
FONT = {ch: np.array([[c == "#" for c in row] for row in rows.split("|")], bool) for ch, rows in _GLYPHS.items()}
GLYPH_H, GLYPH_W, GAP = 7, 5, 1
POSITIONS = ("top", "middle", "bottom")
TASKS = ("add", "remove", "replace")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class SubtitleStyle:
    id: str = "white"
    scale: int = 1
    color: tuple = (1.0, 1.0, 1.0)


STYLES = (
    SubtitleStyle("white", 1, (1.0, 1.0, 1.0)),
    SubtitleStyle("yellow", 1, (1.0, 0.9, 0.0)),
    SubtitleStyle("black", 1, (0.0, 0.0, 0.0)),
)


def text_raster(text: str, scale: int = 1) -> np.ndarray:
    text = text.upper()
    missing = sorted({c for c in text if c not in FONT})
    if missing:
        raise LayoutError(f"no glyph for {missing}")
    cols = []
    for i, ch in enumerate(text):
        if i:
            cols.append(np.zeros((GLYPH_H, GAP), bool))
        cols.append(FONT[ch])
    raster = np.concatenate(cols, axis=1)
    return raster.repeat(scale, axis=0).repeat(scale, axis=1)


def band_rows(height: int, position: str) -> tuple[int, int]:
    """Rows [start, stop) of the top/middle/bottom third; the bottom band takes any remainder."""
    if position not in POSITIONS:
        raise ParameterError(f"position must be one of {POSITIONS}")
    h = height // 3
    i = POSITIONS.index(position)
    return i * h, (height if i == 2 else (i + 1) * h)


def subtitle_mask(height: int, width: int, text: str, position: str, scale: int = 1) -> np.ndarray:
    if not text.strip():
        raise LayoutError("subtitle text is empty")
    if scale < 1:
        raise ParameterError("scale must be >= 1")
    raster = text_raster(text, scale)
    r0, r1 = band_rows(height, position)
    rh, rw = raster.shape
    if rw > width or rh > r1 - r0:
        raise LayoutError(f"{text!r} at scale {scale} needs {rh}x{rw}, band is {r1 - r0}x{width}")
    y0 = r0 + (r1 - r0 - rh) // 2
    x0 = (width - rw) // 2
    mask = np.zeros((height, width), bool)
    mask[y0 : y0 + rh, x0 : x0 + rw] = raster
    return mask


def render_subtitle(clip: VideoClip, text: str, position: str, style: SubtitleStyle = SubtitleStyle()) -> VideoClip:
    _, h, w, c = clip.shape
    mask = subtitle_mask(h, w, text, position, style.scale)
    color = quantize(np.asarray(style.color, float))
    color = color[:c] if c == 3 else np.array([color.mean()])
    frames = clip.frames.copy()
    frames[:, mask] = color
    return clip.with_frames(frames)


def build_subtitle_triplet(clip: VideoClip, text_a: str, text_b: str, position: str,
                           style: SubtitleStyle = SubtitleStyle(), instructions=None, id_prefix: str = "") -> tuple:
    """(add, remove, replace) pairs sharing one rendered clip.

    ``instructions`` maps task -> (instruction, backward instruction); defaults are templated.
    """
    with_a = render_subtitle(clip, text_a, position, style)
    with_b = render_subtitle(clip, text_b, position, style)
    instructions = instructions or default_subtitle_instructions(text_a, text_b, position)
    specs = {"add": (clip, with_a), "remove": (with_a, clip), "replace": (with_a, with_b)}
    out = []
    for task in TASKS:
        src, tgt = specs[task]
        fwd, bwd = instructions[task]
        out.append(EditPair(src, tgt, Category.SUBTITLES_EDIT, fwd, bwd, id=f"{id_prefix}{task}-{position}"))
    return tuple(out)


def default_subtitle_instructions(text_a: str, text_b: str, position: str) -> dict:
    return {
        "add": (f'Add the subtitle "{text_a}" at the {position} of the video.',
                f'Remove the subtitle "{text_a}" at the {position} of the video.'),
        "remove": (f'Remove the subtitle "{text_a}" at the {position} of the video.',
                   f'Add the subtitle "{text_a}" at the {position} of the video.'),
        "replace": (f'Replace the subtitle "{text_a}" at the {position} with "{text_b}".',
                    f'Replace the subtitle "{text_b}" at the {position} with "{text_a}".'),
    }
