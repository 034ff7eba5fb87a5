"""Seeded synthetic source videos: a textured gray background with moving palette-colored objects."""
from __future__ import annotations

import numpy as np

from ..adapters.mock import PALETTE, palette_rgb
from ..core import VideoClip, quantize


def background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Gray (R == G == B) gradient plus a checker texture, so zooms and cuts change pixels."""
    cell = int(rng.integers(3, 6))
    yy, xx = np.mgrid[:h, :w]
    checker = ((yy // cell + xx // cell) % 2).astype(float)
    base = 0.25 + 0.3 * xx / max(w - 1, 1) + 0.3 * checker
    return np.repeat(quantize(base)[..., None], 3, axis=-1)


def synthetic_video(seed: int, frames: int = 20, height: int = 32, width: int = 32, n_objects: int = 2,
                    names=None) -> VideoClip:
    """Objects are axis-aligned rectangles or discs moving with constant integer velocity.

    Later objects occlude earlier ones. All values sit on the 8-bit grid.
    """
    rng = np.random.default_rng(seed)
    if names is None:
        names = list(rng.choice(list(PALETTE), size=n_objects, replace=False))
    bg = background(height, width, rng)
    yy, xx = np.mgrid[:height, :width]
    objs = []
    for name in names:
        size = int(rng.integers(max(3, height // 6), max(4, height // 3)))
        y = int(rng.integers(0, height - size))
        x = int(rng.integers(0, width - size))
        vy, vx = (int(v) for v in rng.integers(-1, 2, size=2))
        objs.append((str(name), size, y, x, vy, vx, bool(rng.integers(0, 2))))
    out = np.empty((frames, height, width, 3))
    for t in range(frames):
        frame = bg.copy()
        for name, size, y, x, vy, vx, disc in objs:
            # bounce inside the frame
            py = _bounce(y + vy * t, height - size)
            px = _bounce(x + vx * t, width - size)
            if disc:
                r = size / 2.0
                m = (yy - (py + r - 0.5)) ** 2 + (xx - (px + r - 0.5)) ** 2 <= r * r
            else:
                m = (yy >= py) & (yy < py + size) & (xx >= px) & (xx < px + size)
            frame[m] = palette_rgb(name)
        out[t] = frame
    return VideoClip(quantize(out), fps=8.0, id=f"synthetic-{seed}")


def _bounce(p: int, limit: int) -> int:
    if limit <= 0:
        return 0
    period = 2 * limit
    p = p % period
    return p if p <= limit else period - p
