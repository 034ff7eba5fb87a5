"""Content-addressed artifact store.

Layout under ``root``::

    clips/<sha256>/00000.png ... meta.json   one directory per distinct clip
    blobs/<sha256>.json                      JSON documents
    jobs/<job id>.json                       per-job state records (one writer per job)

Objects are written to a temporary sibling and renamed into place, so
concurrent writers of the same content race harmlessly.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
import threading
from pathlib import Path
from typing import Optional

import numpy as np

from .core import VideoClip, load_clip, save_clip


def clip_digest(clip: VideoClip) -> str:
    data = np.round(np.clip(clip.frames, 0, 1) * 255).astype(np.uint8)
    h = hashlib.sha256()
    h.update(json.dumps({"shape": list(data.shape), "fps": float(clip.fps)}, sort_keys=True).encode())
    h.update(data.tobytes())
    return h.hexdigest()


class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("clips", "blobs", "jobs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, VideoClip] = {}
        self._lock = threading.Lock()

    # clips -----------------------------------------------------------------
    def put_clip(self, clip: VideoClip) -> str:
        key = clip_digest(clip)
        dest = self.root / "clips" / key
        if not dest.exists():
            tmp = Path(tempfile.mkdtemp(dir=self.root / "clips", prefix=".tmp-"))
            save_clip(VideoClip(clip.frames, clip.fps, id=key), tmp)
            try:
                os.rename(tmp, dest)
            except OSError:
                # another writer got there first with identical content
                shutil.rmtree(tmp, ignore_errors=True)
        return key

    def get_clip(self, key: str) -> VideoClip:
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        path = self.root / "clips" / key
        if not path.is_dir():
            raise KeyError(f"no clip {key!r} in store")
        clip = load_clip(path)
        with self._lock:
            self._cache[key] = clip
        return clip

    def has(self, key: str) -> bool:
        return (self.root / "clips" / key).is_dir() or (self.root / "blobs" / f"{key}.json").is_file()

    def clip_path(self, key: str) -> Path:
        return self.root / "clips" / key

    # json ------------------------------------------------------------------
    def put_json(self, obj) -> str:
        data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
        key = hashlib.sha256(data).hexdigest()
        dest = self.root / "blobs" / f"{key}.json"
        if not dest.exists():
            _atomic_write(dest, data)
        return key

    def get_json(self, key: str):
        return json.loads((self.root / "blobs" / f"{key}.json").read_text())

    # job records -----------------------------------------------------------
    def write_job(self, job_id: str, record: dict) -> None:
        _atomic_write(self.root / "jobs" / f"{job_id}.json", json.dumps(record, sort_keys=True, indent=1).encode())

    def read_job(self, job_id: str) -> Optional[dict]:
        path = self.root / "jobs" / f"{job_id}.json"
        return json.loads(path.read_text()) if path.exists() else None

    def list_jobs(self) -> list[dict]:
        return [json.loads(p.read_text()) for p in sorted((self.root / "jobs").glob("*.json"))]

    def checksum(self) -> str:
        """Digest over every stored file (path and bytes), for change detection."""
        h = hashlib.sha256()
        for path in sorted(p for p in self.root.rglob("*") if p.is_file() and ".tmp" not in p.name):
            h.update(str(path.relative_to(self.root)).encode())
            h.update(path.read_bytes())
        return h.hexdigest()


def _atomic_write(dest: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, dest)
