"""Directory archive of raw little-endian float32 arrays plus a JSON manifest.

Layout::

    <dir>/manifest.json        {"format": ..., "arrays": {key: {"file", "shape", "dtype"}}, "meta": {...}}
    <dir>/arrays/<n>.f32       raw bytes, C order

Arrays are written as soon as they are added, so large traces stream to disk.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterator, Optional

import numpy as np

from .exceptions import ValidationError

FORMAT = "hcplayer-array-archive"
VERSION = 1
DTYPE = "<f4"


class ArchiveWriter:
    def __init__(self, path, meta: Optional[dict] = None):
        self.path = Path(path)
        (self.path / "arrays").mkdir(parents=True, exist_ok=True)
        self.meta = dict(meta or {})
        self.entries: Dict[str, dict] = {}
        self._closed = False

    def add(self, key: str, array) -> None:
        if key in self.entries:
            raise ValidationError(f"duplicate archive key {key!r}")
        arr = np.ascontiguousarray(np.asarray(array, dtype=DTYPE))
        fname = f"arrays/{len(self.entries):06d}.f32"
        arr.tofile(self.path / fname)
        self.entries[key] = {"file": fname, "shape": list(arr.shape), "dtype": DTYPE}

    def close(self) -> Path:
        manifest = {"format": FORMAT, "version": VERSION, "arrays": self.entries, "meta": self.meta}
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        self._closed = True
        return self.path

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self._closed:
            self.close()


class Archive:
    """Read-only view; arrays load lazily on access."""

    def __init__(self, path):
        self.path = Path(path)
        manifest_path = self.path / "manifest.json"
        if not manifest_path.is_file():
            raise ValidationError(f"{self.path} is not an array archive (no manifest.json)")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("format") != FORMAT:
            raise ValidationError(f"{self.path}: unexpected archive format {manifest.get('format')!r}")
        self.entries: Dict[str, dict] = manifest["arrays"]
        self.meta: dict = manifest.get("meta", {})

    def keys(self):
        return list(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __getitem__(self, key: str) -> np.ndarray:
        e = self.entries[key]
        arr = np.fromfile(self.path / e["file"], dtype=e["dtype"])
        return arr.reshape(e["shape"])


def write_archive(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    with ArchiveWriter(path, meta) as w:
        for k, v in arrays.items():
            w.add(k, v)
    return Path(path)


def read_archive(path) -> Archive:
    return Archive(path)
