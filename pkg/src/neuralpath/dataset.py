"""Path dataset: (normalized point sequence, 64x64 raster) records.

Records are extracted from a directory of icon SVGs, normalized into the
unit square with a 5% margin, deduplicated, zero padded to ``K_MAX`` and
rasterized black-on-white.  The on-disk container is a single ``.npz``
archive whose ``header`` entry carries a JSON index.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetError, NeuralPathError
from .geometry import K_MAX, BezierPath, aux_count, densify, rasterize_polygons, sample_auxiliary_points
from .svgio import read_svg

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
IMAGE_SIZE = 64
MARGIN = 0.05
QUANT = 256
AUX_CAP = aux_count((K_MAX - 1) // 3, 4, closed=False)


def normalize_points(points: np.ndarray, margin: float = MARGIN) -> np.ndarray:
    """Isotropic bbox fit into ``[margin, 1 - margin]^2``, centred."""
    lo, hi = points.min(0), points.max(0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("degenerate path (zero extent)")
    scale = (1.0 - 2 * margin) / extent
    return (points - (lo + hi) / 2) * scale + 0.5


def canonical_key(path: BezierPath) -> str:
    """Hash of the 256-grid quantized sequence, start-rotation invariant if closed."""
    q = np.round(path.valid * (QUANT - 1)).astype(np.int16)
    if path.closed:
        rotations = [np.roll(q, -k, axis=0) for k in range(0, path.length, 3)]
        q = min(rotations, key=lambda r: r.tobytes())
    tag = b"C" if path.closed else b"O"
    return hashlib.sha1(tag + q.tobytes()).hexdigest()


def rasterize_record(path: BezierPath, size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased filled shape, dark (0) on white (1)."""
    cov = rasterize_polygons([densify(path)], size, supersample=4)
    return (1.0 - cov).astype(np.float32)


@dataclass
class PathDataset:
    points: np.ndarray  # (N, K_MAX, 2) float32
    lengths: np.ndarray  # (N,) int
    closed: np.ndarray  # (N,) bool
    rasters: np.ndarray  # (N, 64, 64) float32
    split: np.ndarray  # (N,) 0 = train, 1 = val
    keys: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.lengths)

    def path(self, i: int) -> BezierPath:
        return BezierPath(self.points[i].astype(np.float64), int(self.lengths[i]), bool(self.closed[i]))

    def _select(self, sel) -> "PathDataset":
        idx = np.flatnonzero(sel) if np.asarray(sel).dtype == bool else np.asarray(sel)
        return PathDataset(
            self.points[idx], self.lengths[idx], self.closed[idx], self.rasters[idx],
            self.split[idx], [self.keys[i] for i in idx] if self.keys else [], dict(self.manifest),
        )

    def subset(self, which: str) -> "PathDataset":
        return self._select(self.split == (0 if which == "train" else 1))

    def take(self, n: int) -> "PathDataset":
        """First ``n`` records (order is already seed-shuffled)."""
        out = self._select(np.arange(min(n, len(self))))
        out.manifest.update(record_count=len(out), source_record_count=len(self))
        return out

    def tensors(self) -> dict:
        """Training tensors, including padded auxiliary points of every record."""
        n = len(self)
        aux = np.zeros((n, AUX_CAP, 2), dtype=np.float32)
        aux_mask = np.zeros((n, AUX_CAP), dtype=bool)
        for i in range(n):
            a = sample_auxiliary_points(self.path(i))
            aux[i, : len(a)] = a
            aux_mask[i, : len(a)] = True
        mask = np.arange(K_MAX)[None, :] < self.lengths[:, None]
        return {
            "points": torch.from_numpy(self.points.astype(np.float32)),
            "mask": torch.from_numpy(mask),
            "images": torch.from_numpy(self.rasters.astype(np.float32))[:, None],
            "aux": torch.from_numpy(aux),
            "aux_mask": torch.from_numpy(aux_mask),
        }

    def save(self, path) -> None:
        header = {"format_version": FORMAT_VERSION, "count": len(self), "k_max": K_MAX,
                  "image_size": IMAGE_SIZE, "keys": self.keys, "manifest": self.manifest}
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh,
                header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                points=self.points.astype(np.float32),
                lengths=self.lengths.astype(np.int32),
                closed=self.closed.astype(bool),
                rasters=np.round(self.rasters * 255).astype(np.uint8),
                split=self.split.astype(np.int8),
            )

    @classmethod
    def load(cls, path) -> "PathDataset":
        try:
            z = np.load(path)
            header = json.loads(z["header"].tobytes().decode())
        except Exception as exc:
            raise DatasetError(f"cannot read dataset container {path}: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset version {header.get('format_version')}")
        return cls(
            z["points"], z["lengths"].astype(np.int64), z["closed"], z["rasters"].astype(np.float32) / 255.0,
            z["split"], header["keys"], header["manifest"],
        )


def _extract(file: str):
    """Per-file worker: returns normalized (points, closed) tuples and stats."""
    stats = {"paths_seen": 0, "too_long": 0, "too_short": 0, "degenerate": 0, "bad_files": 0}
    out = []
    try:
        doc = read_svg(file)
    except NeuralPathError as exc:
        log.warning("skipping %s: %s", file, exc)
        stats["bad_files"] += 1
        return out, stats
    for p in doc.paths:
        stats["paths_seen"] += 1
        n = len(p.points)
        if n > K_MAX:
            stats["too_long"] += 1
            continue
        if n < 4:
            stats["too_short"] += 1
            continue
        try:
            pts = normalize_points(p.points)
        except ValueError:
            stats["degenerate"] += 1
            continue
        out.append((pts, p.closed))
    return out, stats


def build_dataset(corpus_dir, k_max: int = K_MAX, seed: int = 0, val_fraction: float = 0.1,
                  workers: int = 0) -> PathDataset:
    """Extract, filter, deduplicate, normalize and rasterize every path of a corpus."""
    if k_max != K_MAX:
        raise ValueError(f"k_max is fixed at {K_MAX}")
    files = sorted(str(f) for f in Path(corpus_dir).glob("*.svg"))
    if not files:
        raise DatasetError(f"no .svg files in {corpus_dir}")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_extract, files))
    else:
        results = [_extract(f) for f in files]

    stats = {"files": len(files), "paths_seen": 0, "too_long": 0, "too_short": 0,
             "degenerate": 0, "bad_files": 0, "duplicates": 0}
    unique = {}
    for recs, s in results:
        for k, v in s.items():
            stats[k] += v
        for pts, closed in recs:
            path = BezierPath.from_points(pts, closed)
            key = canonical_key(path)
            if key in unique:
                stats["duplicates"] += 1
                continue
            unique[key] = path
    if not unique:
        raise DatasetError(f"corpus {corpus_dir} produced no valid paths")

    keys = sorted(unique)
    order = np.random.default_rng(seed).permutation(len(keys))
    keys = [keys[i] for i in order]
    paths = [unique[k] for k in keys]
    n = len(paths)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    split = np.zeros(n, dtype=np.int8)
    if n_val:
        split[-n_val:] = 1
    stats["records"] = n
    manifest = {"record_count": n, "seed": seed, "val_fraction": val_fraction,
                "filter_stats": stats, "format_version": FORMAT_VERSION}
    return PathDataset(
        points=np.stack([p.points for p in paths]).astype(np.float32),
        lengths=np.array([p.length for p in paths]),
        closed=np.array([p.closed for p in paths]),
        rasters=np.stack([rasterize_record(p) for p in paths]),
        split=split,
        keys=keys,
        manifest=manifest,
    )


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha1(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
