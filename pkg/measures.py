"""Empirical measures, measure pairs, datasets, and their on-disk formats.

A `.m2m` file is a 16-byte header (magic ``M2M\\0``, then version, N and d
as little-endian u32) followed by N*d float64 little-endian coordinates in
row-major order. Datasets are JSON manifests referencing `.m2m` files.
"""
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from errors import DimensionError, FormatError, ManifestError, NonFiniteError, TruncatedError

logger = logging.getLogger(__name__)

MAGIC = b"M2M\0"
VERSION = 1
HEADER = struct.Struct("<4sIII")
FLOAT = np.dtype("<f8")


def _frozen(array):
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Empirical measure (1/N) sum of deltas at the rows of `points`"""
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2:
            raise DimensionError(f"point cloud must be a matrix, got shape {points.shape}")
        if points.shape[0] < 1 or points.shape[1] < 1:
            raise DimensionError(f"point cloud needs N >= 1 and d >= 1, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise NonFiniteError("point cloud contains NaN or Inf")
        object.__setattr__(self, "points", _frozen(points))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.points.shape == other.points.shape and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True)
class MeasurePair:
    source: PointCloud
    target: PointCloud
    tag: Optional[str] = None

    def __post_init__(self):
        if self.source.d != self.target.d:
            raise DimensionError(f"source has d={self.source.d} but target has d={self.target.d}")


@dataclass(frozen=True)
class Dataset:
    pairs: tuple
    ambient_dim: int

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise ManifestError("dataset has no pairs")
        for i, pair in enumerate(self.pairs):
            for side, cloud in (("source", pair.source), ("target", pair.target)):
                if cloud.d != self.ambient_dim:
                    raise DimensionError(
                        f"{side} has d={cloud.d} but dataset declares ambient_dim={self.ambient_dim}",
                        pair_index=i)

    def __len__(self):
        return len(self.pairs)

    def subset(self, indices):
        return Dataset([self.pairs[i] for i in indices], self.ambient_dim)

    def split(self, holdout_fraction=0.1, heldout_indices=None):
        """Split into (train, heldout); by default the last fraction of pairs is held out"""
        n = len(self.pairs)
        if heldout_indices is None:
            n_held = int(round(n * holdout_fraction)) if n > 1 else 0
            if holdout_fraction > 0 and n > 1:
                n_held = max(n_held, 1)
            heldout_indices = list(range(n - n_held, n))
        held = sorted(set(int(i) for i in heldout_indices))
        for i in held:
            if not 0 <= i < n:
                raise ManifestError(f"held-out index {i} out of range for {n} pairs")
        held_set = set(held)
        train = [i for i in range(n) if i not in held_set]
        if not train:
            raise ManifestError("held-out split leaves no training pairs")
        return self.subset(train), (self.subset(held) if held else None)


@dataclass(frozen=True)
class Trajectory:
    marginals: tuple
    times: tuple

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        if not self.marginals:
            raise DimensionError("trajectory has no marginals")
        if len(self.marginals) != len(self.times):
            raise DimensionError(f"{len(self.marginals)} marginals but {len(self.times)} times")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise DimensionError("trajectory times must be strictly increasing")
        n, d = self.marginals[0].n, self.marginals[0].d
        for k, marginal in enumerate(self.marginals):
            if marginal.n != n or marginal.d != d:
                raise DimensionError(
                    f"marginal {k} has shape ({marginal.n}, {marginal.d}), expected ({n}, {d})")

    def __len__(self):
        return len(self.marginals)

    def adjacent_pairs(self, tag=None):
        prefix = f"{tag}:" if tag else ""
        return [MeasurePair(a, b, f"{prefix}t={k}")
                for k, (a, b) in enumerate(zip(self.marginals, self.marginals[1:]))]


def atomic_write_bytes(path, payload):
    """Write to a temp file in the target directory and rename over `path`"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pointcloud(pc):
    return HEADER.pack(MAGIC, VERSION, pc.n, pc.d) + pc.points.astype(FLOAT).tobytes(order="C")


def decode_pointcloud(payload, source="<bytes>"):
    if len(payload) < HEADER.size:
        raise TruncatedError(f"{source}: file shorter than the {HEADER.size}-byte header")
    magic, version, n, d = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"{source}: header declares N={n}, d={d}")
    expected = HEADER.size + n * d * FLOAT.itemsize
    if len(payload) < expected:
        raise TruncatedError(f"{source}: declares {n}x{d} values but payload holds "
                             f"{(len(payload) - HEADER.size) // FLOAT.itemsize}")
    if len(payload) > expected:
        raise FormatError(f"{source}: {len(payload) - expected} trailing bytes after payload")
    points = np.frombuffer(payload, dtype=FLOAT, count=n * d, offset=HEADER.size).reshape(n, d)
    if not np.all(np.isfinite(points)):
        raise NonFiniteError(f"{source}: payload contains NaN or Inf")
    return PointCloud(points)


def save_pointcloud(pc, path):
    """Write a cloud in the .m2m format; the file appears only when complete"""
    atomic_write_bytes(path, encode_pointcloud(pc))


def load_pointcloud(path):
    """Read a .m2m file"""
    path = Path(path)
    return decode_pointcloud(path.read_bytes(), source=str(path))


def subsample(pc, m, rng):
    """Draw m rows: without replacement when m <= N, with replacement otherwise"""
    if m < 1:
        raise ValueError(f"subsample size must be >= 1, got {m}")
    if m <= pc.n:
        rows = rng.permutation(pc.n)[:m]
    else:
        rows = rng.integers(0, pc.n, size=m)
    return PointCloud(pc.points[rows])


def _relative(path, base):
    try:
        return os.path.relpath(path, base)
    except ValueError:
        return str(path)


def write_manifest(entries, ambient_dim, path, trajectories=None):
    """Write a dataset.json manifest.

    `entries` are dicts with `source`, `target` and optional `tag`, holding file
    paths; they are stored relative to the manifest directory.
    """
    path = Path(path)
    base = path.parent
    manifest = {
        "ambient_dim": int(ambient_dim),
        "pairs": [
            {k: (_relative(v, base) if k in ("source", "target") else v)
             for k, v in entry.items() if v is not None}
            for entry in entries
        ],
    }
    if trajectories:
        manifest["trajectories"] = [
            {"system": t["system"], "times": list(t["times"]),
             "marginals": [_relative(p, base) for p in t["marginals"]]}
            for t in trajectories
        ]
    atomic_write_bytes(path, json.dumps(manifest, indent=2).encode())
    return path


def _read_manifest(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{manifest_path}: invalid JSON: {e}")
    if not isinstance(manifest, dict):
        raise ManifestError(f"{manifest_path}: expected a JSON object")
    return manifest


def load_dataset(manifest_path):
    """Load every pair a manifest references and check dimensions"""
    manifest_path = Path(manifest_path)
    manifest = _read_manifest(manifest_path)
    if not isinstance(manifest.get("ambient_dim"), int) or manifest["ambient_dim"] < 1:
        raise ManifestError(f"{manifest_path}: 'ambient_dim' must be a positive integer")
    entries = manifest.get("pairs")
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{manifest_path}: 'pairs' must be a non-empty list")
    d = manifest["ambient_dim"]
    base = manifest_path.parent
    pairs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "source" not in entry or "target" not in entry:
            raise ManifestError(f"{manifest_path}: pair {i} needs 'source' and 'target'")
        source = load_pointcloud(base / entry["source"])
        target = load_pointcloud(base / entry["target"])
        for side, cloud in (("source", source), ("target", target)):
            if cloud.d != d:
                raise DimensionError(f"{side} has d={cloud.d} but manifest declares ambient_dim={d}",
                                     pair_index=i)
        pairs.append(MeasurePair(source, target, entry.get("tag")))
    logger.debug("Loaded %d pairs from %s", len(pairs), manifest_path)
    return Dataset(pairs, d)


def load_trajectories(manifest_path):
    """Read the trajectories recorded in a manifest as (system id, Trajectory) tuples"""
    manifest_path = Path(manifest_path)
    manifest = _read_manifest(manifest_path)
    entries = manifest.get("trajectories")
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{manifest_path}: no 'trajectories' recorded")
    base = manifest_path.parent
    result = []
    for entry in entries:
        marginals = [load_pointcloud(base / p) for p in entry["marginals"]]
        result.append((entry["system"], Trajectory(marginals, entry["times"])))
    return result


def load_split(path):
    """Held-out pair indices from a {"heldout": [...]} file"""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or not isinstance(data.get("heldout"), list):
        raise ManifestError(f"{path}: expected {{\"heldout\": [indices]}}")
    return data["heldout"]
