"""Bags, bag adjacency graphs, synthetic bag generation and feature-file I/O."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse


class DataError(ValueError):
    """Malformed or inconsistent bag data."""


@dataclass(frozen=True, eq=False)
class Bag:
    id: str
    features: np.ndarray  # (N, P)
    coords: np.ndarray  # (N, c) integer
    label: int
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        coords = np.asarray(self.coords)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise DataError(f"bag {self.id}: features must be a non-empty N x P matrix")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"bag {self.id}: non-finite features")
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != feats.shape[0]:
            raise DataError(f"bag {self.id}: {feats.shape[0]} feature rows vs {coords.shape[0]} coords")
        coords = coords.astype(np.int64)
        if len(np.unique(coords, axis=0)) != len(coords):
            raise DataError(f"bag {self.id}: duplicate coordinates")
        if self.label not in (0, 1):
            raise DataError(f"bag {self.id}: label must be 0 or 1")
        inst = self.instance_labels
        if inst is not None:
            inst = np.asarray(inst, dtype=np.int64)
            if inst.shape != (feats.shape[0],):
                raise DataError(f"bag {self.id}: instance label count mismatch")
            if int(inst.max()) != self.label:
                raise DataError(f"bag {self.id}: bag label is not the max of instance labels")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "instance_labels", inst)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def permuted(self, perm) -> Bag:
        perm = np.asarray(perm)
        inst = None if self.instance_labels is None else self.instance_labels[perm]
        return Bag(self.id, self.features[perm], self.coords[perm], self.label, inst)


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected weighted graph stored as an upper-triangular edge list."""

    n: int
    src: np.ndarray  # i < j
    dst: np.ndarray
    weight: np.ndarray
    degree: np.ndarray = field(init=False)

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        w = np.asarray(self.weight, dtype=np.float64)
        if not (src.shape == dst.shape == w.shape):
            raise DataError("edge arrays differ in length")
        if np.any(src >= dst):
            raise DataError("edges must satisfy i < j (no self-loops)")
        if len(src) and (src.min() < 0 or dst.max() >= self.n):
            raise DataError("edge endpoint out of range")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise DataError("edge weights must be positive and finite")
        deg = np.bincount(src, weights=w, minlength=self.n) + np.bincount(dst, weights=w, minlength=self.n)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "degree", deg)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def adjacency(self) -> sparse.csr_matrix:
        rows = np.concatenate([self.src, self.dst])
        cols = np.concatenate([self.dst, self.src])
        vals = np.concatenate([self.weight, self.weight])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def dense(self) -> np.ndarray:
        return self.adjacency().toarray()

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


NEIGHBORHOODS = {"chain": 1, "grid": 2}


def build_adjacency(bag: Bag, policy: str = "chain", connectivity: int = 8) -> AdjacencyGraph:
    """Connect spatial neighbours and weight each edge by 1 / (1 + feature distance).

    ``chain`` links 1-D coordinates that differ by one. ``grid`` links cells at
    Chebyshev distance one (``connectivity=8``) or Manhattan distance one (``4``).
    """
    if policy not in NEIGHBORHOODS:
        raise DataError(f"unknown neighbour policy {policy!r}")
    if bag.coords.shape[1] != NEIGHBORHOODS[policy]:
        raise DataError(f"policy {policy!r} needs {NEIGHBORHOODS[policy]}-D coords, "
                        f"bag {bag.id} has {bag.coords.shape[1]}-D")
    if policy == "chain":
        offsets = [(1,)]
    elif connectivity == 8:
        offsets = [(0, 1), (1, -1), (1, 0), (1, 1)]
    elif connectivity == 4:
        offsets = [(0, 1), (1, 0)]
    else:
        raise DataError("grid connectivity must be 4 or 8")

    index = {tuple(c): i for i, c in enumerate(bag.coords.tolist())}
    if len(index) != bag.n:
        raise DataError(f"bag {bag.id}: duplicate coordinates")
    pairs = []
    for c, i in index.items():
        for off in offsets:
            j = index.get(tuple(a + b for a, b in zip(c, off)))
            if j is not None:
                pairs.append((min(i, j), max(i, j)))
    pairs.sort()
    if pairs:
        src, dst = np.array(pairs, dtype=np.int64).T
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    dist = np.linalg.norm(bag.features[src] - bag.features[dst], axis=1)
    return AdjacencyGraph(bag.n, src, dst, 1.0 / (1.0 + dist))


# --- synthetic bags -------------------------------------------------------


@dataclass
class SynthSpec:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    n_min: int = 20
    n_max: int = 40
    n_features: int = 32
    n_informative: int = 8
    pos_fraction: float = 0.5
    region_min: int = 3
    region_max: int = 8
    neg_mean: float = 0.0
    pos_mean: float = 1.0
    std: float = 1.0
    geometry: str = "chain"

    def validate(self) -> None:
        if self.geometry not in NEIGHBORHOODS:
            raise DataError(f"unknown geometry {self.geometry!r}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise DataError("split sizes must be non-negative")
        if not 1 <= self.n_min <= self.n_max:
            raise DataError("need 1 <= n_min <= n_max")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise DataError("pos_fraction must lie in [0, 1]")
        if not 1 <= self.region_min <= self.region_max:
            raise DataError("need 1 <= region_min <= region_max")
        if not 0 <= self.n_informative <= self.n_features:
            raise DataError("n_informative must not exceed n_features")
        if self.std <= 0:
            raise DataError("std must be positive")
        if self.geometry == "chain" and self.region_max > self.n_min:
            raise DataError(f"positive region of size {self.region_max} can exceed bag size {self.n_min}")


def chain_region(n: int, size: int, start: int) -> np.ndarray:
    """Instance labels of a chain with one positive run ``[start, start+size)``."""
    if size > n or start < 0 or start + size > n:
        raise DataError(f"positive region of size {size} at {start} does not fit in {n} instances")
    labels = np.zeros(n, dtype=np.int64)
    labels[start:start + size] = 1
    return labels


def _grid_shape(rng: np.random.Generator, n_min: int, n_max: int) -> tuple[int, int]:
    options = [(r, s) for r in range(1, n_max + 1) for s in range(1, n_max + 1)
               if n_min <= r * s <= n_max and max(r, s) <= 3 * min(r, s)]
    if not options:
        options = [(1, n_max)]
    return options[rng.integers(len(options))]


def _one_bag(rng: np.random.Generator, spec: SynthSpec, bag_id: str, positive: bool) -> Bag:
    if spec.geometry == "chain":
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        coords = np.arange(n)[:, None]
        labels = np.zeros(n, dtype=np.int64)
        if positive:
            size = int(rng.integers(spec.region_min, spec.region_max + 1))
            if size > n:
                raise DataError(f"positive region of size {size} exceeds bag size {n}")
            labels = chain_region(n, size, int(rng.integers(0, n - size + 1)))
    else:
        r, s = _grid_shape(rng, spec.n_min, spec.n_max)
        n = r * s
        rr, cc = np.meshgrid(np.arange(r), np.arange(s), indexing="ij")
        coords = np.stack([rr.ravel(), cc.ravel()], axis=1)
        labels = np.zeros(n, dtype=np.int64)
        if positive:
            h = min(int(rng.integers(spec.region_min, spec.region_max + 1)), r)
            w = min(int(rng.integers(spec.region_min, spec.region_max + 1)), s)
            r0 = int(rng.integers(0, r - h + 1))
            c0 = int(rng.integers(0, s - w + 1))
            grid = np.zeros((r, s), dtype=np.int64)
            grid[r0:r0 + h, c0:c0 + w] = 1
            labels = grid.ravel()
    means = np.where(labels[:, None] == 1, spec.pos_mean, spec.neg_mean)
    means = np.broadcast_to(means, (n, spec.n_informative))
    noise = rng.normal(0.0, spec.std, size=(n, spec.n_features))
    feats = noise
    feats[:, :spec.n_informative] += means
    # store at float32 precision so the on-disk format round-trips exactly
    feats = feats.astype(np.float32).astype(np.float64)
    return Bag(bag_id, feats, coords, int(labels.max()), labels)


def generate_synthetic(spec: SynthSpec, seed: int) -> dict[str, list[Bag]]:
    """Draw train/val/test bags; positive bags hold one contiguous positive region."""
    spec.validate()
    rng = np.random.default_rng(seed)
    splits = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        n_pos = int(round(spec.pos_fraction * count))
        flags = np.array([True] * n_pos + [False] * (count - n_pos))
        rng.shuffle(flags)
        splits[split] = [_one_bag(rng, spec, f"{split}_{k:04d}", bool(f)) for k, f in enumerate(flags)]
    return splits


# --- binary feature / coordinate files --------------------------------------

FEATURE_MAGIC = b"MILF"
COORDS_MAGIC = b"MILC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _write_block(path, magic: bytes, arr: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def _read_block(path, magic: bytes, dtype: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    got, version, n, m = _HEADER.unpack_from(raw)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != n * m * 4:
        raise DataError(f"{path}: truncated payload ({len(payload)} bytes for {n}x{m})")
    return np.frombuffer(payload, dtype=dtype).reshape(n, m)


def write_features(path, features: np.ndarray) -> None:
    _write_block(path, FEATURE_MAGIC, features, "<f4")


def read_features(path) -> np.ndarray:
    return _read_block(path, FEATURE_MAGIC, "<f4").astype(np.float64)


def write_coords(path, coords: np.ndarray) -> None:
    coords = np.asarray(coords)
    if coords.ndim == 1:
        coords = coords[:, None]
    _write_block(path, COORDS_MAGIC, coords, "<i4")


def read_coords(path) -> np.ndarray:
    return _read_block(path, COORDS_MAGIC, "<i4").astype(np.int64)


MANIFEST_FIELDS = ["bag_id", "split", "label", "features", "coords"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    bag_id: str
    split: str
    label: int
    features: Path
    coords: Path

    @property
    def instance_labels(self) -> Path:
        # optional sidecar, evaluation only
        return self.features.with_suffix(".ilab")


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        entries = []
        for row in reader:
            if row["split"] not in SPLITS:
                raise DataError(f"{path}: bad split {row['split']!r}")
            feats = path.parent / row["features"]
            coords = path.parent / row["coords"]
            for f in (feats, coords):
                if not f.exists():
                    raise DataError(f"{path}: referenced file {f} missing")
            entries.append(ManifestEntry(row["bag_id"], row["split"], int(row["label"]), feats, coords))
    ids = [e.bag_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate bag ids")
    return entries


def load_bag(entry: ManifestEntry) -> Bag:
    feats = read_features(entry.features)
    coords = read_coords(entry.coords)
    if feats.shape[0] != coords.shape[0]:
        raise DataError(f"bag {entry.bag_id}: feature file has N={feats.shape[0]}, "
                        f"coords file has N={coords.shape[0]}")
    inst = None
    if entry.instance_labels.exists():
        inst = np.array([int(t) for t in entry.instance_labels.read_text().split()], dtype=np.int64)
    return Bag(entry.bag_id, feats, coords, entry.label, inst)


def load_splits(manifest_path) -> dict[str, list[Bag]]:
    splits: dict[str, list[Bag]] = {s: [] for s in SPLITS}
    for entry in load_manifest(manifest_path):
        splits[entry.split].append(load_bag(entry))
    return splits


def write_dataset(out_dir, splits: dict[str, list[Bag]]) -> Path:
    """Write MILF/MILC files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for split in SPLITS:
            for bag in splits.get(split, []):
                feat_rel = f"bags/{bag.id}.milf"
                coord_rel = f"bags/{bag.id}.milc"
                write_features(out_dir / feat_rel, bag.features)
                write_coords(out_dir / coord_rel, bag.coords)
                if bag.instance_labels is not None:
                    (out_dir / f"bags/{bag.id}.ilab").write_text(
                        " ".join(str(int(v)) for v in bag.instance_labels) + "\n")
                writer.writerow([bag.id, split, bag.label, feat_rel, coord_rel])
    return manifest
