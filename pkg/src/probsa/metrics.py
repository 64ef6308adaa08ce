"""Bag-level metrics, method ranking and attention-map export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .data import Bag
from .model import MILModel


def auroc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUROC; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if labels.sum() == 0:
        raise ValueError("F1 needs at least one positive label")
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    if tp + fp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def rank_methods(table) -> np.ndarray:
    """Mean rank per row (method) over columns; rank 1 is the highest value, ties average."""
    rows = [list(r) for r in table]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("ragged or empty table")
    arr = np.asarray(rows, dtype=np.float64)
    ranks = np.column_stack([rankdata(-arr[:, j], method="average") for j in range(arr.shape[1])])
    return ranks.mean(axis=1)


@dataclass
class EvalReport:
    auroc: float
    f1: float
    probabilities: np.ndarray
    labels: np.ndarray


def evaluate(model: MILModel, bags: Sequence[Bag], S: int = 16, seed: int = 0,
             threshold: float = 0.5) -> EvalReport:
    """Predict every bag (sample stream seeded per bag index) and score the split."""
    probs = np.array([model.predict_bag(b, S, seed=(seed, i)) for i, b in enumerate(bags)])
    labels = np.array([b.label for b in bags])
    return EvalReport(auroc(probs, labels), f1(probs, labels, threshold), probs, labels)


def minmax(v) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to zeros."""
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass
class AttentionMap:
    bag_id: str
    coords: np.ndarray
    att_mean_raw: np.ndarray
    att_var_raw: np.ndarray

    @property
    def att_mean(self) -> np.ndarray:
        return minmax(self.att_mean_raw)

    @property
    def att_var(self) -> np.ndarray:
        return minmax(self.att_var_raw)


def attention_map(model: MILModel, bag: Bag) -> AttentionMap:
    """Posterior moments of the attention logits; zero variance for the Dirac posterior."""
    with ad.no_grad():
        _, post = model.posterior(bag)
    mean = post.mu.data.copy()
    var = np.zeros_like(mean) if post.sigma2 is None else post.sigma2.data.copy()
    return AttentionMap(bag.id, bag.coords, mean, var)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_map_csv(path, amap: AttentionMap) -> None:
    c = amap.coords.shape[1]
    header = ["instance_index"] + [f"coord{k}" for k in range(c)] + [
        "att_mean_raw", "att_var_raw", "att_mean_norm", "att_var_norm"]
    mean_n, var_n = amap.att_mean, amap.att_var
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(amap.att_mean_raw)):
            w.writerow([i, *amap.coords[i].tolist(), _fmt(amap.att_mean_raw[i]),
                        _fmt(amap.att_var_raw[i]), _fmt(mean_n[i]), _fmt(var_n[i])])


def read_map_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = rows[0].keys() if rows else []
    return {k: np.array([float(r[k]) for r in rows]) for k in cols}


def heatmap_image(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Place per-instance values in [0, 1] on an 8-bit canvas (row = coord0 for grids)."""
    coords = np.asarray(coords)
    vals = np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    if coords.shape[1] == 1:
        x = coords[:, 0] - coords[:, 0].min()
        img = np.zeros((1, int(x.max()) + 1), dtype=np.uint8)
        img[0, x] = vals
    else:
        r = coords[:, 0] - coords[:, 0].min()
        c = coords[:, 1] - coords[:, 1].min()
        img = np.zeros((int(r.max()) + 1, int(c.max()) + 1), dtype=np.uint8)
        img[r, c] = vals
    return img


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_attention_maps(model: MILModel, bags: Sequence[Bag], out_dir,
                          S: int = 16, seed: int = 0) -> list[AttentionMap]:
    """Write ``<bag>.csv``, ``<bag>_mean.pgm`` and ``<bag>_var.pgm`` per bag.

    The diagonal Gaussian has analytic moments, so ``S`` and ``seed`` do not
    affect the output; they are kept so callers can swap in a sampled posterior.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = []
    for bag in bags:
        amap = attention_map(model, bag)
        write_map_csv(out_dir / f"{bag.id}.csv", amap)
        write_pgm(out_dir / f"{bag.id}_mean.pgm", heatmap_image(amap.att_mean, amap.coords))
        write_pgm(out_dir / f"{bag.id}_var.pgm", heatmap_image(amap.att_var, amap.coords))
        maps.append(amap)
    return maps


def instance_auroc(maps: Sequence[AttentionMap], bags: Sequence[Bag]) -> float | None:
    """Diagnostic: AUROC of raw attention means against instance labels, pooled over bags."""
    scores, labels = [], []
    for amap, bag in zip(maps, bags):
        if bag.instance_labels is None:
            continue
        scores.append(amap.att_mean_raw)
        labels.append(bag.instance_labels)
    if not scores:
        return None
    s, y = np.concatenate(scores), np.concatenate(labels)
    if y.min() == y.max():
        return None
    return auroc(s, y)


def variance_on_errors(maps: Sequence[AttentionMap], bags: Sequence[Bag],
                       threshold: float = 0.5) -> dict[str, float]:
    """Mean normalised attention variance on mispredicted vs correctly predicted instances.

    An instance counts as predicted positive when its normalised attention mean
    reaches ``threshold``; only positive bags with instance labels are used.
    """
    wrong, right = [], []
    for amap, bag in zip(maps, bags):
        if bag.instance_labels is None or bag.label != 1:
            continue
        pred = (amap.att_mean >= threshold).astype(int)
        hit = pred == bag.instance_labels
        right.extend(amap.att_var[hit].tolist())
        wrong.extend(amap.att_var[~hit].tolist())
    return {
        "var_wrong": float(np.mean(wrong)) if wrong else float("nan"),
        "var_right": float(np.mean(right)) if right else float("nan"),
        "n_wrong": len(wrong),
        "n_right": len(right),
    }
