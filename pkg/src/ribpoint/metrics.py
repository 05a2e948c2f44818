"""Evaluation: overlap Dice, per-rib recall with missing-rib grouping,
and the wall-clock benchmark harness with its dense-convolution baseline.
"""

from __future__ import annotations

import csv
import io as _io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .volume import BinaryMask, LabelMap

__all__ = [
    "dice",
    "DiceReport",
    "RibRecallReport",
    "per_rib_recall",
    "TimingReport",
    "bench",
    "dense_conv_baseline",
    "report_to_csv",
]

MISSING_RECALL_THRESHOLD = 0.5


def dice(y, yhat) -> float:
    """2 |y n yhat| / (|y| + |yhat|); both-empty counts as 1.0.

    Accepts boolean arrays over the same index space (point labels or
    voxel grids) or BinaryMask objects on the same grid.
    """
    if isinstance(y, BinaryMask):
        y = y.bits
    if isinstance(yhat, BinaryMask):
        yhat = yhat.bits
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"index spaces differ: {y.shape} vs {yhat.shape}")
    y = y.astype(bool)
    yhat = yhat.astype(bool)
    denom = int(y.sum()) + int(yhat.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((y & yhat).sum()) / denom


@dataclass
class DiceReport:
    dice_point: float | None
    dice_voxel: float | None
    per_case: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"dice_point": self.dice_point, "dice_voxel": self.dice_voxel,
                "per_case": self.per_case}


@dataclass
class RibRecallReport:
    """Per-instance recall plus missing ratios over pair groups.

    Groups: F = first pairs, T = twelfth pairs, I = pairs 2-11, A = all.
    Ratios are per rib (missing count / rib count in the group).
    """

    recall: dict[int, float]
    missing: dict[int, bool]
    pair_index: dict[int, int]
    ratios: dict[str, float]
    counts: dict[str, tuple[int, int]]  # group -> (missing, total)

    def to_json_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recall.items()},
            "missing": {str(k): v for k, v in self.missing.items()},
            "pair_index": {str(k): v for k, v in self.pair_index.items()},
            "missing_ratio": self.ratios,
            "group_counts": {k: list(v) for k, v in self.counts.items()},
        }


def _derive_pairs(gt: LabelMap) -> dict[int, int]:
    """Pair indices from instance centroids: z-rank within each side."""
    ids = [k for k in range(1, gt.num_instances + 1)]
    zz, yy, xx = np.nonzero(gt.labels > 0)
    if xx.size == 0:
        return {}
    midline = float(np.median(xx))
    info = []
    for k in ids:
        kzz, _, kxx = np.nonzero(gt.labels == k)
        if kzz.size == 0:
            continue
        info.append((k, float(kxx.mean()), float(kzz.mean())))
    pairs: dict[int, int] = {}
    for side_sel in (lambda cx: cx < midline, lambda cx: cx >= midline):
        group = sorted((t for t in info if side_sel(t[1])), key=lambda t: -t[2])
        for rank, (k, _, _) in enumerate(group, start=1):
            pairs[k] = rank
    return pairs


def per_rib_recall(gt: LabelMap, pred: BinaryMask,
                   pair_index: dict[int, int] | None = None) -> RibRecallReport:
    """Recall of the prediction against every ground-truth rib instance.

    A rib is missing iff its recall is strictly below 0.5.  ``pair_index``
    maps instance id to anatomical pair; without it the mapping is
    derived from instance centroids.
    """
    if gt.dims != pred.dims:
        raise ValueError(f"dims differ: {gt.dims} vs {pred.dims}")
    k = gt.num_instances
    if k == 0:
        raise ValueError("ground truth has no rib instances")
    if pair_index is None:
        pair_index = _derive_pairs(gt)

    flat_labels = gt.labels.ravel()
    flat_pred = pred.bits.ravel()
    totals = np.bincount(flat_labels, minlength=k + 1)
    hits = np.bincount(flat_labels, weights=flat_pred.astype(np.float64),
                       minlength=k + 1)

    recall: dict[int, float] = {}
    missing: dict[int, bool] = {}
    for i in range(1, k + 1):
        if totals[i] == 0:
            raise ValueError(f"ground-truth instance {i} is empty")
        r = float(hits[i] / totals[i])
        recall[i] = r
        missing[i] = r < MISSING_RECALL_THRESHOLD

    def group_of(i: int) -> str:
        p = pair_index.get(i, 0)
        if p == 1:
            return "F"
        if p == 12:
            return "T"
        return "I"

    counts = {g: [0, 0] for g in ("A", "F", "I", "T")}
    for i in range(1, k + 1):
        g = group_of(i)
        counts[g][1] += 1
        counts["A"][1] += 1
        if missing[i]:
            counts[g][0] += 1
            counts["A"][0] += 1
    ratios = {g: (c[0] / c[1] if c[1] else 0.0) for g, c in counts.items()}
    return RibRecallReport(recall=recall, missing=missing,
                           pair_index=dict(pair_index), ratios=ratios,
                           counts={g: (c[0], c[1]) for g, c in counts.items()})


@dataclass
class TimingReport:
    stages: dict[str, dict]  # name -> {median_s, min_s, max_s, samples, ...}
    repeats: int
    threads: int = 1

    def to_json_dict(self) -> dict:
        return {"repeats": self.repeats, "threads": self.threads,
                "stages": self.stages}


def bench(stages: dict[str, object], repeats: int = 5,
          counts: dict[str, dict] | None = None, threads: int = 1) -> TimingReport:
    """Median-of-k wall-clock timing per stage closure.

    One warm-up run per stage is discarded.  ``counts`` attaches metadata
    (point/voxel counts) to the matching stage records.
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    out: dict[str, dict] = {}
    for name, fn in stages.items():
        fn()  # warm-up, discarded
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        rec = {
            "median_s": float(np.median(samples)),
            "min_s": float(np.min(samples)),
            "max_s": float(np.max(samples)),
            "samples_s": [float(s) for s in samples],
        }
        if counts and name in counts:
            rec.update(counts[name])
        out[name] = rec
    return TimingReport(stages=out, repeats=repeats, threads=threads)


def dense_conv_baseline(volume_f32: np.ndarray, channels: int = 8,
                        seed: int = 0) -> float:
    """Reference dense-voxel cost: a two-layer 3x3x3 convolution sweep
    with ReLU between, over the full grid.  Returns an output checksum so
    the work cannot be skipped."""
    x = np.asarray(volume_f32, dtype=np.float32)
    g = rng.generator(rng.derive(seed, 0xDE45E))
    w1 = g.normal(0, 0.1, size=(channels, 3, 3, 3)).astype(np.float32)
    w2 = g.normal(0, 0.1, size=(channels, channels, 3, 3, 3)).astype(np.float32)

    def conv_layer(inputs: list[np.ndarray], weights) -> list[np.ndarray]:
        shape = inputs[0].shape
        padded = [np.pad(a, 1) for a in inputs]
        outs = []
        for co in range(weights.shape[0]):
            acc = np.zeros(shape, dtype=np.float32)
            for ci in range(len(inputs)):
                w = weights[co] if weights.ndim == 4 else weights[co, ci]
                p = padded[ci]
                for dz in range(3):
                    for dy in range(3):
                        for dx in range(3):
                            acc += w[dz, dy, dx] * p[dz:dz + shape[0],
                                                     dy:dy + shape[1],
                                                     dx:dx + shape[2]]
            outs.append(np.maximum(acc, 0.0))
        return outs

    h = conv_layer([x], w1)
    h = conv_layer(h, w2)
    return float(sum(a.sum(dtype=np.float64) for a in h))


def report_to_csv(case_metrics: dict[str, dict[str, float]]) -> str:
    """One row per case per metric, for spreadsheet diffing."""
    buf = _io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["case", "metric", "value"])
    for case in sorted(case_metrics):
        for metric in sorted(case_metrics[case]):
            writer.writerow([case, metric, case_metrics[case][metric]])
    return buf.getvalue()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
