"""2D change-detection and 3D elevation-change metrics.

F1 and IoU refer to the change class.  RMSE runs over all pixels, cRMSE
only over pixels whose ground-truth elevation change is nonzero.  Split
level numbers are micro-averaged: confusion counts and squared errors are
pooled over tiles before any ratio or root is taken.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_core import DH_MAX, DH_MIN


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(m2d: np.ndarray) -> np.ndarray:
    """Channel argmax of two-channel scores; ties go to class 0."""
    m2d = np.asarray(m2d)
    if m2d.shape[-3] != 2:
        raise ValueError(f"expected two score channels on axis -3, got shape {m2d.shape}")
    return (m2d[..., 1, :, :] > m2d[..., 0, :, :]).astype(np.uint8)


def confusion(pred: np.ndarray, gt: np.ndarray) -> Confusion:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"size mismatch: {pred.shape} vs {gt.shape}")
    p, g = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, int(p.size) - tp - fp - fn)


def iou(c: Confusion) -> float:
    den = c.tp + c.fn + c.fp
    return 1.0 if den == 0 else c.tp / den


def f1(c: Confusion) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


@dataclass
class ErrorSums:
    """Running squared-error sums, poolable across tiles."""

    sse: float = 0.0
    n: int = 0
    sse_c: float = 0.0
    n_c: int = 0

    def __add__(self, other: "ErrorSums") -> "ErrorSums":
        return ErrorSums(self.sse + other.sse, self.n + other.n, self.sse_c + other.sse_c, self.n_c + other.n_c)

    @property
    def rmse(self) -> float:
        return math.sqrt(self.sse / self.n) if self.n else float("nan")

    @property
    def crmse(self) -> float | None:
        return math.sqrt(self.sse_c / self.n_c) if self.n_c else None


def error_sums(pred3d, gt3d) -> ErrorSums:
    pred3d = np.asarray(pred3d, dtype=np.float64)
    gt3d = np.asarray(gt3d, dtype=np.float64)
    if pred3d.shape != gt3d.shape:
        raise ValueError(f"size mismatch: {pred3d.shape} vs {gt3d.shape}")
    sq = (pred3d - gt3d) ** 2
    changed = gt3d != 0
    return ErrorSums(float(sq.sum()), int(sq.size), float(sq[changed].sum()), int(changed.sum()))


def rmse(pred3d, gt3d) -> float:
    """Root mean squared error in metres over all pixels."""
    return error_sums(pred3d, gt3d).rmse


def crmse(pred3d, gt3d) -> float | None:
    """RMSE over pixels with nonzero ground-truth change; None if there are none."""
    return error_sums(pred3d, gt3d).crmse


def histogram_edges(lo: float = DH_MIN, hi: float = DH_MAX, width: float = 1.0) -> np.ndarray:
    return np.arange(lo, hi + width / 2, width)


def histogram(values3d, bin_width: float = 1.0, lo: float = DH_MIN, hi: float = DH_MAX):
    """Fixed-edge histogram with a dedicated bin for exact zeros.

    Returns ``(edges, counts, zero_count)``.  Nonzero values fall in
    [e_k, e_k+1) (the last bin is closed); values outside [lo, hi] are
    clamped into the end bins so the counts always partition the input.
    """
    v = np.asarray(values3d, dtype=np.float64).ravel()
    if not np.isfinite(v).all():
        raise ValueError("histogram input must be finite")
    edges = histogram_edges(lo, hi, bin_width)
    nz = v[v != 0]
    counts, _ = np.histogram(np.clip(nz, lo, hi), bins=edges)
    return edges, counts, int(v.size - nz.size)


def histogram_csv(gt_values, pred_values, bin_width: float = 1.0) -> str:
    """CSV with columns bin_left, bin_right, count_gt, count_pred.  The
    zero bin comes first as the degenerate interval [0, 0]."""
    edges, cg, zg = histogram(gt_values, bin_width)
    _, cp, zp = histogram(pred_values, bin_width)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left", "bin_right", "count_gt", "count_pred"])
    w.writerow([0.0, 0.0, zg, zp])
    for left, right, a, b in zip(edges[:-1], edges[1:], cg, cp):
        w.writerow([float(left), float(right), int(a), int(b)])
    return buf.getvalue()


@dataclass
class MetricReport:
    f1: float
    iou: float
    rmse: float
    crmse: float | None
    n: int
    n_c: int
    confusion: Confusion
    per_tile: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        c = "n/a" if self.crmse is None else f"{self.crmse:.4f} m"
        return f"F1 {100 * self.f1:.2f}%  IoU {100 * self.iou:.2f}%  RMSE {self.rmse:.4f} m  cRMSE {c}"


def report(pairs) -> MetricReport:
    """Micro-averaged report from (tile_id, pred_mask, gt_mask, pred_m, gt_m) tuples."""
    conf = Confusion()
    sums = ErrorSums()
    per_tile = []
    for tid, pm, gm, p3, g3 in pairs:
        c = confusion(pm, gm)
        e = error_sums(p3, g3)
        conf = conf + c
        sums = sums + e
        per_tile.append({"tile_id": tid, "f1": f1(c), "iou": iou(c), "rmse": e.rmse, "crmse": e.crmse})
    per_tile.sort(key=lambda r: r["tile_id"])
    return MetricReport(f1(conf), iou(conf), sums.rmse, sums.crmse, sums.n, sums.n_c, conf, per_tile)


def predict_split(params, manifest, split: str, tiles: dict | None = None, batch: int = 8):
    """Run the network over a split at its input resolution.

    Yields (tile_id, pred_mask, gt_mask, pred_dh_m, gt_dh_m) with targets
    nearest-resized to the model resolution and predictions denormalised
    with the manifest's h_scale.
    """
    from .augment import resize
    from .data_core import denormalize_delta, read_tile
    from .model import forward

    cfg = params.cfg
    ids = sorted(manifest.split(split))
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        loaded = [(tiles or {}).get(t) or read_tile(manifest, t) for t in chunk]
        for t in loaded:
            if t.img1.shape[0] != cfg.bands:
                raise ValueError(f"tile {t.meta.tile_id} has {t.img1.shape[0]} bands, model expects {cfg.bands}")
        x1 = np.stack([resize(t.img1, cfg.input_size) for t in loaded])
        x2 = np.stack([resize(t.img2, cfg.input_size) for t in loaded])
        pred = forward(x1, x2, params, cfg)
        masks = binarize(pred.m2d)
        dh = denormalize_delta(pred.m3d, manifest.h_scale)
        for k, t in enumerate(loaded):
            gm = resize(t.mask2d, cfg.input_size, "nearest")
            g3 = resize(t.delta3d, cfg.input_size, "nearest").astype(np.float64)
            yield t.meta.tile_id, masks[k], gm, dh[k], g3


def evaluate_split(checkpoint, manifest, split: str, tiles: dict | None = None, histogram_path=None) -> MetricReport:
    """Metrics of a checkpoint's model on one split of a dataset."""
    params = checkpoint.params if hasattr(checkpoint, "params") else checkpoint
    rows = list(predict_split(params, manifest, split, tiles))
    rep = report(rows)
    if histogram_path is not None:
        gt = np.concatenate([r[4].ravel() for r in rows]) if rows else np.zeros(0)
        pr = np.concatenate([r[3].ravel() for r in rows]) if rows else np.zeros(0)
        with open(histogram_path, "w") as f:
            f.write(histogram_csv(gt, pr))
    return rep
