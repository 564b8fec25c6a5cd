"""Anomaly heatmaps, localization/detection metrics and the image-level score."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class Heatmap:
    scores: np.ndarray  # [H, W]
    grid_rows: int
    grid_cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


@dataclass
class ProCurve:
    points: np.ndarray  # [M, 2] columns (fpr, mean region overlap); fpr strictly increasing, <= cap
    capped_auc: float
    fpr_cap: float = 0.3

    @property
    def fpr(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def overlap(self) -> np.ndarray:
        return self.points[:, 1]


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    r0, r1, fr = _axis_weights(grid.shape[0], out_h)
    c0, c1, fc = _axis_weights(grid.shape[1], out_w)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def heatmap_from_patch_scores(per_patch, grid: tuple[int, int], out: tuple[int, int]) -> Heatmap:
    scores = np.asarray(getattr(per_patch, "data", per_patch), dtype=np.float64).reshape(-1)
    rows, cols = grid
    if scores.size != rows * cols:
        raise ValueError(f"{scores.size} patch scores do not fill a {rows}x{cols} grid")
    return Heatmap(bilinear_upsample(scores.reshape(rows, cols), *out), rows, cols)


def _stack(heatmaps, masks):
    hm = np.stack([np.asarray(getattr(h, "scores", h), dtype=np.float64) for h in heatmaps])
    gt = np.stack([np.asarray(m) > 0 for m in masks])
    if hm.shape != gt.shape:
        raise ValueError(f"heatmaps {hm.shape} and masks {gt.shape} do not align")
    return hm, gt


def pro_curve(heatmaps, gt_masks, fpr_cap: float = 0.3, num_thresholds: int | None = None) -> ProCurve:
    """Per-region overlap against per-pixel false positive rate, integrated up to ``fpr_cap``.

    Pixels are predicted anomalous when ``score >= threshold``. By default every
    distinct score is used as a threshold (exact curve); ``num_thresholds``
    switches to equally spaced quantiles of the pooled scores.
    """
    hm, gt = _stack(heatmaps, gt_masks)
    labels = np.zeros(gt.shape, dtype=np.int64)
    n_regions = 0
    for i in range(gt.shape[0]):
        lab, n = ndimage.label(gt[i], structure=EIGHT_CONNECTED)
        labels[i] = np.where(lab > 0, lab + n_regions, 0)
        n_regions += n
    if n_regions == 0:
        raise ValueError("ground truth contains no anomalous region")
    n_neg = int((~gt).sum())
    if n_neg == 0:
        raise ValueError("ground truth contains no normal pixel")

    flat_scores = hm.reshape(-1)
    flat_labels = labels.reshape(-1)
    sizes = np.bincount(flat_labels, minlength=n_regions + 1)
    negative = (flat_labels == 0) & ~gt.reshape(-1)

    order = np.argsort(-flat_scores, kind="stable")
    s = flat_scores[order]
    cum_fp = np.cumsum(negative[order]) / n_neg
    cum_ov = _cumulative_overlap(flat_labels[order], sizes, n_regions)
    # last index of each group of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    if num_thresholds is not None:
        qs = np.quantile(flat_scores, np.linspace(1.0, 0.0, max(int(num_thresholds), 2)))
        ends = np.unique(np.searchsorted(-s, -qs, side="right") - 1)
        ends = ends[ends >= 0]
    fpr = np.r_[0.0, cum_fp[ends]]
    ov = np.r_[0.0, cum_ov[ends]]
    area = _capped_area(fpr, ov, fpr_cap)
    return ProCurve(_clip_curve(fpr, ov, fpr_cap), area / fpr_cap, fpr_cap)


def _cumulative_overlap(region_of: np.ndarray, sizes: np.ndarray, n_regions: int) -> np.ndarray:
    """Mean region overlap after admitting pixels in the given order.

    Each pixel of region r adds ``L / |r|`` to an integer counter, where L is
    the least common multiple of the region sizes, so the running mean is
    ``counter / (L * n_regions)`` with a single rounding per entry. A perfect
    ranking therefore reaches exactly 1.0.
    """
    pos = np.flatnonzero(region_of > 0)
    L = math.lcm(*(int(v) for v in sizes[1:]))
    denom = L * n_regions
    if denom < 2 ** 53:
        inc = (L // sizes[region_of[pos]]).astype(np.int64)
        vals = np.cumsum(inc) / float(denom)
    else:
        step = {r: L // int(sizes[r]) for r in range(1, n_regions + 1)}
        vals = np.array([c / denom for c in itertools.accumulate(step[r] for r in region_of[pos].tolist())])
    out = np.zeros(region_of.size)
    if pos.size:
        k = np.searchsorted(pos, np.arange(region_of.size), side="right") - 1
        out = np.where(k >= 0, vals[np.maximum(k, 0)], 0.0)
    return out


def _clip_curve(fpr: np.ndarray, ov: np.ndarray, cap: float) -> np.ndarray:
    """Keep the last point of every distinct fpr, stop at ``cap`` and interpolate onto it."""
    last = np.r_[fpr[1:] != fpr[:-1], True]
    fpr, ov = fpr[last], ov[last]
    inside = fpr <= cap
    x, y = fpr[inside], ov[inside]
    if x[-1] < cap and len(x) < len(fpr):
        x1, y1 = fpr[len(x)], ov[len(x)]
        x, y = np.r_[x, cap], np.r_[y, y[-1] + (y1 - y[-1]) * (cap - x[-1]) / (x1 - x[-1])]
    return np.column_stack([x, y])


def _capped_area(x: np.ndarray, y: np.ndarray, cap: float) -> float:
    """Trapezoidal area under the polyline (x, y) restricted to [0, cap]."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1 = x[i - 1], x[i]
        if x0 >= cap:
            break
        y0, y1 = y[i - 1], y[i]
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return float(area)


def pro_score(heatmaps, gt_masks, fpr_cap: float = 0.3, num_thresholds: int | None = None) -> float:
    return pro_curve(heatmaps, gt_masks, fpr_cap, num_thresholds).capped_auc


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.min() == labels.max():
        raise ValueError("both classes must be present")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(positive outranks negative), ties counted as one half."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: precision summed over recall increments at each distinct threshold."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class ScoreNormalizer:
    """Z-score statistics of the image-level score terms on normal validation images."""

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    alpha: float = 1.0

    TERMS = ("mse", "dssim", "max_nll")

    @classmethod
    def fit(cls, mse_values, ssim_values, max_nll_values, alpha: float = 1.0) -> "ScoreNormalizer":
        terms = {"mse": np.asarray(mse_values, float), "dssim": 1.0 - np.asarray(ssim_values, float),
                 "max_nll": np.asarray(max_nll_values, float)}
        mean = {k: float(v.mean()) for k, v in terms.items()}
        std = {k: float(max(v.std(), 1e-12)) for k, v in terms.items()}
        return cls(mean, std, alpha)

    def z(self, term: str, value):
        if term not in self.mean:
            raise ValueError(f"missing normalization statistics for {term!r}")
        return (np.asarray(value, float) - self.mean[term]) / self.std[term]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreNormalizer":
        return cls(dict(d["mean"]), dict(d["std"]), float(d.get("alpha", 1.0)))


def global_score(recon_loss_parts, per_patch_nll, normalizer: ScoreNormalizer | None):
    """Image score: z(mse) + z(1 - ssim) + alpha * z(max patch NLL).

    ``recon_loss_parts`` is ``(mse, ssim_value)``; arrays give one score per image.
    """
    if normalizer is None:
        raise ValueError("global_score needs normalization statistics from validation normals")
    mse_value, ssim_value = recon_loss_parts
    nll = np.asarray(getattr(per_patch_nll, "data", per_patch_nll), dtype=np.float64)
    max_nll = nll.max(axis=-1)
    score = (normalizer.z("mse", mse_value) + normalizer.z("dssim", 1.0 - np.asarray(ssim_value, float))
             + normalizer.alpha * normalizer.z("max_nll", max_nll))
    return float(score) if np.ndim(score) == 0 else score


# -- heatmap export -------------------------------------------------------
def write_pgm16(path, scores: np.ndarray) -> np.ndarray:
    """Write a 16-bit binary PGM after per-image min-max normalization; returns the quantized grid."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    norm = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    q = np.rint(norm * 65535.0).astype(">u2")
    h, w = s.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())
    return q.astype(np.uint16)


def write_float_grid(path, scores: np.ndarray) -> None:
    """Raw little-endian float32 grid plus a JSON sidecar with its dimensions."""
    s = np.asarray(scores)
    Path(path).write_bytes(s.astype("<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"height": int(s.shape[0]), "width": int(s.shape[1])}))


def read_float_grid(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(meta["height"], meta["width"])
