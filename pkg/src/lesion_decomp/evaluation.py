"""Heatmaps, pooled-pixel PR curves, threshold segmentation and dice sweeps.

Only ROI pixels take part in any metric: heatmaps are forced to 0 outside
the ROI, and PR pooling and dice drop exterior pixels entirely.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from .model import ModelBundle

DEFAULT_DICE_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
DEFAULT_N_THRESHOLDS = 101


# ---------------------------------------------------------------------------
# heatmaps


def _roi_or_all(roi, shape):
    return np.ones(shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool).reshape(shape)


def heatmap_from_decoder(raw: np.ndarray, roi: Optional[np.ndarray] = None) -> np.ndarray:
    """Map decoder output from [-1, 1] to [0, 1]; zero outside the ROI."""
    raw = np.asarray(raw, dtype=np.float64)
    h = np.clip((raw + 1.0) / 2.0, 0.0, 1.0)
    return np.where(_roi_or_all(roi, h.shape), h, 0.0)


def minmax_rescale(values: np.ndarray, roi: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-image min-max rescale over ROI pixels; constant maps become 0."""
    values = np.asarray(values, dtype=np.float64)
    roi = _roi_or_all(roi, values.shape)
    out = np.zeros_like(values)
    if not roi.any():
        return out
    inside = values[roi]
    lo, hi = inside.min(), inside.max()
    if hi > lo:
        out[roi] = (inside - lo) / (hi - lo)
    return out


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


@torch.no_grad()
def lesion_heatmap(bundle: ModelBundle, image, roi=None) -> np.ndarray:
    """Heatmap ``(G2(E(x)) + 1) / 2`` for one preprocessed image (H, W)."""
    out = bundle.decompose(_as_batch(image))
    raw = out.lesion_est[0, 0].double().numpy()
    return heatmap_from_decoder(raw, roi)


@torch.no_grad()
def residual_heatmap(bundle: ModelBundle, image, roi=None) -> np.ndarray:
    """Decoder-free surrogate: min-max rescaled ``|x - G1(E(x))|``."""
    x = _as_batch(image)
    diff = (x - bundle.normal_estimate(x)).abs()[0, 0].double().numpy()
    return minmax_rescale(diff, roi)


@torch.no_grad()
def batch_heatmaps(bundle: ModelBundle, images: np.ndarray, rois: np.ndarray,
                   surrogate: bool = False, chunk: int = 32) -> np.ndarray:
    """Heatmaps for an ``(N, 1, H, W)`` array; returns ``(N, H, W)``."""
    maps = []
    for start in range(0, len(images), chunk):
        x = torch.from_numpy(np.ascontiguousarray(images[start:start + chunk], dtype=np.float32))
        r = rois[start:start + chunk, 0]
        if surrogate:
            diff = (x - bundle.normal_estimate(x)).abs()[:, 0].double().numpy()
            maps.extend(minmax_rescale(d, m) for d, m in zip(diff, r))
        else:
            raw = bundle.decompose(x).lesion_est[:, 0].double().numpy()
            maps.extend(heatmap_from_decoder(d, m) for d, m in zip(raw, r))
    return np.asarray(maps)


# ---------------------------------------------------------------------------
# PR curve


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    auc: float

    def points(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def threshold_grid(n_thresholds: int) -> np.ndarray:
    if n_thresholds < 2:
        raise ValueError("need at least two thresholds")
    return np.linspace(0.0, 1.0, n_thresholds)


def pr_auc(thresholds, precision, recall, n_predicted) -> float:
    """Trapezoidal area under the PR curve.

    Points are walked from the highest threshold down (recall
    non-decreasing).  Thresholds with no predicted pixel carry no precision
    information and are skipped; the curve is extended flat from the first
    real point back to recall 0.
    """
    order = np.argsort(-np.asarray(thresholds), kind="stable")
    keep = [i for i in order if n_predicted[i] > 0]
    if not keep:
        return 0.0
    r = np.concatenate([[0.0], np.asarray(recall, dtype=np.float64)[keep]])
    p = np.asarray(precision, dtype=np.float64)[keep]
    p = np.concatenate([[p[0]], p])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def _pool(heatmaps, gt_masks, rois):
    if len(heatmaps) != len(gt_masks):
        raise ValueError(f"{len(heatmaps)} heatmaps but {len(gt_masks)} masks")
    if rois is not None and len(rois) != len(heatmaps):
        raise ValueError("rois length differs from heatmaps")
    scores, labels = [], []
    for i, (h, g) in enumerate(zip(heatmaps, gt_masks)):
        h = np.asarray(h, dtype=np.float64)
        g = np.asarray(g, dtype=bool)
        if h.shape != g.shape:
            raise ValueError(f"image {i}: heatmap {h.shape} vs mask {g.shape}")
        roi = _roi_or_all(None if rois is None else rois[i], h.shape)
        scores.append(h[roi])
        labels.append(g[roi])
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(scores), np.concatenate(labels)


def pr_curve(heatmaps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
             n_thresholds: int = DEFAULT_N_THRESHOLDS, rois=None) -> PRCurve:
    """Pooled-pixel precision/recall over a uniform threshold grid on [0, 1].

    A pixel is predicted positive when its score is ``>= t``.  Precision with
    no predicted pixel is defined as 1.
    """
    scores, labels = _pool(heatmaps, gt_masks, rois)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive ground-truth pixel")
    ts = threshold_grid(n_thresholds)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = len(pos) - np.searchsorted(pos, ts, side="left")
    fp = len(neg) - np.searchsorted(neg, ts, side="left")
    fn = n_pos - tp
    pred = tp + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred > 0, tp / np.maximum(pred, 1), 1.0)
    recall = tp / n_pos
    auc = pr_auc(ts, precision, recall, pred)
    return PRCurve(ts, precision, recall, tp, fp, fn, auc)


# ---------------------------------------------------------------------------
# segmentation


def threshold_segment(heatmap: np.ndarray, t: float, roi=None) -> np.ndarray:
    h = np.asarray(heatmap, dtype=np.float64)
    return (h >= t) & _roi_or_all(roi, h.shape)


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def dice_matrix(heatmaps, gt_masks, threshold_grid=DEFAULT_DICE_GRID, rois=None) -> np.ndarray:
    """Per-image dice, shape ``(n_images, n_thresholds)``."""
    if len(heatmaps) != len(gt_masks):
        raise ValueError("heatmaps and masks differ in length")
    out = np.zeros((len(heatmaps), len(threshold_grid)))
    for i, (h, g) in enumerate(zip(heatmaps, gt_masks)):
        roi = None if rois is None else rois[i]
        g = np.asarray(g, dtype=bool) & _roi_or_all(roi, np.shape(g))
        for j, t in enumerate(threshold_grid):
            out[i, j] = dice(threshold_segment(h, t, roi), g)
    return out


def dice_sweep(heatmaps, gt_masks, threshold_grid=DEFAULT_DICE_GRID, rois=None) -> Dict[float, float]:
    """Mean-over-images dice at each threshold."""
    m = dice_matrix(heatmaps, gt_masks, threshold_grid, rois)
    means = m.mean(axis=0) if len(m) else np.zeros(len(threshold_grid))
    return {float(t): float(v) for t, v in zip(threshold_grid, means)}


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    method: str
    pr: PRCurve
    dice_by_threshold: Dict[float, float]
    best_threshold: float
    per_image_dice: List[float]
    metadata: Dict[str, object] = field(default_factory=dict)
    normal_mean_heat: Optional[float] = None
    lesion_mean_heat: Optional[float] = None

    @property
    def auc(self) -> float:
        return self.pr.auc

    @property
    def max_dice(self) -> float:
        return max(self.dice_by_threshold.values())

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "auc": self.pr.auc,
            "max_dice": self.max_dice,
            "best_threshold": self.best_threshold,
            "dice_by_threshold": [{"threshold": t, "dice": d} for t, d in self.dice_by_threshold.items()],
            "per_image_dice": self.per_image_dice,
            "normal_mean_heat": self.normal_mean_heat,
            "lesion_mean_heat": self.lesion_mean_heat,
            "pr_curve": [
                {"threshold": float(t), "precision": float(p), "recall": float(r),
                 "tp": int(a), "fp": int(b), "fn": int(c)}
                for t, p, r, a, b, c in zip(self.pr.thresholds, self.pr.precision, self.pr.recall,
                                            self.pr.tp, self.pr.fp, self.pr.fn)
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        pts = d["pr_curve"]
        arr = lambda k, dt=float: np.asarray([p[k] for p in pts], dtype=dt)  # noqa: E731
        pr = PRCurve(arr("threshold"), arr("precision"), arr("recall"),
                     arr("tp", np.int64), arr("fp", np.int64), arr("fn", np.int64), float(d["auc"]))
        return cls(
            method=d["method"], pr=pr,
            dice_by_threshold={float(e["threshold"]): float(e["dice"]) for e in d["dice_by_threshold"]},
            best_threshold=float(d["best_threshold"]), per_image_dice=list(d["per_image_dice"]),
            metadata=dict(d.get("metadata", {})), normal_mean_heat=d.get("normal_mean_heat"),
            lesion_mean_heat=d.get("lesion_mean_heat"),
        )


def evaluate_heatmaps(heatmaps, gt_masks, rois, method: str = "decomp",
                      n_thresholds: int = DEFAULT_N_THRESHOLDS, dice_grid=DEFAULT_DICE_GRID,
                      normal_heatmaps=None, normal_rois=None, metadata=None) -> EvalReport:
    pr = pr_curve(heatmaps, gt_masks, n_thresholds, rois)
    dm = dice_matrix(heatmaps, gt_masks, dice_grid, rois)
    means = dm.mean(axis=0)
    best = int(np.argmax(means))
    lesion_heat = float(np.mean(np.concatenate(
        [np.asarray(h)[np.asarray(g, dtype=bool) & _roi_or_all(r, np.shape(g))]
         for h, g, r in zip(heatmaps, gt_masks, rois if rois is not None else [None] * len(heatmaps))])))
    normal_heat = None
    if normal_heatmaps is not None and len(normal_heatmaps):
        normal_heat = float(np.mean(np.concatenate(
            [np.asarray(h)[_roi_or_all(r, np.shape(h))] for h, r in zip(
                normal_heatmaps, normal_rois if normal_rois is not None else [None] * len(normal_heatmaps))])))
    return EvalReport(
        method=method, pr=pr,
        dice_by_threshold={float(t): float(v) for t, v in zip(dice_grid, means)},
        best_threshold=float(dice_grid[best]),
        per_image_dice=[float(v) for v in dm[:, best]],
        metadata=dict(metadata or {}),
        normal_mean_heat=normal_heat, lesion_mean_heat=lesion_heat,
    )


def evaluate_model(bundle: ModelBundle, test_set, normal_set=None, surrogate: Optional[bool] = None,
                   method: str = "decomp", n_thresholds: int = DEFAULT_N_THRESHOLDS,
                   dice_grid=DEFAULT_DICE_GRID, metadata=None):
    """Evaluate a trained bundle on prepared test sets.

    ``test_set`` must carry lesion masks.  ``normal_set`` (held-out normal
    images) only feeds ``normal_mean_heat``.  Returns ``(report, heatmaps)``.
    """
    if test_set.lesion_masks is None:
        raise ValueError("test set has no lesion masks")
    if surrogate is None:
        surrogate = bundle.g2 is None
    rois = test_set.rois[:, 0]
    maps = batch_heatmaps(bundle, test_set.images, test_set.rois, surrogate=surrogate)
    normal_maps = normal_rois = None
    if normal_set is not None and len(normal_set):
        normal_maps = batch_heatmaps(bundle, normal_set.images, normal_set.rois, surrogate=surrogate)
        normal_rois = normal_set.rois[:, 0]
    report = evaluate_heatmaps(maps, test_set.lesion_masks, rois, method=method,
                               n_thresholds=n_thresholds, dice_grid=dice_grid,
                               normal_heatmaps=normal_maps, normal_rois=normal_rois,
                               metadata=metadata)
    return report, maps


# ---------------------------------------------------------------------------
# files


def save_report(report: EvalReport, out_dir: Union[str, Path], heatmaps=None, ids=None,
                plots: bool = True) -> Path:
    """Write ``report.json``, ``pr_curve.csv``, ``dice.csv``, optional heatmaps and plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall", "tp", "fp", "fn"])
        for t, p, r, a, b, c in zip(report.pr.thresholds, report.pr.precision, report.pr.recall,
                                    report.pr.tp, report.pr.fp, report.pr.fn):
            w.writerow([f"{t:.6g}", repr(float(p)), repr(float(r)), int(a), int(b), int(c)])
    with open(out / "dice.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "mean_dice"])
        for t, d in report.dice_by_threshold.items():
            w.writerow([f"{t:.6g}", repr(d)])
    if heatmaps is not None:
        save_heatmaps(heatmaps, out / "heatmaps", ids)
    if plots:
        plot_pr([report], out / "pr_curve.png")
        plot_dice([report], out / "dice.png")
    return path


def load_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def save_heatmaps(heatmaps, out_dir: Union[str, Path], ids=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = list(ids) if ids is not None and len(ids) else [f"{i:05d}" for i in range(len(heatmaps))]
    arr = np.asarray(heatmaps, dtype=np.float32)
    with open(out / "heatmaps.npy", "wb") as fh:
        np.save(fh, arr)
    (out / "ids.txt").write_text("\n".join(ids) + "\n")
    for sid, h in zip(ids, arr):
        png = np.round(np.clip(h, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(png, mode="L").save(out / f"{sid}.png", format="PNG")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_pr(reports: Sequence[EvalReport], path: Union[str, Path], labels=None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, rep in enumerate(reports):
        label = labels[i] if labels else rep.metadata.get("ablation") or rep.method
        keep = (rep.pr.tp + rep.pr.fp) > 0
        ax.plot(rep.pr.recall[keep], rep.pr.precision[keep], label=f"{label} (AUC {rep.auc:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_dice(reports: Sequence[EvalReport], path: Union[str, Path]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for rep in reports:
        ts = list(rep.dice_by_threshold)
        ax.plot(ts, [rep.dice_by_threshold[t] for t in ts], marker="o", label=rep.method)
    ax.set_xlabel("threshold")
    ax.set_ylabel("mean dice")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def report_summary(report: EvalReport) -> dict:
    d = {"method": report.method, "auc": report.auc, "max_dice": report.max_dice,
         "best_threshold": report.best_threshold}
    d.update({k: v for k, v in report.metadata.items() if isinstance(v, (str, int, float))})
    return d


def replace_metadata(report: EvalReport, **updates) -> EvalReport:
    return dataclasses.replace(report, metadata={**report.metadata, **updates})
