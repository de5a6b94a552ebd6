"""Evaluation metrics and the per-task report container.

Mask metrics operate on binary arrays: IoU as intersection over union
(empty vs empty counts as 1), F-score as the beta-weighted
precision/recall combination with beta^2 = 0.3. Localization quality is
summarized by cIoU@tau (fraction of samples whose IoU clears tau) and
the area under the cIoU-vs-tau curve over tau = 0, 0.05, ..., 1.
Parsing quality is segment-level micro F1 per modality stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

CIOU_THRESHOLDS = np.round(np.arange(0.0, 1.0 + 1e-9, 0.05), 2)


def _as_binary(x, name):
    arr = np.asarray(x)
    if arr.dtype != bool:
        vals = np.unique(arr)
        if vals.size and not np.all(np.isin(vals, (0, 1))):
            raise ShapeError(f"{name} mask must be 0/1, found values {vals[:5]}")
        arr = arr.astype(bool)
    return arr


def binarize_logits(logits):
    """Threshold mask logits at probability 0.5 (logit 0)."""
    return np.asarray(logits) >= 0.0


def iou(pred, truth):
    """Intersection over union of two binary masks of equal shape."""
    p = _as_binary(pred, "predicted")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def mean_iou(pairs):
    """Mean IoU over (pred, truth) pairs."""
    vals = [iou(p, t) for p, t in pairs]
    if not vals:
        raise ShapeError("mean_iou over an empty list")
    return float(np.mean(vals))


def f_beta(pred, truth, beta2=0.3):
    """F-score with precision weighted by beta^2 (default 0.3)."""
    p = _as_binary(pred, "predicted")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = float(np.logical_and(p, t).sum())
    fp = float(np.logical_and(p, ~t).sum())
    fn = float(np.logical_and(~p, t).sum())
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return float((1 + beta2) * precision * recall
                 / (beta2 * precision + recall))


def ciou_at(ious, tau=0.5):
    """Fraction of samples with IoU >= tau."""
    ious = list(ious)
    if not ious:
        raise ShapeError("ciou over an empty list")
    return float(np.mean([x >= tau for x in ious]))


def ciou_auc(ious):
    """Area under the cIoU-versus-threshold curve, trapezoid rule."""
    curve = [ciou_at(ious, tau) for tau in CIOU_THRESHOLDS]
    return float(np.trapezoid(curve, CIOU_THRESHOLDS))


def segment_accuracy(pred, truth):
    """Fraction of positions where integer labels agree."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"label shapes differ: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ShapeError("accuracy of an empty label array")
    return float(np.mean(p == t))


def micro_f1(pred, truth):
    """Micro-averaged F1 over a multi-hot (N, K) grid."""
    p = _as_binary(pred, "predicted")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ShapeError(f"grid shapes differ: {p.shape} vs {t.shape}")
    tp = float(np.logical_and(p, t).sum())
    fp = float(np.logical_and(p, ~t).sum())
    fn = float(np.logical_and(~p, t).sum())
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return float(2 * tp / (2 * tp + fp + fn))


def parsing_f1(pred_audible, pred_visible, true_audible, true_visible):
    """Segment-level F1 for the audio, visual, and joint streams plus
    their average. The joint stream is presence in both modalities."""
    fa = micro_f1(pred_audible, true_audible)
    fv = micro_f1(pred_visible, true_visible)
    pav = np.logical_and(_as_binary(pred_audible, "pred"),
                         _as_binary(pred_visible, "pred"))
    tav = np.logical_and(_as_binary(true_audible, "truth"),
                         _as_binary(true_visible, "truth"))
    fav = micro_f1(pav, tav)
    return {"audio": fa, "visual": fv, "audio_visual": fav,
            "average": float((fa + fv + fav) / 3.0)}


@dataclass
class MetricReport:
    """Flat name -> value map with stable ordering for output."""

    values: dict = field(default_factory=dict)

    def set(self, name, value):
        v = float(value)
        if not (np.isfinite(v) and -1e-9 <= v <= 1 + 1e-9):
            raise ShapeError(f"metric {name} = {v} outside [0, 1]")
        self.values[name] = min(max(v, 0.0), 1.0)

    def get(self, name):
        return self.values[name]

    def lines(self, sep="\t"):
        return [f"{k}{sep}{self.values[k]:.6f}" for k in sorted(self.values)]

    def format(self, sep="\t"):
        return "\n".join(self.lines(sep)) + "\n"

    def as_dict(self):
        return dict(self.values)
