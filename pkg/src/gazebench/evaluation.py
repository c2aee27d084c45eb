"""Adaptive-F1 evaluation, classifier metrics, pixel confusion and dataset
statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotation import (
    FIXATION,
    IN_VIEW,
    TRUNCATED,
    UNTRACKED,
    AnnotationConfig,
    Clip,
    crop_augment,
    label_session,
    rasterize,
    sample_frames,
)
from .errors import EmptyEvalSet
from .model import forward_batch, sigmoid
from .synthworld import VIEWS, SessionRecord

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
HIST_BINS = 16


@dataclass
class ThresholdSweep:
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.ndim != 1 or len(t) == 0:
            raise ValueError("need at least one threshold")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(t <= 0) or np.any(t >= 1):
            raise ValueError("thresholds must lie in (0, 1)")
        self.thresholds = t

    def f1(self) -> np.ndarray:
        p, r = self.precision(), self.recall()
        denom = p + r
        return np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1), 0.0)

    def precision(self) -> np.ndarray:
        d = self.tp + self.fp
        return np.where(d > 0, self.tp / np.maximum(d, 1), 0.0)

    def recall(self) -> np.ndarray:
        d = self.tp + self.fn
        return np.where(d > 0, self.tp / np.maximum(d, 1), 0.0)


@dataclass
class MetricsReport:
    variant: str = ""
    f1: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    threshold: float = float("nan")
    confusion: np.ndarray | None = None
    classifier: dict | None = None
    frames_evaluated: int = 0
    frames_skipped: int = 0
    sweep: ThresholdSweep | None = None
    extra: dict = field(default_factory=dict)


def f1_from_counts(tp, fp, fn) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return f, p, r


def gt_mask(row_col_or_sample, height: int, width: int, radius: float) -> np.ndarray:
    """Disc of ``radius`` pixels around the rasterized gaze pixel, clipped."""
    if hasattr(row_col_or_sample, "x"):
        row, col = rasterize(row_col_or_sample.x, row_col_or_sample.y, height, width)
    else:
        row, col = row_col_or_sample
    rr, cc = np.mgrid[0:height, 0:width]
    return (rr - row) ** 2 + (cc - col) ** 2 <= radius**2


def binarize(pred: np.ndarray, tau: float, relative: bool = True) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if relative:
        peak = pred.max(axis=(-2, -1), keepdims=True)
        return pred >= tau * peak
    return pred >= tau


def adaptive_f1(pred_maps, gt_masks, thresholds=DEFAULT_THRESHOLDS, relative: bool = True):
    """Best micro-averaged pixel F1 over the threshold set.

    Returns (MetricsReport fragment, ThresholdSweep). Ties go to the smaller
    threshold.
    """
    pred = np.asarray(pred_maps, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape[0] == 0:
        raise EmptyEvalSet("no frames to evaluate")
    if pred.shape != gt.shape:
        raise ValueError("prediction and mask shapes differ")
    thr = np.asarray(thresholds, dtype=np.float64)
    tp = np.zeros(len(thr), dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    for i, tau in enumerate(thr):
        b = binarize(pred, tau, relative)
        tp[i] = np.count_nonzero(b & gt)
        fp[i] = np.count_nonzero(b & ~gt)
        fn[i] = np.count_nonzero(~b & gt)
    sweep = ThresholdSweep(thr, tp, fp, fn)
    f1 = sweep.f1()
    best = int(np.argmax(f1))
    report = MetricsReport(
        f1=float(f1[best]),
        precision=float(sweep.precision()[best]),
        recall=float(sweep.recall()[best]),
        threshold=float(thr[best]),
        frames_evaluated=int(pred.shape[0]),
        sweep=sweep,
    )
    return report, sweep


def classifier_metrics(scores, labels, threshold: float = 0.5) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s >= threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(np.count_nonzero(~pred & ~y))
    f, p, r = f1_from_counts(tp, fp, fn)
    spec = tn / (tn + fp) if tn + fp else 0.0
    return {"f1": f, "precision": p, "recall": r, "specificity": spec,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn}


def pixel_confusion(pred, gt) -> np.ndarray:
    """Row-normalized 2x2 matrix; rows are ground-truth positive / negative
    pixels, columns predicted positive / negative. Empty rows stay zero."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    counts = np.array([
        [np.count_nonzero(p & g), np.count_nonzero(~p & g)],
        [np.count_nonzero(p & ~g), np.count_nonzero(~p & ~g)],
    ], dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def select_eval_frames(clips: list[Clip], frame_indices: list | None = None) -> list[tuple[int, int]]:
    """(clip, frame) pairs labelled fixation with in-view gaze."""
    keep = []
    for ci, clip in enumerate(clips):
        idx = range(len(clip.samples)) if frame_indices is None else frame_indices[ci]
        for fi in idx:
            if clip.samples[fi].label == FIXATION:
                keep.append((ci, fi))
    return keep


def predict_clips(params: dict, clips: list[Clip], ann: AnnotationConfig, batch: int = 8):
    """Eval-mode sampling (clip start, center crop) and forward passes.

    Returns per-clip (probs, scores, samples)."""
    out = []
    for lo in range(0, len(clips), batch):
        chunk = clips[lo:lo + batch]
        frames, samples = [], []
        for clip in chunk:
            idx = sample_frames(clip.length, ann.num_frames, ann.stride, "eval")
            f = clip.frames[idx]
            s = [clip.samples[i] for i in idx]
            f, s = crop_augment(f, s, "center", ann.crop_w or f.shape[2])
            frames.append(f)
            samples.append(s)
        res, _ = forward_batch(np.stack(frames), params)
        scores = sigmoid(res["inview_logits"])
        for k in range(len(chunk)):
            out.append((res["probs"][k], scores[k], samples[k]))
    return out


def evaluate_model(params: dict, clips: list[Clip], ann: AnnotationConfig | None = None,
                   variant: str = "", thresholds=DEFAULT_THRESHOLDS, relative: bool = True,
                   radius: float | None = None, with_classifier: bool = False) -> MetricsReport:
    ann = ann or AnnotationConfig()
    radius = 2 * ann.sigma if radius is None else radius
    preds, masks = [], []
    scores, labels = [], []
    skipped = 0
    for probs, sc, samples in predict_clips(params, clips, ann):
        h, w = probs.shape[1:]
        for t, s in enumerate(samples):
            scores.append(sc[t])
            labels.append(int(s.label in IN_VIEW))
            if s.label == FIXATION:
                preds.append(probs[t])
                masks.append(gt_mask(s, h, w, radius))
            else:
                skipped += 1
    report, sweep = adaptive_f1(np.array(preds), np.array(masks), thresholds, relative)
    report.variant = variant
    report.frames_skipped = skipped
    report.confusion = pixel_confusion(binarize(np.array(preds), report.threshold, relative),
                                       np.array(masks))
    if with_classifier:
        report.classifier = classifier_metrics(scores, labels)
    return report


# ------------------------------------------------------------ dataset statistics

def view_stats(samples, w_norm: bool = True) -> dict:
    counts = {k: 0 for k in (FIXATION, "saccade", TRUNCATED, UNTRACKED)}
    xs, ys = [], []
    for s in samples:
        counts[s.label] += 1
        if s.label in IN_VIEW:
            xs.append(s.x)
            ys.append(s.y)
    valid = counts[FIXATION] + counts["saccade"] + counts[TRUNCATED]
    hist, _, _ = np.histogram2d(np.asarray(ys), np.asarray(xs), bins=HIST_BINS,
                                range=[[0, 1], [0, 1]])
    return {
        "counts": counts,
        "valid": valid,
        "out_of_bound_rate": counts[TRUNCATED] / valid if valid else 0.0,
        "mean_gaze": [float(np.mean(xs)) if xs else float("nan"),
                      float(np.mean(ys)) if ys else float("nan")],
        "histogram": hist.astype(int).tolist(),  # rows are y bins
    }


def dataset_stats(sessions, ann: AnnotationConfig | None = None) -> dict:
    """Per-view out-of-bound rate (untracked excluded), 16x16 gaze histogram
    and mean in-view gaze location over a set of sessions.

    ``sessions`` holds SessionRecords or already-labelled ``{view: samples}``.
    """
    pooled = {v: [] for v in VIEWS}
    for s in sessions:
        labels = label_session(s, ann) if isinstance(s, SessionRecord) else s
        for v in VIEWS:
            pooled[v].extend(labels.get(v, []))
    return {v: view_stats(pooled[v]) for v in VIEWS}
