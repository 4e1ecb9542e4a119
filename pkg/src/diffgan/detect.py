"""Reconstruction-error scoring, thresholding and point-wise P/R/F1."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .controller import GanModels, diffgan_reconstruct
from .data import make_windows
from .diffusion import partial_diffusion_reconstruct
from .errors import ContractError, DatasetError, ThresholdError, ValidationError
from .nn_core import RngStream

log = logging.getLogger(__name__)

Reconstructor = Callable[[torch.Tensor, RngStream], tuple[torch.Tensor, np.ndarray | None]]


def diffgan_reconstructor(models: GanModels, denoiser, variant: str = "ddpm") -> Reconstructor:
    def run(windows, rng):
        return diffgan_reconstruct(windows, models, denoiser, rng, variant)
    return run


def fixed_step_reconstructor(denoiser, steps: int, variant: str = "ddpm") -> Reconstructor:
    def run(windows, rng):
        recon = partial_diffusion_reconstruct(windows, steps, denoiser, rng, variant)
        return recon, np.full(len(windows), steps)
    return run


@dataclass
class ScoreSeries:
    scores: np.ndarray            # [T]; NaN where no window covers t
    coverage: np.ndarray          # [T] number of covering windows
    window_steps: np.ndarray | None = None

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0


def aggregate_errors(errors: np.ndarray, starts: np.ndarray, T: int, how: str = "mean") -> ScoreSeries:
    """Per-timepoint score from per-window errors ``[k, w]`` placed at ``starts``."""
    k, w = errors.shape
    coverage = np.zeros(T, dtype=np.int64)
    for s in starts:
        coverage[s:s + w] += 1
    scores = np.full(T, np.nan)
    if how == "mean":
        total = np.zeros(T)
        for s, e in zip(starts, errors):
            total[s:s + w] += e
        live = coverage > 0
        scores[live] = total[live] / coverage[live]
    elif how == "median":
        buckets: list[list[float]] = [[] for _ in range(T)]
        for s, e in zip(starts, errors):
            for o in range(w):
                buckets[s + o].append(e[o])
        for t, b in enumerate(buckets):
            if b:
                scores[t] = float(np.median(b))
    else:
        raise ValidationError(f"unknown aggregation {how!r}")
    return ScoreSeries(scores, coverage)


def score_series(values: np.ndarray, reconstruct: Reconstructor, window: int, stride: int, rng: RngStream,
                 batch_size: int = 256, aggregate: str = "mean") -> ScoreSeries:
    """Window the (normalised) series, reconstruct each window, aggregate squared errors.

    The per-window error at a timepoint is the squared Euclidean distance
    across dimensions, summed (not averaged) over D. Window batches draw from
    their own RNG substreams, so results do not depend on how they are split
    across workers.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < window:
        raise DatasetError(f"series of length {values.shape[0]} is shorter than the window {window}")
    ws = make_windows(values, window, stride)
    x = torch.as_tensor(ws.windows, dtype=torch.float32)
    errors, steps = [], []
    with torch.no_grad():
        for b, start in enumerate(range(0, len(x), batch_size)):
            chunk = x[start:start + batch_size]
            recon, st = reconstruct(chunk, rng.spawn(f"batch{b}"))
            errors.append((chunk.double() - recon.double()).pow(2).sum(dim=2).numpy())
            if st is not None:
                steps.append(np.asarray(st))
    out = aggregate_errors(np.concatenate(errors), ws.starts, values.shape[0], aggregate)
    out.window_steps = np.concatenate(steps) if steps else None
    return out


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _binary(a, what: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise ValidationError(f"{what} must be one-dimensional")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{what} must be binary")
    return arr.astype(bool)


def f1_from(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate(pred, true) -> Metrics:
    """Point-wise precision, recall and F1 (0 whenever a denominator is 0)."""
    yhat, y = _binary(pred, "predictions"), _binary(true, "labels")
    if yhat.shape != y.shape:
        raise ValidationError(f"length mismatch: {len(yhat)} predictions vs {len(y)} labels")
    tp = int(np.sum(yhat & y))
    fp = int(np.sum(yhat & ~y))
    fn = int(np.sum(~yhat & y))
    tn = int(np.sum(~yhat & ~y))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return Metrics(p, r, f1_from(p, r), tp, fp, fn, tn)


def point_adjust(pred, true) -> np.ndarray:
    """Mark a whole labelled segment as detected when any point in it is flagged."""
    yhat, y = _binary(pred, "predictions").copy(), _binary(true, "labels")
    t = 0
    while t < len(y):
        if y[t]:
            end = t
            while end < len(y) and y[end]:
                end += 1
            if yhat[t:end].any():
                yhat[t:end] = True
            t = end
        else:
            t += 1
    return yhat.astype(np.int8)


def best_f1_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximising F1 under ``score > threshold``; returns (threshold, F1).

    Candidates are the midpoints between consecutive distinct scores, the
    largest score (nothing flagged) and a point below the smallest score,
    floored at 0. Thresholds are non-negative, so scores <= 0 are never
    flagged and cuts that would need them flagged are not considered.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    keep = ~np.isnan(s)
    s, y = s[keep], y[keep]
    npos = int(y.sum())
    if npos == 0:
        raise ThresholdError("best-F1 threshold needs at least one positive label; use a quantile strategy")
    distinct = np.unique(s)[::-1]          # descending
    if len(distinct) == 1:
        warnings.warn("all scores identical; threshold is degenerate", RuntimeWarning)
        return float(distinct[0]), float(evaluate((s > distinct[0]).astype(int), y).f1)
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    # cut after every group of equal scores
    last_of_group = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tp = np.cumsum(yy)[last_of_group]
    npred = last_of_group + 1
    f1 = np.where(distinct > 0, 2 * tp / (npos + npred), -1.0)
    best = int(np.argmax(f1))
    if f1[best] <= 0:
        return max(float(distinct[0]), 0.0), 0.0
    if best + 1 < len(distinct):
        thr = max(0.5 * (distinct[best] + distinct[best + 1]), 0.0)
    else:
        gap = 0.5 * (distinct[-2] - distinct[-1])
        thr = max(distinct[-1] - gap, 0.0)
    return float(thr), float(f1[best])


def select_threshold(scores, labels=None, strategy: str = "best_f1", q: float | None = None,
                     normal_scores=None) -> float:
    """Pick the decision threshold.

    ``best_f1`` scans the labelled (validation) scores; ``quantile`` takes the
    ``q``-quantile of ``normal_scores`` (scores of anomaly-free data; defaults
    to ``scores``).
    """
    if strategy == "best_f1":
        if labels is None:
            raise ThresholdError("best_f1 strategy needs labels")
        return best_f1_threshold(scores, labels)[0]
    if strategy == "quantile":
        if q is None or not 0 < q < 1:
            raise ThresholdError(f"quantile strategy needs q in (0, 1), got {q}")
        ref = np.asarray(scores if normal_scores is None else normal_scores, dtype=np.float64)
        ref = ref[~np.isnan(ref)]
        if ref.size and np.all(ref == ref[0]):
            warnings.warn("all scores identical; threshold is degenerate", RuntimeWarning)
        return float(np.quantile(ref, q))
    raise ThresholdError(f"unknown threshold strategy {strategy!r}")


# ----------------------------------------------------------------- report


@dataclass
class DetectionReport:
    threshold: float
    scores: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray | None = None
    metrics: Metrics | None = None
    mode: str = "diffgan"
    window_steps: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "threshold": self.threshold,
            "scores": [None if np.isnan(v) else float(v) for v in self.scores],
            "predictions": self.predictions.astype(int).tolist(),
            "uncovered": int(np.isnan(self.scores).sum()),
        }
        if self.metrics is not None:
            out["metrics"] = self.metrics.as_dict()
        if self.window_steps is not None:
            out["window_steps"] = np.asarray(self.window_steps).astype(int).tolist()
            out["mean_step"] = float(np.mean(self.window_steps))
        out.update(self.extra)
        return out

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "score", "pred", "label"])
            for t, (s, p) in enumerate(zip(self.scores, self.predictions)):
                lab = "" if self.labels is None else int(self.labels[t])
                w.writerow([t, "" if np.isnan(s) else repr(float(s)), int(p), lab])


def detect_scores(scores: ScoreSeries | np.ndarray, threshold: float, labels=None, mode: str = "diffgan",
                  point_adjustment: bool = False) -> DetectionReport:
    """Label timepoints with score > threshold and evaluate against ``labels``."""
    if not threshold >= 0:
        raise ContractError(f"threshold must be >= 0, got {threshold}")
    series = scores if isinstance(scores, ScoreSeries) else None
    values = np.asarray(series.scores if series else scores, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        pred = (values > threshold).astype(np.int8)
    metrics = None
    if labels is not None:
        labels = np.asarray(labels)
        evaluated = point_adjust(pred, labels) if point_adjustment else pred
        metrics = evaluate(evaluated, labels)
    return DetectionReport(float(threshold), values, pred, labels, metrics, mode,
                           series.window_steps if series else None)


def detect(values: np.ndarray, reconstruct: Reconstructor, threshold: float, window: int, stride: int,
           rng: RngStream, labels=None, mode: str = "diffgan", point_adjustment: bool = False) -> DetectionReport:
    if not threshold >= 0:
        raise ContractError(f"threshold must be >= 0, got {threshold}")
    scores = score_series(values, reconstruct, window, stride, rng)
    return detect_scores(scores, threshold, labels, mode, point_adjustment)
