"""k-sample novelty detection over mixture log-likelihood scores, and threshold
calibration from one held-out unknown subject."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataio import WindowSet
from .model import PCAA
from .priors import CentroidPrior, log_mixture_likelihood


@dataclass(frozen=True)
class DetectorConfig:
    tau: float          # threshold on log p(z)
    k: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def save(self, path, checkpoint_digest: str = ""):
        Path(path).write_text(json.dumps(
            {"tau": self.tau, "k": self.k, "checkpoint_digest": checkpoint_digest}, indent=2))

    @staticmethod
    def load(path) -> tuple["DetectorConfig", str]:
        d = json.loads(Path(path).read_text())
        return DetectorConfig(float(d["tau"]), int(d["k"])), d.get("checkpoint_digest", "")


@dataclass
class DetectionOutcome:
    subject: int | None            # None means Unknown
    scores: np.ndarray
    predictions: np.ndarray

    @property
    def is_unknown(self) -> bool:
        return self.subject is None

    def __str__(self):
        return "Unknown" if self.subject is None else f"Known({self.subject})"


def decide(scores, predictions, tau: float) -> int | None:
    """Majority test: strictly more than half the scores above ``tau`` gives the
    modal prediction, otherwise Unknown (None). Modal ties go to the label whose
    windows have the largest summed score, then to the smaller label."""
    scores = np.asarray(scores, dtype=float)
    predictions = np.asarray(predictions)
    k = len(scores)
    if k == 0 or len(predictions) != k:
        raise ValueError("need equally many scores and predictions, k >= 1")
    if 2 * int((scores > tau).sum()) <= k:
        return None
    labels, counts = np.unique(predictions, return_counts=True)
    top = labels[counts == counts.max()]
    if len(top) == 1:
        return int(top[0])
    totals = np.array([scores[predictions == lab].sum() for lab in top])
    return int(top[np.flatnonzero(totals == totals.max())[0]])


def score_windows(model: PCAA, prior: CentroidPrior, data: np.ndarray, batch_size: int = 256):
    """(log-likelihood scores, predicted subject ids) for each window, eval mode."""
    model.eval()
    ids = np.array(prior.subject_ids)
    scores, preds = [], []
    with tc.no_grad():
        for i in range(0, len(data), batch_size):
            z = model.encode(data[i:i + batch_size].astype(model.cfg.dtype))
            p = model.classify(z)
            scores.append(log_mixture_likelihood(prior, z.data.astype(np.float64)))
            preds.append(ids[p.data.argmax(axis=1)])
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=int)
    return np.concatenate(scores), np.concatenate(preds)


def detect(windows: np.ndarray, model: PCAA, prior: CentroidPrior, config: DetectorConfig) -> DetectionOutcome:
    if len(windows) != config.k:
        raise ValueError(f"detector expects k={config.k} windows, got {len(windows)}")
    scores, preds = score_windows(model, prior, np.asarray(windows))
    return DetectionOutcome(decide(scores, preds, config.tau), scores, preds)


def youden_curve(known_scores, unknown_scores, thresholds):
    known = np.sort(np.asarray(known_scores, dtype=float))
    unknown = np.sort(np.asarray(unknown_scores, dtype=float))
    tpr = 1.0 - np.searchsorted(known, thresholds, side="right") / len(known)
    fpr = 1.0 - np.searchsorted(unknown, thresholds, side="right") / len(unknown)
    return tpr - fpr


def calibrate_threshold(known_scores, unknown_scores) -> float:
    """Threshold maximising TPR - FPR (Youden's J) over midpoints of the merged
    score list; a positive is a known sample scoring above the threshold. Ties
    go to the larger threshold."""
    known = np.asarray(known_scores, dtype=float)
    unknown = np.asarray(unknown_scores, dtype=float)
    if known.size == 0 or unknown.size == 0:
        raise ValueError("both score sets must be non-empty")
    values = np.unique(np.concatenate([known, unknown]))
    if len(values) < 2:
        raise ValueError("degenerate score distributions: a single distinct value")
    mids = (values[:-1] + values[1:]) / 2
    # J scaled by |known|*|unknown| is an exact integer, so ties are exact
    above_k = len(known) - np.searchsorted(np.sort(known), mids, side="right")
    above_u = len(unknown) - np.searchsorted(np.sort(unknown), mids, side="right")
    J = above_k * len(unknown) - above_u * len(known)
    best = np.flatnonzero(J == J.max())[-1]
    return float(mids[best])


def blocks(order: np.ndarray, k: int) -> list[np.ndarray]:
    """Consecutive non-overlapping groups of k; a short tail is dropped."""
    return [order[i:i + k] for i in range(0, len(order) - k + 1, k)]


def confusion_from_scores(scores, preds, true_labels, time_key, known_ids, tau: float, k: int) -> np.ndarray:
    """(|S_K|+1)^2 confusion (rows true, columns predicted; last index Unknown).

    Windows are grouped per true subject in ``time_key`` order into blocks of k;
    every block yields one decision.
    """
    known_ids = list(known_ids)
    col = {s: i for i, s in enumerate(known_ids)}
    U = len(known_ids)
    cm = np.zeros((U + 1, U + 1), dtype=int)
    scores, preds = np.asarray(scores), np.asarray(preds)
    true_labels, time_key = np.asarray(true_labels), np.asarray(time_key)
    for sid in np.unique(true_labels):
        idx = np.flatnonzero(true_labels == sid)
        idx = idx[np.argsort(time_key[idx], kind="stable")]
        row = col.get(int(sid), U)
        for blk in blocks(idx, k):
            verdict = decide(scores[blk], preds[blk], tau)
            cm[row, U if verdict is None else col[verdict]] += 1
    return cm


def evaluate_openset(model: PCAA, prior: CentroidPrior, tau: float, k: int,
                     known_test: WindowSet, unknown_test: WindowSet) -> np.ndarray:
    """Confusion matrix over known test windows plus the evaluated unknown subjects."""
    if len(known_test) + len(unknown_test) == 0:
        raise ValueError("empty test set")
    merged = _concat(known_test, unknown_test)
    scores, preds = score_windows(model, prior, merged.data)
    key = merged.segment * 10**9 + merged.start
    return confusion_from_scores(scores, preds, merged.labels, key, prior.subject_ids, tau, k)


def _concat(a: WindowSet, b: WindowSet) -> WindowSet:
    return WindowSet(np.concatenate([a.data, b.data]), np.concatenate([a.labels, b.labels]),
                     np.concatenate([a.modality, b.modality]), np.concatenate([a.segment, b.segment]),
                     np.concatenate([a.start, b.start]))

