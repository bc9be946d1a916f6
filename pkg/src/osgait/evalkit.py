"""Openness, macro-F1, and multi-trial open-set evaluation with dispersion."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import openset
from .dataio import DatasetPartition, WindowSet, make_partition, split_known, split_known_by_chunk
from .model import PCAA, ModelConfig
from .priors import place_centroids
from .seeding import sub_seed
from .training import TrainConfig, train

log = logging.getLogger(__name__)


def openness(n_known: int, n_unknown: int) -> float:
    if n_known < 1 or n_unknown < 0:
        raise ValueError("need n_known >= 1 and n_unknown >= 0")
    return 1.0 - math.sqrt(2 * n_known / (2 * n_known + n_unknown))


def per_class_f1(confusion) -> tuple[np.ndarray, np.ndarray]:
    """F1 per class (rows true, columns predicted) and a flag for classes with
    TP = FP = FN = 0, which are scored 0."""
    cm = np.asarray(confusion, dtype=float)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion counts must be non-negative")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    empty = denom == 0
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=~empty)
    return f1, empty


def macro_f1(confusion) -> float:
    f1, empty = per_class_f1(confusion)
    if empty.any():
        log.warning("classes %s have no samples and no predictions; scored F1=0",
                    np.flatnonzero(empty).tolist())
    return float(f1.mean())


def chance_confusion(confusion) -> np.ndarray:
    """Expected counts when predictions are independent of the truth but keep
    the observed row and column totals."""
    cm = np.asarray(confusion, dtype=float)
    n = cm.sum()
    if n == 0:
        return cm.copy()
    return np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n


def chance_macro_f1(confusion) -> float:
    return macro_f1(chance_confusion(confusion))


def dispersion(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(n); 0 for a single value."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(len(v)))


@dataclass
class TrialReport:
    trial: int
    seed: int
    n_known: int
    n_unknown: int
    openness: float
    k: int
    confusion: list
    macro_f1: float
    closed_set_accuracy: float
    per_class_f1: list
    empty_classes: list = field(default_factory=list)
    tau: float = float("nan")
    chance_f1: float = float("nan")

    @classmethod
    def from_confusion(cls, confusion, *, trial, seed, n_known, n_unknown, k,
                       closed_set_accuracy=float("nan"), tau=float("nan")) -> "TrialReport":
        cm = np.asarray(confusion, dtype=int)
        f1, empty = per_class_f1(cm)
        return cls(trial=trial, seed=seed, n_known=n_known, n_unknown=n_unknown,
                   openness=openness(n_known, n_unknown), k=k, confusion=cm.tolist(),
                   macro_f1=float(f1.mean()), closed_set_accuracy=float(closed_set_accuracy),
                   per_class_f1=f1.tolist(), empty_classes=np.flatnonzero(empty).tolist(),
                   tau=float(tau), chance_f1=chance_macro_f1(cm))

    def to_dict(self) -> dict:
        return asdict(self)


class TrialError(RuntimeError):
    def __init__(self, trial: int, cause: Exception):
        super().__init__(f"trial {trial} failed: {cause}")
        self.trial = trial


def summarize(reports: Sequence[TrialReport]) -> list[dict]:
    """Per-k mean macro-F1 and dispersion, folded in trial order."""
    rows = []
    for k in sorted({r.k for r in reports}):
        sel = sorted((r for r in reports if r.k == k), key=lambda r: r.trial)
        f1 = [r.macro_f1 for r in sel]
        rows.append({"openness": sel[0].openness, "k": k, "mean_f1": float(np.mean(f1)),
                     "dispersion": dispersion(f1), "n_trials": len(sel)})
    return rows


@dataclass
class ExperimentReport:
    reports: list[TrialReport]
    config: dict = field(default_factory=dict)

    @property
    def summary(self) -> list[dict]:
        return summarize(self.reports)

    def mean_f1(self, k: int) -> float:
        return next(r["mean_f1"] for r in self.summary if r["k"] == k)

    def to_dict(self) -> dict:
        return {"config_digest": digest_of(self.config), "config": self.config,
                "trials": [r.to_dict() for r in self.reports], "summary": self.summary}

    @property
    def digest(self) -> str:
        return digest_of(self.to_dict())

    def write_json(self, path):
        d = self.to_dict()
        d["report_digest"] = digest_of(d)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))

    def write_csv(self, path):
        lines = ["openness,k,mean_f1,dispersion"]
        lines += [f"{r['openness']!r},{r['k']},{r['mean_f1']!r},{r['dispersion']!r}" for r in self.summary]
        Path(path).write_text("\n".join(lines) + "\n")


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


Pipeline = Callable[[int, int], Sequence[TrialReport]]


def run_trials(pipeline: Pipeline, n_trials: int, base_seed: int = 0, config: dict | None = None) -> ExperimentReport:
    """Call ``pipeline(trial, seed)`` for each trial with a seed derived from
    ``base_seed`` and collect the per-k reports it returns."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    reports: list[TrialReport] = []
    for t in range(n_trials):
        seed = sub_seed(base_seed, "trial", t)
        try:
            reports.extend(pipeline(t, seed))
        except Exception as exc:
            raise TrialError(t, exc) from exc
    return ExperimentReport(reports, dict(config or {}))


# ---------------------------------------------------------------------------
# The concrete train -> calibrate -> evaluate pipeline
# ---------------------------------------------------------------------------

@dataclass
class OpenSetProtocol:
    """Settings of one open-set trial. ``unknown_count`` counts evaluated
    unknown subjects; one extra unknown subject is held out for calibration."""

    unknown_count: int
    ks: tuple[int, ...] = (1, 2, 4, 6)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_by_chunk: bool = False
    modality: int | None = None
    untrained: bool = False

    def to_dict(self) -> dict:
        return {"unknown_count": self.unknown_count, "ks": list(self.ks), "model": self.model.to_dict(),
                "train": asdict(self.train), "split_by_chunk": self.split_by_chunk,
                "modality": self.modality, "untrained": self.untrained}


@dataclass
class TrialSplit:
    """Partition plus the known-subject split of one trial (indices into ``known``)."""

    partition: DatasetPartition
    known: WindowSet
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def to_dict(self) -> dict:
        p = self.partition
        return {"known": list(p.known), "unknown": list(p.unknown),
                "calibration_subject": p.calibration_subject, "partition_seed": p.seed,
                "train": self.train_idx.tolist(), "val": self.val_idx.tolist(), "test": self.test_idx.tolist()}


def prepare_trial(windows: WindowSet, protocol: OpenSetProtocol, seed: int) -> TrialSplit:
    part = make_partition(windows.subjects, protocol.unknown_count + 1, sub_seed(seed, "partition"))
    known_ws = windows.subset(np.flatnonzero(np.isin(windows.labels, part.known)))
    split_seed = sub_seed(seed, "split")
    if protocol.split_by_chunk:
        tr, va, te = split_known_by_chunk(known_ws, protocol.model.N_f, split_seed)
    else:
        tr, va, te = split_known(known_ws.labels, split_seed)
    part = replace(part, train=tuple(tr.tolist()), val=tuple(va.tolist()), test=tuple(te.tolist()))
    return TrialSplit(part, known_ws, tr, va, te)


def fit_trial(split: TrialSplit, protocol: OpenSetProtocol, seed: int):
    """(model, scoring prior, checkpoint or None) for one trial."""
    train_cfg = replace(protocol.train, seed=sub_seed(seed, "train"))
    if protocol.untrained:
        model, prior = _untrained(split.known.subjects, protocol.model, train_cfg)
        return model, prior, None
    ckpt = train(split.known.subset(split.train_idx), split.known.subset(split.val_idx),
                 protocol.model, train_cfg)
    model = ckpt.build_model()
    return model, ckpt.scoring_prior(model), ckpt


def calibrate_trial(windows: WindowSet, split: TrialSplit, model: PCAA, prior) -> float:
    """tau from known training-split scores against the calibration subject."""
    s_train, _ = openset.score_windows(model, prior, split.known.data[split.train_idx])
    cal = windows.subset(np.flatnonzero(windows.labels == split.partition.calibration_subject))
    s_cal, _ = openset.score_windows(model, prior, cal.data)
    return openset.calibrate_threshold(s_train, s_cal)


def evaluate_trial(windows: WindowSet, split: TrialSplit, model: PCAA, prior, tau: float,
                   ks: Sequence[int], trial: int = 0, seed: int = 0,
                   modality: int | None = None) -> list[TrialReport]:
    part = split.partition
    test = split.known.subset(split.test_idx)
    unknown = windows.subset(np.flatnonzero(np.isin(windows.labels, part.evaluated_unknown)))
    if modality is not None:
        test = test.subset(np.flatnonzero(test.modality == modality))
        unknown = unknown.subset(np.flatnonzero(unknown.modality == modality))
    merged = openset._concat(test, unknown)
    if len(merged) == 0:
        raise ValueError("no test windows left after filtering")
    scores, preds = openset.score_windows(model, prior, merged.data)
    is_known = np.arange(len(merged)) < len(test)
    acc = float(np.mean(preds[is_known] == merged.labels[is_known])) if is_known.any() else float("nan")
    key = merged.segment * 10**9 + merged.start
    out = []
    for k in ks:
        cm = openset.confusion_from_scores(scores, preds, merged.labels, key, prior.subject_ids, tau, k)
        out.append(TrialReport.from_confusion(cm, trial=trial, seed=seed, n_known=len(part.known),
                                              n_unknown=len(part.evaluated_unknown), k=k,
                                              closed_set_accuracy=acc, tau=tau))
        log.info("trial %d k=%d macro-F1=%.3f", trial, k, out[-1].macro_f1)
    return out


def openset_trial(windows: WindowSet, protocol: OpenSetProtocol, trial: int, seed: int) -> list[TrialReport]:
    """Partition, train on the known training split, calibrate tau against the
    calibration subject, then evaluate every k on the same model."""
    split = prepare_trial(windows, protocol, seed)
    model, prior, _ = fit_trial(split, protocol, seed)
    tau = calibrate_trial(windows, split, model, prior)
    return evaluate_trial(windows, split, model, prior, tau, protocol.ks, trial, seed, protocol.modality)


def _untrained(subjects, model_cfg: ModelConfig, train_cfg: TrainConfig):
    cfg = ModelConfig(**{**model_cfg.to_dict(), "M": len(subjects), "dtype": train_cfg.precision})
    prior = place_centroids(len(subjects), cfg.K, train_cfg.prior_radius, train_cfg.prior_min_separation,
                            seed=sub_seed(train_cfg.seed, "prior"), subject_ids=subjects)
    model = PCAA(cfg, seed=sub_seed(train_cfg.seed, "init"))
    model.eval()
    return model, prior


def run_openset_experiment(windows: WindowSet, protocol: OpenSetProtocol, n_trials: int,
                           base_seed: int = 0) -> ExperimentReport:
    return run_trials(lambda t, s: openset_trial(windows, protocol, t, s), n_trials, base_seed,
                      config=protocol.to_dict() | {"base_seed": base_seed, "n_trials": n_trials})


def points_sweep(build: Callable[[int], WindowSet], points: Sequence[int], protocol: OpenSetProtocol,
                 n_trials: int, base_seed: int = 0) -> dict[int, ExperimentReport]:
    """Rebuild windows and retrain at each N_p value."""
    out = {}
    for n_p in points:
        proto = replace(protocol, model=replace(protocol.model, N_p=n_p))
        out[n_p] = run_openset_experiment(build(n_p), proto, n_trials, base_seed)
    return out


def unknown_count_sweep(windows: WindowSet, protocol: OpenSetProtocol, counts: Sequence[int], n_trials: int,
                        base_seed: int = 0) -> dict[int, ExperimentReport]:
    """One experiment per evaluated-unknown count; partitions are nested for a fixed seed."""
    return {u: run_openset_experiment(windows, replace(protocol, unknown_count=u), n_trials, base_seed)
            for u in counts}


def trend_rows(sweep: dict[int, ExperimentReport]) -> list[dict]:
    """Flatten a sweep into plot-ready rows keyed by the swept value."""
    return [{"value": v, **row} for v, rep in sweep.items() for row in rep.summary]


def write_trend_csv(path, rows: list[dict], key: str = "value"):
    lines = [f"{key},openness,k,mean_f1,dispersion"]
    lines += [f"{r['value']},{r['openness']!r},{r['k']},{r['mean_f1']!r},{r['dispersion']!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
