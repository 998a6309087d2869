"""Macro precision/recall/F1 metrics, probability-averaging ensemble, and
k-fold evaluation.

The ensemble is the deployment-time meta predictor: per-example class
probability vectors from several trained models are averaged elementwise
and the argmax of the mean is the prediction.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .seeding import derive_seed
from .textprep import Batch, FoldPlan, split

log = logging.getLogger(__name__)


@dataclass
class ProbabilityMatrix:
    """Per-example class probabilities produced by one trained model."""

    model_id: str
    probs: np.ndarray  # [n, C], rows on the simplex

    def validate(self) -> "ProbabilityMatrix":
        p = self.probs
        if p.ndim != 2:
            raise InputError(f"{self.model_id}: probabilities must be 2-D, got shape {p.shape}")
        if np.any(p < -1e-9) or np.any(p > 1 + 1e-9):
            raise InputError(f"{self.model_id}: probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
            raise InputError(f"{self.model_id}: probability rows must sum to 1 within 1e-5")
        return self


@dataclass
class MetricReport:
    precision: list      # per class
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "precision": [float(x) for x in self.precision],
            "recall": [float(x) for x in self.recall],
            "f1": [float(x) for x in self.f1],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "confusion": self.confusion.tolist(),
        }


def confusion(gold, pred, num_classes: int) -> np.ndarray:
    """Count matrix: entry (g, p) counts examples with gold g predicted p."""
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.shape != pred.shape:
        raise InputError(f"gold and pred lengths disagree: {gold.shape} vs {pred.shape}")
    for name, arr in (("gold", gold), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (gold, pred), 1)
    return counts


def macro_f1(counts: np.ndarray) -> MetricReport:
    """Per-class precision/recall/F1 and their unweighted means.

    Zero-denominator cases (a class never predicted, or absent from gold)
    are defined as 0.
    """
    counts = np.asarray(counts)
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return MetricReport(
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=counts,
    )


def score_predictions(gold, pred, num_classes: int) -> MetricReport:
    return macro_f1(confusion(gold, pred, num_classes))


# ---------------------------------------------------------------------------
# meta predictor

@dataclass
class EnsembleResult:
    labels: np.ndarray       # [n] argmax of the averaged probabilities
    probs: np.ndarray        # [n, C] averaged probabilities
    model_ids: list


def ensemble(matrices) -> EnsembleResult:
    """Average class probabilities across models, then take the row argmax.

    Averaging is uniform (no learned weights); argmax ties resolve to the
    smallest class index.
    """
    matrices = list(matrices)
    if not matrices:
        raise InputError("ensemble needs at least one probability matrix")
    base = matrices[0].probs.shape
    for m in matrices:
        if m.probs.shape != base:
            raise InputError(f"probability matrix shape mismatch for model {m.model_id!r}: "
                             f"{m.probs.shape} vs {base}")
    mean = np.mean(np.stack([m.probs.astype(np.float64) for m in matrices]), axis=0)
    return EnsembleResult(labels=mean.argmax(axis=1), probs=mean,
                          model_ids=[m.model_id for m in matrices])


def save_probabilities(path, model_id: str, probs: np.ndarray) -> None:
    """Write one JSONL row {model_id, index, probs} per example."""
    with open(path, "w", encoding="utf-8") as fh:
        for index, row in enumerate(np.asarray(probs)):
            fh.write(json.dumps({"model_id": model_id, "index": index,
                                 "probs": [float(x) for x in row]}) + "\n")


def load_probabilities(path) -> ProbabilityMatrix:
    """Read a probability file; validates simplex rows and dense indices."""
    rows = {}
    model_id = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                index, probs = int(obj["index"]), [float(x) for x in obj["probs"]]
                model_id = str(obj["model_id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"malformed probability row at {path}:{lineno}") from exc
            rows[index] = probs
    if not rows:
        raise InputError(f"probability file {path} is empty")
    if sorted(rows) != list(range(len(rows))):
        raise InputError(f"probability file {path} has missing or duplicate indices")
    probs = np.array([rows[i] for i in range(len(rows))], dtype=np.float64)
    return ProbabilityMatrix(model_id=model_id, probs=probs).validate()


# ---------------------------------------------------------------------------
# k-fold evaluation

@dataclass
class KFoldResult:
    fold_reports: list       # MetricReport per completed fold (None where failed)
    fold_errors: list        # str or None per fold
    macro_f1_mean: float
    macro_f1_std: float
    completed: int

    def to_dict(self) -> dict:
        return {
            "macro_f1_mean": self.macro_f1_mean,
            "macro_f1_std": self.macro_f1_std,
            "completed_folds": self.completed,
            "folds": [r.to_dict() if r is not None else {"error": e}
                      for r, e in zip(self.fold_reports, self.fold_errors)],
        }


def _run_fold(args):
    data, plan, cfg, model_cfg, fold, val_fraction = args
    from . import trainer  # local import: trainer depends on this module's metrics

    test_idx, train_idx = plan.fold_indices(fold)
    train_labels = data.labels[train_idx]
    keep, val_rel = split(train_labels, (1.0 - val_fraction, val_fraction),
                          seed=derive_seed(cfg.seed, "fold-val"))
    fit_result = trainer.fit(data.subset(train_idx[keep]), data.subset(train_idx[val_rel]),
                             cfg, model_cfg)
    params = trainer.model_from_snapshot(model_cfg, fit_result.checkpoint)
    probs = trainer.predict_dataset(model_cfg, params, data.subset(test_idx), cfg.eval_batch_size)
    return score_predictions(data.labels[test_idx], probs.argmax(axis=1), model_cfg.num_classes)


def kfold_evaluate(data: Batch, plan: FoldPlan, cfg, model_cfg,
                   master_seed: int, jobs: int = 1, val_fraction: float = 0.1) -> KFoldResult:
    """Train on k-1 folds and score the held-out fold, for every fold.

    A stratified ``val_fraction`` of each fold's training portion is carved
    out for early stopping. Fold seeds derive from the master seed. Failed
    folds are recorded and excluded from the aggregate, with a warning.
    """
    from dataclasses import replace
    from concurrent.futures import ProcessPoolExecutor

    work = []
    for fold in range(plan.k):
        fold_cfg = replace(cfg, seed=derive_seed(master_seed, f"fold{fold:02d}"))
        work.append((data, plan, fold_cfg, model_cfg, fold, val_fraction))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold_safe, work))
    else:
        outcomes = [_run_fold_safe(args) for args in work]
    reports = [r for r, _ in outcomes]
    errors = [e for _, e in outcomes]
    scores = [r.macro_f1 for r in reports if r is not None]
    failed = sum(1 for e in errors if e)
    if failed:
        warnings.warn(f"{failed} of {plan.k} folds failed; aggregating over {len(scores)} folds")
    mean = float(np.mean(scores)) if scores else float("nan")
    std = float(np.std(scores)) if scores else float("nan")
    return KFoldResult(fold_reports=reports, fold_errors=errors,
                       macro_f1_mean=mean, macro_f1_std=std, completed=len(scores))


def _run_fold_safe(args):
    from . import trainer

    try:
        return _run_fold(args), None
    except trainer.TrialDivergedError as exc:
        return None, str(exc)
