"""Evaluation metrics for multi-label order prediction.

All metrics are micro-averaged: every (patient, procedure) cell is pooled
before precision, recall, or ranking statistics are computed. AUROC uses the
rank-statistic (Mann-Whitney) formulation with half credit for ties, and its
confidence interval comes from resampling whole patients with replacement so
within-patient correlation is respected. Everything is pure and
deterministic under explicit seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cohort import PatientRecord, Vocabularies
from .errors import EvaluationError, ShapeError, UsageError

REPORT_FORMAT_VERSION = 1

DEFAULT_PR_THRESHOLDS = tuple(round(0.02 * i, 2) for i in range(51))
DEFAULT_POLICY_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))
DEFAULT_POLICY_KS = (1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 25, 30, 40, 50, 60)
DEFAULT_FIXED_RECALLS = (0.2, 0.4, 0.6, 0.8)
EXAMPLE_REPORT_THRESHOLD = 0.20


@dataclass
class PredictionSet:
    """Scores and true label bits for one model over a test cohort."""

    label: str
    scores: np.ndarray  # (n_patients, n_procedures), values in [0, 1]
    truth: np.ndarray  # same shape, 0/1

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth)
        if self.scores.ndim != 2 or self.truth.shape != self.scores.shape:
            raise ShapeError(
                f"scores {self.scores.shape} and truth {self.truth.shape} must be"
                " equal 2-D shapes"
            )
        if self.scores.size == 0:
            raise UsageError("prediction set is empty")
        if not np.isfinite(self.scores).all():
            raise UsageError("scores must be finite")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise UsageError("scores must lie in [0, 1]")
        if not np.isin(self.truth, (0, 1)).all():
            raise UsageError("truth must contain only 0/1 entries")

    @property
    def n_patients(self) -> int:
        return self.scores.shape[0]


@dataclass
class PolicyRow:
    """Micro metrics of one recommendation policy setting."""

    policy: str  # "threshold" or "top_k"
    param: float
    precision: float | None
    recall: float
    f1: float | None


@dataclass
class MetricsReport:
    label: str
    pr_points: list[tuple[float, float, float]]  # (threshold, precision, recall)
    auroc: float
    auroc_ci: tuple[float, float]
    precision_at_recall: dict[float, float]
    policy_table: list[PolicyRow]

    def __post_init__(self) -> None:
        if not 0.0 <= self.auroc <= 1.0:
            raise EvaluationError(f"auroc {self.auroc} outside [0, 1]")
        lo, hi = self.auroc_ci
        if not lo <= self.auroc <= hi:
            raise EvaluationError(
                f"bootstrap interval [{lo}, {hi}] does not contain point estimate {self.auroc}"
            )


def _micro_counts(preds: PredictionSet, threshold: float) -> tuple[int, int, int]:
    predicted = preds.scores >= threshold
    actual = preds.truth == 1
    tp = int(np.count_nonzero(predicted & actual))
    fp = int(np.count_nonzero(predicted & ~actual))
    fn = int(np.count_nonzero(~predicted & actual))
    return tp, fp, fn


def precision_recall(
    preds: PredictionSet, threshold: float
) -> tuple[float | None, float]:
    """Micro precision and recall at a score threshold.

    Precision is None (an undefined marker, excluded from curves) when the
    threshold admits no predictions at all.
    """
    if not 0.0 <= threshold <= 1.0:
        raise UsageError(f"threshold must be in [0, 1], got {threshold}")
    if not (preds.truth == 1).any():
        raise UsageError("prediction set has no positive cells")
    tp, fp, fn = _micro_counts(preds, threshold)
    recall = tp / (tp + fn)
    if tp + fp == 0:
        return None, recall
    return tp / (tp + fp), recall


def _tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group's average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [values.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def auroc(preds: PredictionSet) -> float:
    """Micro AUROC over pooled cells via the rank-sum formulation.

    Equals the fraction of (positive, negative) cell pairs ranked concordantly
    with ties counted half, exactly as an explicit pair count would give.
    """
    scores = preds.scores.ravel()
    truth = preds.truth.ravel()
    n_pos = int(np.count_nonzero(truth == 1))
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UsageError("AUROC needs at least one positive and one negative cell")
    ranks = _tied_ranks(scores)
    rank_sum = float(ranks[truth == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def bootstrap_ci(
    preds: PredictionSet,
    metric: Callable[[PredictionSet], float] = auroc,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    max_attempt_factor: int = 10,
) -> tuple[float, float]:
    """Percentile bootstrap interval, resampling patients with replacement.

    Resamples whose pooled cells are single-class are redrawn; the total
    attempt budget is ``max_attempt_factor * n_resamples``. Each attempt uses
    its own deterministically derived seed, so a parallel implementation
    would reproduce the sequential result.
    """
    if preds.n_patients < 2:
        raise UsageError(f"bootstrap needs at least 2 patients, got {preds.n_patients}")
    if n_resamples < 1:
        raise UsageError(f"n_resamples must be >= 1, got {n_resamples}")
    if not 0.0 < level < 1.0:
        raise UsageError(f"level must be in (0, 1), got {level}")
    n = preds.n_patients
    stats: list[float] = []
    attempts = 0
    budget = max_attempt_factor * n_resamples
    while len(stats) < n_resamples:
        if attempts >= budget:
            raise EvaluationError(
                f"exceeded {budget} resampling attempts without {n_resamples}"
                " two-class resamples"
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), attempts]))
        attempts += 1
        idx = rng.integers(0, n, size=n)
        truth = preds.truth[idx]
        if (truth == 1).all() or (truth == 0).all():
            continue
        resample = PredictionSet(preds.label, preds.scores[idx], truth)
        stats.append(metric(resample))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(stats), [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _f1(precision: float | None, recall: float) -> float | None:
    if precision is None:
        return None
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of each row's k best scores; ties go to the lower index."""
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise UsageError(f"k must be in 1..{scores.shape[1]}, got {k}")
    order = np.argsort(-scores, axis=1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def policy_compare(
    preds: PredictionSet,
    thresholds: list[float] | None = None,
    ks: list[int] | None = None,
) -> list[PolicyRow]:
    """Micro metrics for fixed-threshold and fixed-count recommendation."""
    thresholds = list(DEFAULT_POLICY_THRESHOLDS) if thresholds is None else thresholds
    ks = list(DEFAULT_POLICY_KS) if ks is None else ks
    if not (preds.truth == 1).any():
        raise UsageError("prediction set has no positive cells")
    actual = preds.truth == 1
    n_pos = int(np.count_nonzero(actual))
    rows: list[PolicyRow] = []
    for threshold in thresholds:
        p, r = precision_recall(preds, threshold)
        rows.append(PolicyRow("threshold", float(threshold), p, r, _f1(p, r)))
    for k in ks:
        mask = top_k_mask(preds.scores, int(k))
        tp = int(np.count_nonzero(mask & actual))
        predicted = int(np.count_nonzero(mask))
        p = tp / predicted
        r = tp / n_pos
        rows.append(PolicyRow("top_k", float(k), p, r, _f1(p, r)))
    return rows


def _interpolated_precision(
    pr_points: list[tuple[float, float, float]], fixed_recalls: tuple[float, ...]
) -> dict[float, float]:
    by_recall: dict[float, float] = {}
    for _, precision, recall in pr_points:
        if recall not in by_recall or precision > by_recall[recall]:
            by_recall[recall] = precision
    recalls = np.array(sorted(by_recall))
    precisions = np.array([by_recall[r] for r in recalls])
    return {
        float(r): float(np.interp(r, recalls, precisions)) for r in fixed_recalls
    }


def compute_report(
    preds: PredictionSet,
    thresholds: list[float] | None = None,
    policy_thresholds: list[float] | None = None,
    ks: list[int] | None = None,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    fixed_recalls: tuple[float, ...] = DEFAULT_FIXED_RECALLS,
) -> MetricsReport:
    """Full metrics report: PR sweep, AUROC with CI, fixed-recall table, policies.

    PR points whose precision is undefined (no predictions) are excluded from
    the curve. Precision at the fixed recalls comes from linear interpolation
    of the sweep.
    """
    thresholds = list(DEFAULT_PR_THRESHOLDS) if thresholds is None else thresholds
    pr_points = []
    for threshold in thresholds:
        p, r = precision_recall(preds, threshold)
        if p is not None:
            pr_points.append((float(threshold), float(p), float(r)))
    point = auroc(preds)
    ci = bootstrap_ci(preds, n_resamples=n_resamples, level=level, seed=seed)
    return MetricsReport(
        label=preds.label,
        pr_points=pr_points,
        auroc=point,
        auroc_ci=ci,
        precision_at_recall=_interpolated_precision(pr_points, fixed_recalls),
        policy_table=policy_compare(preds, policy_thresholds, ks),
    )


def example_report(
    patient: PatientRecord,
    scores_by_model: dict[str, np.ndarray],
    vocab: Vocabularies,
    threshold: float = EXAMPLE_REPORT_THRESHOLD,
) -> dict:
    """Side-by-side view of true orders vs each model's recommendations.

    Renders procedure ids through the vocabulary; models' recommended sets are
    everything scoring at or above the threshold, listed in id order.
    """
    if not 0.0 <= threshold <= 1.0:
        raise UsageError(f"threshold must be in [0, 1], got {threshold}")
    proc_ids = vocab.procedure_ids
    true_idx = np.flatnonzero(patient.specialty_procedure_bits == 1)
    models = {}
    for label, scores in scores_by_model.items():
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (vocab.num_procedures,):
            raise ShapeError(
                f"{label} scores have shape {scores.shape},"
                f" expected ({vocab.num_procedures},)"
            )
        chosen = np.flatnonzero(scores >= threshold)
        models[label] = {
            "recommended": [proc_ids[i] for i in chosen],
            "scores": {proc_ids[i]: float(scores[i]) for i in chosen},
        }
    return {
        "patient_id": patient.patient_id,
        "threshold": float(threshold),
        "true_orders": [proc_ids[i] for i in true_idx],
        "models": models,
    }


def format_example_report(report: dict) -> str:
    lines = [
        f"patient {report['patient_id']} (threshold {report['threshold']:.2f})",
        f"  true orders: {', '.join(report['true_orders']) or '(none)'}",
    ]
    for label, entry in report["models"].items():
        lines.append(f"  {label}: {', '.join(entry['recommended']) or '(none)'}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# File outputs. Column names, ordering, and 6-decimal formatting are part of
# the contract so repeated runs are byte-identical.
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_pr_csv(reports: list[MetricsReport], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "threshold", "precision", "recall"])
        for report in reports:
            for threshold, precision, recall in report.pr_points:
                writer.writerow([report.label, _fmt(threshold), _fmt(precision), _fmt(recall)])


def write_auroc_csv(reports: list[MetricsReport], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "auroc", "ci_lo", "ci_hi"])
        for report in reports:
            lo, hi = report.auroc_ci
            writer.writerow([report.label, _fmt(report.auroc), _fmt(lo), _fmt(hi)])


def write_policy_csv(reports: list[MetricsReport], path: str) -> None:
    """Policy rows; empty precision/f1 cells mark the undefined case."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "policy", "param", "precision", "recall", "f1"])
        for report in reports:
            for row in report.policy_table:
                writer.writerow(
                    [
                        report.label,
                        row.policy,
                        _fmt(row.param),
                        "" if row.precision is None else _fmt(row.precision),
                        _fmt(row.recall),
                        "" if row.f1 is None else _fmt(row.f1),
                    ]
                )


def reports_to_json(reports: list[MetricsReport], example: dict | None = None) -> dict:
    payload: dict = {"format_version": REPORT_FORMAT_VERSION, "models": {}}
    for report in reports:
        payload["models"][report.label] = {
            "auroc": report.auroc,
            "auroc_ci": list(report.auroc_ci),
            "pr_points": [list(point) for point in report.pr_points],
            "precision_at_recall": {str(k): v for k, v in report.precision_at_recall.items()},
            "policy_table": [
                {
                    "policy": row.policy,
                    "param": row.param,
                    "precision": row.precision,
                    "recall": row.recall,
                    "f1": row.f1,
                }
                for row in report.policy_table
            ],
        }
    if example is not None:
        payload["example"] = example
    return payload


def write_reports_json(
    reports: list[MetricsReport], path: str, example: dict | None = None
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(reports_to_json(reports, example), fh, indent=2, sort_keys=True)
        fh.write("\n")
