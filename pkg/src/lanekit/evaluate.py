"""Benchmark-style scoring of lane predictions against annotations.

A predicted vertex is correct when its x lies within px_threshold of the
ground truth at the same sampled y.  Predicted lanes are matched one-to-one
to ground-truth lanes greedily by descending per-lane vertex accuracy; a
matched lane whose accuracy falls below lane_match_threshold still counts
as a false positive.  Dataset-level ratios are recomputed from pooled
counts, never averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import LaneAnnotation
from .errors import EvalError


@dataclass(frozen=True)
class EvalConfig:
    px_threshold: float = 20.0
    lane_match_threshold: float = 0.85

    def __post_init__(self):
        if self.px_threshold <= 0 or self.lane_match_threshold <= 0:
            raise ValueError("eval thresholds must be positive")


@dataclass(frozen=True)
class EvalCounts:
    correct_vertices: int
    gt_vertices: int
    false_lanes: int
    pred_lanes: int
    missed_lanes: int
    gt_lanes: int

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(*(a + b for a, b in zip(self._tuple(), other._tuple())))

    def _tuple(self):
        return (self.correct_vertices, self.gt_vertices, self.false_lanes,
                self.pred_lanes, self.missed_lanes, self.gt_lanes)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    fp_rate: float
    fn_rate: float
    f1: float
    counts: EvalCounts

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "fp": self.fp_rate,
            "fn": self.fn_rate,
            "f1": self.f1,
            "counts": self.counts.__dict__,
        }


def f1_from_rates(accuracy: float, fp_rate: float, fn_rate: float) -> float:
    """F1 built directly from the benchmark ratios, treating accuracy as TP:
    precision = acc/(acc+fp), recall = acc/(acc+fn)."""
    for name, v in (("accuracy", accuracy), ("fp_rate", fp_rate), ("fn_rate", fn_rate)):
        if not 0.0 <= v <= 1.0:
            raise EvalError(f"{name} must be in [0, 1], got {v}")
    if accuracy + fp_rate == 0 or accuracy + fn_rate == 0:
        raise EvalError("F1 undefined: zero precision/recall denominator")
    precision = accuracy / (accuracy + fp_rate)
    recall = accuracy / (accuracy + fn_rate)
    if precision + recall == 0:
        raise EvalError("F1 undefined: precision + recall is zero")
    return 2.0 * precision * recall / (precision + recall)


def _lane_scores(pred_xs, gt_xs, px_threshold):
    """(correct vertex count, gt vertex count) for one pred/gt lane pair."""
    gt_present = gt_xs >= 0
    n_gt = int(gt_present.sum())
    if n_gt == 0:
        return 0, 0
    ok = gt_present & (pred_xs >= 0) & (np.abs(pred_xs - gt_xs) <= px_threshold)
    return int(ok.sum()), n_gt


def evaluate_frame(pred: LaneAnnotation, gt: LaneAnnotation,
                   cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Score one frame's predicted lanes against its annotation."""
    if list(pred.h_samples) != list(gt.h_samples):
        raise EvalError(
            f"h_samples differ between prediction and ground truth "
            f"({len(pred.h_samples)} vs {len(gt.h_samples)} entries)"
        )
    pred_lanes = [np.asarray(l, dtype=np.float64) for l in pred.lanes]
    gt_lanes = [np.asarray(l, dtype=np.float64) for l in gt.lanes]
    # ground-truth lanes with no present vertex carry no signal; drop them
    gt_lanes = [g for g in gt_lanes if (g >= 0).any()]

    pairs = []
    for pi, p in enumerate(pred_lanes):
        for gi, g in enumerate(gt_lanes):
            n_ok, n_gt = _lane_scores(p, g, cfg.px_threshold)
            acc = n_ok / n_gt if n_gt else 0.0
            pairs.append((-acc, pi, gi, n_ok))
    pairs.sort()

    matched_p: set[int] = set()
    matched_g: set[int] = set()
    correct = 0
    false_lanes = 0
    for neg_acc, pi, gi, n_ok in pairs:
        if pi in matched_p or gi in matched_g:
            continue
        matched_p.add(pi)
        matched_g.add(gi)
        correct += n_ok
        if -neg_acc < cfg.lane_match_threshold:
            false_lanes += 1
    false_lanes += len(pred_lanes) - len(matched_p)
    missed = len(gt_lanes) - len(matched_g)
    gt_vertices = int(sum((g >= 0).sum() for g in gt_lanes))
    counts = EvalCounts(correct, gt_vertices, false_lanes, len(pred_lanes),
                        missed, len(gt_lanes))
    return _result_from_counts(counts)


def _result_from_counts(c: EvalCounts) -> EvalResult:
    accuracy = c.correct_vertices / c.gt_vertices if c.gt_vertices else 0.0
    fp = c.false_lanes / c.pred_lanes if c.pred_lanes else 0.0
    fn = c.missed_lanes / c.gt_lanes if c.gt_lanes else 0.0
    try:
        f1 = f1_from_rates(accuracy, fp, fn)
    except EvalError:
        f1 = 0.0
    return EvalResult(accuracy, fp, fn, f1, c)


def aggregate(results: list[EvalResult]) -> EvalResult:
    """Pool frame counts and recompute the ratios from the sums."""
    if not results:
        raise EvalError("cannot aggregate an empty result list")
    total = results[0].counts
    for r in results[1:]:
        total = total + r.counts
    return _result_from_counts(total)
