"""Anytime evaluation of (network, policy) pairs and policy comparison reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import CalibrationTable, exit_confidences, per_exit_calibrate
from .data import LogitTrace
from .errors import InvalidInputError
from .model import CostModel, MultiExitNetwork, collect_trace
from .pareto import pareto_indices, pareto_mask
from .policy import (
    DEFAULT_BUDGET,
    DEFAULT_EPSILON,
    DEFAULT_STEP,
    ExitDecision,
    ExitPolicy,
    ThresholdPoints,
    first_exit,
    format_vector,
    global_sweep,
    percentile_candidates,
    random_multi_search,
)

__all__ = [
    "CostModel",
    "ExitScores",
    "EvalResult",
    "ExitPatternMatrix",
    "ParetoPoint",
    "evaluate",
    "pareto_front",
    "exit_pattern_matrix",
    "compare_policies",
    "evaluate_scores",
    "accuracy_at_latency",
    "front_dominance",
    "ComparisonReport",
    "EvalRow",
    "write_eval_csv",
]

EVAL_HEADER = ["policy", "kind", "tau", "accuracy", "latency_reduction", "exit_histogram"]


@dataclass
class ExitScores:
    """What a policy needs per sample: exit criteria, exit classes, final class, costs."""

    confidences: np.ndarray  # (N, B)
    predictions: np.ndarray  # (N, B)
    final_predictions: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    costs: np.ndarray  # (N, B + 1)
    anchors: list[str] = field(default_factory=list)

    @classmethod
    def from_trace(cls, trace: LogitTrace, calibration: CalibrationTable | None = None) -> "ExitScores":
        if len(trace) == 0:
            raise InvalidInputError("cannot evaluate an empty split")
        if trace.costs is None:
            raise InvalidInputError("trace carries no cost fractions")
        conf, preds = exit_confidences(trace, calibration)
        return cls(conf, preds, np.argmax(trace.final_logits, axis=1), trace.labels, trace.costs, list(trace.anchors))

    @property
    def num_exits(self) -> int:
        return self.confidences.shape[1]

    def outcome(self, exit_idx: np.ndarray):
        """Predictions and cost fractions for chosen exits (``B`` = final)."""
        n = self.labels.size
        rows = np.arange(n)
        all_preds = np.concatenate([self.predictions, self.final_predictions[:, None]], axis=1)
        if exit_idx.ndim == 1:
            return all_preds[rows, exit_idx], self.costs[rows, exit_idx]
        return all_preds[rows[None, :], exit_idx], self.costs[rows[None, :], exit_idx]

    def metrics(self, taus: np.ndarray):
        """Vectorized ``(accuracy, latency_reduction)`` for each row of ``taus``."""
        taus = np.atleast_2d(np.asarray(taus, dtype=np.float64))
        idx = first_exit(self.confidences, taus)
        preds, costs = self.outcome(idx)
        acc = (preds == self.labels[None, :]).mean(axis=1)
        lat = 1.0 - costs.mean(axis=1)
        return acc, lat


@dataclass
class ExitPatternMatrix:
    """``counts[k, b]``: class-k samples correctly predicted when leaving at exit b."""

    counts: np.ndarray
    columns: list[str]

    def log_normalized(self) -> np.ndarray:
        logged = np.log1p(self.counts.astype(np.float64))
        sums = logged.sum(axis=1, keepdims=True)
        return np.divide(logged, sums, out=np.zeros_like(logged), where=sums > 0)

    def write_csv(self, path, normalized: bool = False, class_names: Sequence[str] | None = None):
        data = self.log_normalized() if normalized else self.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class"] + list(self.columns))
            for k, row in enumerate(data):
                name = class_names[k] if class_names else str(k)
                w.writerow([name] + [repr(float(v)) if normalized else int(v) for v in row])


def exit_pattern_matrix(decisions, labels, classes: int, columns: Sequence[str] | None = None) -> ExitPatternMatrix:
    """Count correct exits per (class, exit) cell.

    ``decisions`` is a sequence of :class:`ExitDecision` or a pair of arrays
    ``(exit_indices, predictions)`` where index ``B`` stands for the final
    classifier. ``columns`` names the B exits followed by the final classifier.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if isinstance(decisions, tuple) and len(decisions) == 2 and not isinstance(decisions[0], ExitDecision):
        idx, preds = (np.asarray(d) for d in decisions)
        if columns is None:
            raise InvalidInputError("columns are required with array input")
        b = len(columns) - 1
    else:
        if columns is None:
            raise InvalidInputError("columns are required")
        b = len(columns) - 1
        idx = np.array([b if d.exit_index is None else d.exit_index for d in decisions], dtype=np.int64)
        preds = np.array([d.prediction for d in decisions], dtype=np.int64)
    if idx.shape != labels.shape:
        raise InvalidInputError("decisions and labels are not aligned")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidInputError("label outside [0, classes)")
    counts = np.zeros((classes, b + 1), dtype=np.int64)
    ok = preds == labels
    np.add.at(counts, (labels[ok], idx[ok]), 1)
    return ExitPatternMatrix(counts, list(columns))


@dataclass
class EvalResult:
    accuracy: float
    latency_reduction: float
    exit_histogram: np.ndarray
    exit_indices: np.ndarray
    predictions: np.ndarray
    patterns: ExitPatternMatrix
    thresholds: np.ndarray

    def decisions(self, scores: ExitScores) -> list[ExitDecision]:
        b = scores.num_exits
        out = []
        for i, j in enumerate(self.exit_indices):
            conf = None if j == b else float(scores.confidences[i, j])
            out.append(ExitDecision(None if j == b else int(j), int(self.predictions[i]), conf, float(scores.costs[i, j])))
        return out


def evaluate_scores(scores: ExitScores, policy: ExitPolicy | np.ndarray) -> EvalResult:
    b = scores.num_exits
    taus = policy.resolve(b) if isinstance(policy, ExitPolicy) else np.asarray(policy, dtype=np.float64)
    idx = first_exit(scores.confidences, taus)
    preds, costs = scores.outcome(idx)
    classes = int(max(scores.labels.max(), preds.max())) + 1
    patterns = exit_pattern_matrix((idx, preds), scores.labels, classes, scores.anchors + ["Final"])
    return EvalResult(
        accuracy=float(np.mean(preds == scores.labels)),
        latency_reduction=float(1.0 - costs.mean()),
        exit_histogram=np.bincount(idx, minlength=b + 1),
        exit_indices=idx,
        predictions=preds,
        patterns=patterns,
        thresholds=taus,
    )


def evaluate(source, policy, split=None, cost_model: CostModel | None = None, calibration: CalibrationTable | None = None) -> EvalResult:
    """Run a policy over a split.

    ``source`` is a network (then ``split`` is required) or a LogitTrace.
    """
    if isinstance(source, MultiExitNetwork):
        if split is None or len(split) == 0:
            raise InvalidInputError("cannot evaluate an empty split")
        source = collect_trace(source, split, cost_model)
    return evaluate_scores(ExitScores.from_trace(source, calibration), policy)


@dataclass(frozen=True)
class ParetoPoint:
    accuracy: float
    latency_reduction: float
    policy: str = ""


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    acc = [p.accuracy for p in points]
    lat = [p.latency_reduction for p in points]
    return [points[i] for i in pareto_indices(acc, lat)]


def accuracy_at_latency(acc, lat, grid) -> np.ndarray:
    """Best accuracy reachable with latency reduction at least ``x``, per grid point."""
    acc, lat = np.asarray(acc), np.asarray(lat)
    out = np.full(len(grid), -np.inf)
    for i, x in enumerate(grid):
        ok = lat >= x
        if ok.any():
            out[i] = acc[ok].max()
    return out


def front_dominance(acc_a, lat_a, acc_b, lat_b, points: int = 21) -> float:
    """Fraction of a shared latency grid where front A's accuracy is >= front B's.

    The grid spans the latency range both fronts cover.
    """
    lo = max(np.min(lat_a), np.min(lat_b))
    hi = min(np.max(lat_a), np.max(lat_b))
    if hi < lo:
        return 0.0
    grid = np.linspace(lo, hi, points)
    a = accuracy_at_latency(acc_a, lat_a, grid)
    b = accuracy_at_latency(acc_b, lat_b, grid)
    return float(np.mean(a >= b - 1e-12))


# reports


@dataclass
class EvalRow:
    policy: str
    kind: str
    tau: np.ndarray
    accuracy: float
    latency_reduction: float
    exit_histogram: np.ndarray

    def as_list(self):
        return [
            self.policy,
            self.kind,
            format_vector(self.tau),
            repr(float(self.accuracy)),
            repr(float(self.latency_reduction)),
            ";".join(str(int(c)) for c in self.exit_histogram),
        ]


def write_eval_csv(rows: Sequence[EvalRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def _rows(name: str, kind: str, scores: ExitScores, taus: np.ndarray) -> list[EvalRow]:
    rows = []
    for t in taus:
        res = evaluate_scores(scores, np.broadcast_to(t, (scores.num_exits,)))
        rows.append(EvalRow(name, kind, np.asarray(t), res.accuracy, res.latency_reduction, res.exit_histogram))
    return rows


@dataclass
class ComparisonReport:
    rows: dict[str, list[EvalRow]]
    merged: list[EvalRow]
    search: ThresholdPoints
    heuristic: ExitPolicy
    calibration: CalibrationTable

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, rows in self.rows.items():
            p = directory / f"{name}.csv"
            write_eval_csv(rows, p)
            paths.append(p)
        p = directory / "pareto.csv"
        write_eval_csv(self.merged, p)
        paths.append(p)
        self.search.write_csv(directory / "multi_exit_search_validation.csv")
        return paths


def compare_policies(
    val_trace: LogitTrace,
    test_trace: LogitTrace,
    calibration: CalibrationTable | None = None,
    step: float = DEFAULT_STEP,
    budget: int = DEFAULT_BUDGET,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    bins: int = 10,
) -> ComparisonReport:
    """Global (raw and calibrated), multi-exit search and heuristic policies on the test split.

    Temperatures, heuristic statistics and the threshold search all use the
    validation trace; every reported row is measured on the test trace.
    """
    table = calibration or per_exit_calibrate(val_trace, bins)
    raw_test = ExitScores.from_trace(test_trace)
    cal_test = ExitScores.from_trace(test_trace, table)
    cal_val = ExitScores.from_trace(val_trace, table)

    sweep = global_sweep(step, cal_test.metrics)
    rows = {
        "global_uncalibrated": _rows("global_uncalibrated", "global", raw_test, global_sweep(step, raw_test.metrics).taus),
        "global_calibrated": _rows("global_calibrated", "global", cal_test, sweep.taus),
    }
    search = random_multi_search(percentile_candidates(cal_val.confidences), budget, cal_val.metrics, seed)
    rows["multi_exit_calibrated"] = _rows("multi_exit_calibrated", "multi", cal_test, search.taus[search.pareto])
    heuristic = ExitPolicy.heuristic(table.accuracies, table.eces, epsilon)
    rows["heuristic_calibrated"] = _rows("heuristic_calibrated", "heuristic", cal_test, np.array([heuristic.thresholds]))

    everything = [r for rs in rows.values() for r in rs]
    keep = pareto_indices([r.accuracy for r in everything], [r.latency_reduction for r in everything])
    return ComparisonReport(rows, [everything[i] for i in keep], search, heuristic, table)
