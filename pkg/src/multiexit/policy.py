"""Exit criterion and threshold policies.

A sample leaves at the first exit (in graph order) whose confidence reaches
that exit's threshold, otherwise at the final classifier.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError, ThresholdWarning
from .pareto import pareto_mask

ECE_FLOOR = 1e-4
DEFAULT_EPSILON = 0.05
DEFAULT_STEP = 0.05
DEFAULT_BUDGET = 1_000_000
SWEEP_ENDPOINTS = (0.001, 0.999)
PERCENTILES = tuple(range(10, 100, 10))
_CANDIDATE_CLAMP = 1e-6

Evaluator = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def msp(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise InvalidInputError("empty probability vector")
    return float(p.max())


def _check_open_unit(values, what="threshold"):
    v = np.asarray(values, dtype=np.float64)
    if v.size and (np.any(~np.isfinite(v)) or np.any(v <= 0) or np.any(v >= 1)):
        raise InvalidInputError(f"every {what} must lie strictly inside (0, 1), got {v.tolist()}")
    return v


@dataclass(frozen=True)
class ExitPolicy:
    """``global`` holds one threshold; ``multi`` and ``heuristic`` hold one per exit."""

    kind: str
    thresholds: tuple[float, ...]
    epsilon: float | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("global", "multi", "heuristic"):
            raise InvalidInputError(f"unknown policy kind {self.kind!r}")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        _check_open_unit(self.thresholds)
        if self.kind == "global" and len(self.thresholds) != 1:
            raise InvalidInputError("a global policy has exactly one threshold")

    @classmethod
    def global_threshold(cls, tau: float) -> "ExitPolicy":
        return cls("global", (tau,))

    @classmethod
    def multi(cls, taus) -> "ExitPolicy":
        return cls("multi", tuple(taus))

    @classmethod
    def heuristic(cls, accuracies, eces, epsilon: float = DEFAULT_EPSILON) -> "ExitPolicy":
        flags = []
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            taus = heuristic_thresholds(accuracies, eces, epsilon)
        for w in caught:
            flags.append(str(w.message))
            warnings.warn(w.message, w.category, stacklevel=2)
        return cls("heuristic", tuple(taus), epsilon, tuple(flags))

    def resolve(self, num_exits: int) -> np.ndarray:
        if self.kind == "global":
            return np.full(num_exits, self.thresholds[0])
        if len(self.thresholds) != num_exits:
            raise InvalidInputError(f"policy has {len(self.thresholds)} thresholds for {num_exits} exits")
        return np.array(self.thresholds)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "global":
            d["tau"] = self.thresholds[0]
        else:
            d["thresholds"] = list(self.thresholds)
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        if self.flags:
            d["warnings"] = list(self.flags)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "ExitPolicy":
        kind = d.get("kind")
        if kind == "global":
            return cls("global", (d["tau"],))
        return cls(kind, tuple(d["thresholds"]), d.get("epsilon"), tuple(d.get("warnings", ())))

    @classmethod
    def load(cls, path) -> "ExitPolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class ExitDecision:
    """``exit_index`` is None when the sample reaches the final classifier."""

    exit_index: int | None
    prediction: int
    confidence: float | None
    cost_fraction: float | None = None

    @property
    def is_final(self) -> bool:
        return self.exit_index is None


def first_exit(confidences: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Index of the first exit with ``conf >= tau``; ``B`` means the final classifier.

    ``confidences`` is ``(N, B)``; ``taus`` is ``(B,)`` (or broadcastable) for
    an ``(N,)`` result, or ``(M, B)`` for an ``(M, N)`` result.
    """
    conf = np.asarray(confidences)
    t = np.asarray(taus, dtype=np.float64)
    b = conf.shape[1]
    if t.ndim <= 1:
        hits = conf >= t
        return np.where(hits.any(axis=1), hits.argmax(axis=1), b)
    hits = conf[None, :, :] >= t[:, None, :]
    return np.where(hits.any(axis=2), hits.argmax(axis=2), b)


def decide(policy, confidences, predictions, final_prediction, costs=None) -> ExitDecision:
    conf = np.asarray(confidences, dtype=np.float64)
    preds = np.asarray(predictions)
    if conf.shape != preds.shape or conf.ndim != 1:
        raise InvalidInputError("confidences and predictions must be aligned vectors")
    b = conf.size
    taus = policy.resolve(b) if isinstance(policy, ExitPolicy) else np.asarray(policy, dtype=np.float64)
    if taus.shape != (b,):
        raise InvalidInputError(f"{taus.size} thresholds for {b} exits")
    for j in range(b):
        if conf[j] >= taus[j]:
            cost = None if costs is None else float(costs[j])
            return ExitDecision(j, int(preds[j]), float(conf[j]), cost)
    cost = None if costs is None else float(costs[b])
    return ExitDecision(None, int(final_prediction), None, cost)


# heuristic


def raw_heuristic_thresholds(accuracies, eces) -> np.ndarray:
    """``1 - ACC_b / ECE_b`` with zero ECE floored at 1e-4 (warned)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    e = np.asarray(eces, dtype=np.float64)
    if acc.shape != e.shape or acc.ndim != 1:
        raise InvalidInputError("accuracies and ECEs must be aligned vectors")
    low = e < ECE_FLOOR
    if np.any(low):
        warnings.warn(
            f"ECE below {ECE_FLOOR} at exits {np.flatnonzero(low).tolist()}; floored",
            ThresholdWarning,
            stacklevel=2,
        )
        e = np.where(low, ECE_FLOOR, e)
    return 1.0 - acc / e


def minmax_normalize(values, epsilon: float) -> np.ndarray:
    """Min-max scaling with the range widened by ``epsilon`` on both sides."""
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min() - epsilon, v.max() + epsilon
    return (v - lo) / (hi - lo)


def heuristic_thresholds(accuracies, eces, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-exit thresholds from the accuracy/ECE trade-off, mapped into (0, 1)."""
    raw = raw_heuristic_thresholds(accuracies, eces)
    if raw.size == 1:
        warnings.warn("a single exit cannot be min-max normalized; using 0.5", ThresholdWarning, stacklevel=2)
        return np.array([0.5])
    return minmax_normalize(raw, epsilon)


# search


def nearest_rank(sorted_values: np.ndarray, pct: float):
    n = sorted_values.size
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def percentile_candidates(msps, percentiles: Sequence[int] = PERCENTILES) -> list[np.ndarray]:
    """Deduplicated nearest-rank percentiles of each exit's validation MSPs."""
    m = np.asarray(msps, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError("expected MSPs shaped (N, B)")
    if m.shape[0] < len(percentiles) + 1:
        warnings.warn(
            f"only {m.shape[0]} samples per exit; percentile grid is coarser than requested",
            ThresholdWarning,
            stacklevel=2,
        )
    out = []
    for j in range(m.shape[1]):
        col = np.sort(m[:, j])
        vals = [nearest_rank(col, p) for p in percentiles]
        out.append(np.unique(np.clip(vals, _CANDIDATE_CLAMP, 1.0 - _CANDIDATE_CLAMP)))
    return out


@dataclass
class ThresholdPoints:
    """Evaluated threshold vectors; ``taus`` is ``(M, B)`` or ``(M, 1)`` for global."""

    taus: np.ndarray
    accuracy: np.ndarray
    latency_reduction: np.ndarray
    pareto: np.ndarray

    def __len__(self):
        return int(self.accuracy.size)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau_vector", "accuracy", "latency_reduction", "pareto"])
            for i in range(len(self)):
                w.writerow([format_vector(self.taus[i]), repr(float(self.accuracy[i])),
                            repr(float(self.latency_reduction[i])), int(self.pareto[i])])


def format_vector(values) -> str:
    return ";".join(f"{float(v):.10g}" for v in np.atleast_1d(values))


def _points(taus, evaluator: Evaluator, chunk=4096) -> ThresholdPoints:
    accs, lats = [], []
    for start in range(0, taus.shape[0], chunk):
        a, l = evaluator(taus[start : start + chunk])
        accs.append(np.asarray(a, dtype=np.float64))
        lats.append(np.asarray(l, dtype=np.float64))
    acc = np.concatenate(accs) if accs else np.zeros(0)
    lat = np.concatenate(lats) if lats else np.zeros(0)
    return ThresholdPoints(taus, acc, lat, pareto_mask(acc, lat))


def _sample_digits(sizes, budget: int, rng) -> np.ndarray:
    """``budget`` distinct rows of per-exit candidate indices, uniform over the grid."""
    sizes = np.asarray(sizes, dtype=np.int64)
    total = math.prod(int(s) for s in sizes)
    if total < 2**62:
        flat = rng.choice(total, size=budget, replace=False).astype(np.int64)
        digits = np.empty((budget, sizes.size), dtype=np.int64)
        for j in range(sizes.size - 1, -1, -1):
            flat, digits[:, j] = np.divmod(flat, sizes[j])
        return digits
    rows, seen = [], set()
    while len(rows) < budget:
        for r in rng.integers(0, sizes, size=(budget - len(rows), sizes.size)):
            key = r.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(r)
    return np.array(rows, dtype=np.int64)


def random_multi_search(candidates: Sequence[np.ndarray], budget: int, evaluator: Evaluator, seed: int = 0) -> ThresholdPoints:
    """Evaluate up to ``budget`` distinct threshold combinations from the grid.

    Enumerates the whole grid when it fits in the budget, otherwise samples
    combinations uniformly without replacement.
    """
    if budget < 1:
        raise InvalidInputError("budget must be >= 1")
    grids = [np.asarray(c, dtype=np.float64) for c in candidates]
    if not grids or any(g.size == 0 for g in grids):
        raise InvalidInputError("every exit needs at least one candidate threshold")
    sizes = [g.size for g in grids]
    total = math.prod(sizes)
    if total <= budget:
        taus = np.array(list(itertools.product(*grids)), dtype=np.float64).reshape(total, len(grids))
        return _points(taus, evaluator)
    digits = _sample_digits(sizes, budget, np.random.default_rng(seed))
    taus = np.column_stack([grids[j][digits[:, j]] for j in range(len(grids))])
    return _points(taus, evaluator)


def sweep_values(step: float = DEFAULT_STEP) -> np.ndarray:
    if not 0 < step < 1:
        raise InvalidInputError(f"step must lie in (0, 1), got {step}")
    k = np.arange(1, int(math.floor(1.0 / step + 1e-9)) + 1)
    interior = np.round(k * step, 12)
    interior = interior[(interior > 0) & (interior < 1)]
    vals = np.unique(np.concatenate([interior, SWEEP_ENDPOINTS]))
    return vals


def global_sweep(step: float, evaluator: Evaluator) -> ThresholdPoints:
    """Evaluate one shared threshold at every multiple of ``step`` plus 0.001 and 0.999."""
    return _points(sweep_values(step)[:, None], evaluator)
