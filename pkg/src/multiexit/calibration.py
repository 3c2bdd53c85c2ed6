"""Per-exit temperature scaling and expected calibration error."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationSkipped, InvalidInputError
from .numerics import log_softmax, sigmoid, softmax_rows

T_MIN, T_MAX = 0.05, 10.0
T_TOL = 1e-3
DEFAULT_BINS = 10
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def _softmax_nll(logits, labels, t):
    logp = log_softmax(logits / t)
    return float(-logp[np.arange(labels.size), labels].mean())


def _sigmoid_nll(logits, targets, t):
    z = logits / t
    # log(1 + exp(-|z|)) form keeps both tails finite
    return float(np.mean(np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))))


def _golden_section(f, lo=T_MIN, hi=T_MAX, tol=T_TOL) -> float:
    """Minimize ``f`` over [lo, hi], searching in log-temperature."""
    a, b = math.log(lo), math.log(hi)
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(math.exp(c)), f(math.exp(d))
    while math.exp(b) - math.exp(a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(math.exp(d))
    t = math.exp((a + b) / 2.0)
    if f(1.0) <= f(t):
        return 1.0
    return t


def fit_temperature(logits, labels) -> float:
    """Temperature in [0.05, 10] minimizing mean cross-entropy of ``softmax(z / T)``.

    With fewer than two distinct labels the fit is skipped: a
    :class:`CalibrationSkipped` warning is emitted and 1.0 returned.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.size:
        raise InvalidInputError("logits must be (N, K) and aligned with labels")
    if np.unique(y).size < 2:
        warnings.warn("fewer than two distinct labels; temperature fixed at 1", CalibrationSkipped, stacklevel=2)
        return 1.0
    return _golden_section(lambda t: _softmax_nll(z, y, t))


def fit_binary_temperature(logits, targets) -> float:
    """Same search for a single sigmoid logit against 0/1 targets."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if np.unique(y).size < 2:
        warnings.warn("gate targets are all equal; temperature fixed at 1", CalibrationSkipped, stacklevel=2)
        return 1.0
    return _golden_section(lambda t: _sigmoid_nll(z, y, t))


def apply_temperature(logits, t: float) -> np.ndarray:
    if not t > 0:
        raise InvalidInputError(f"temperature must be positive, got {t}")
    return softmax_rows(np.asarray(logits, dtype=np.float64) / t)


def _check_conf(confidences, correct):
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    ok = np.asarray(correct, dtype=np.float64).reshape(-1)
    if c.size == 0 or c.size != ok.size:
        raise InvalidInputError("confidences and correctness must be aligned and non-empty")
    if np.any((c < 0) | (c > 1)) or not np.all(np.isfinite(c)):
        raise InvalidInputError("confidences must lie in [0, 1]")
    return c, ok


def bin_index(confidences, bins: int) -> np.ndarray:
    """Equal-width bins; interior edges go up, 1.0 lands in the last bin."""
    return np.minimum((np.asarray(confidences) * bins).astype(np.int64), bins - 1)


@dataclass
class ReliabilityBins:
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.counts.size + 1)


def reliability_bins(confidences, correct, bins: int = DEFAULT_BINS) -> ReliabilityBins:
    if bins < 1:
        raise InvalidInputError("bins must be >= 1")
    c, ok = _check_conf(confidences, correct)
    idx = bin_index(c, bins)
    counts = np.bincount(idx, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.bincount(idx, weights=c, minlength=bins) / counts
        acc = np.bincount(idx, weights=ok, minlength=bins) / counts
    conf[counts == 0] = 0.0
    acc[counts == 0] = 0.0
    return ReliabilityBins(counts, conf, acc)


def ece(confidences, correct, bins: int = DEFAULT_BINS) -> float:
    # |B_j|/N * |ACC_j - MSP_j| == |sum(correct_j) - sum(conf_j)| / N; fsum keeps
    # hand-checkable cases exact
    if bins < 1:
        raise InvalidInputError("bins must be >= 1")
    c, ok = _check_conf(confidences, correct)
    idx = bin_index(c, bins)
    gaps = [abs(math.fsum(np.concatenate([ok[idx == j], -c[idx == j]]))) for j in np.unique(idx)]
    return math.fsum(gaps) / c.size


@dataclass
class ExitCalibration:
    anchor: str
    T: float
    acc: float
    ece: float
    T_gate: float | None = None

    def to_dict(self):
        d = {"anchor": self.anchor, "T": self.T, "acc": self.acc, "ece": self.ece}
        if self.T_gate is not None:
            d["T_gate"] = self.T_gate
        return d


@dataclass
class CalibrationTable:
    exits: list[ExitCalibration]
    bins: int = DEFAULT_BINS
    final: ExitCalibration | None = None

    def __len__(self):
        return len(self.exits)

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([e.T for e in self.exits])

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([e.acc for e in self.exits])

    @property
    def eces(self) -> np.ndarray:
        return np.array([e.ece for e in self.exits])

    def to_json(self) -> str:
        d = {"exits": [e.to_dict() for e in self.exits], "bins": self.bins}
        if self.final is not None:
            d["final"] = self.final.to_dict()
        return json.dumps(d, indent=2)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "CalibrationTable":
        d = json.loads(text)
        try:
            exits = [ExitCalibration(**e) for e in d["exits"]]
            final = ExitCalibration(**d["final"]) if d.get("final") else None
            return cls(exits, int(d.get("bins", DEFAULT_BINS)), final)
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed calibration table: {exc}") from None

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _calibrate_head(anchor, logits, labels, bins, gate_logits=None, fit=True) -> ExitCalibration:
    t = fit_temperature(logits, labels) if fit else 1.0
    probs = apply_temperature(logits, t)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    acc = float(correct.mean())
    if gate_logits is None:
        return ExitCalibration(anchor, t, acc, ece(probs.max(axis=1), correct, bins))
    tg = fit_binary_temperature(gate_logits, correct) if fit else 1.0
    gate_p = sigmoid(np.asarray(gate_logits) / tg)
    return ExitCalibration(anchor, t, acc, ece(gate_p, correct, bins), tg)


def per_exit_calibrate(trace, bins: int = DEFAULT_BINS, fit: bool = True) -> CalibrationTable:
    """Fit one temperature per exit (and the final classifier) on a validation trace.

    Gate exits get two temperatures: one for the paired head's logits and one
    for the gate logit, fitted against whether the paired head is correct.
    ``fit=False`` reports accuracy and ECE of the raw outputs with T=1.
    """
    y = trace.labels
    exits = []
    for b, anchor in enumerate(trace.anchors):
        g = None if trace.gate_logits is None else trace.gate_logits[:, b]
        exits.append(_calibrate_head(anchor, trace.exit_logits[:, b], y, bins, g, fit))
    final = _calibrate_head("Final", trace.final_logits, y, bins, None, fit)
    return CalibrationTable(exits, bins, final)


def exit_confidences(trace, table: CalibrationTable | None = None):
    """Per-exit exit criterion and predicted class, ``(N, B)`` each.

    Ramps use the MSP of the (temperature-scaled) head; gates use the
    (temperature-scaled) gate probability with the paired head's class.
    """
    n, b, _ = trace.exit_logits.shape
    if table is not None and len(table) != b:
        raise InvalidInputError(f"calibration table has {len(table)} exits, trace has {b}")
    conf = np.zeros((n, b))
    preds = np.argmax(trace.exit_logits, axis=2) if b else np.zeros((n, 0), dtype=np.int64)
    for j in range(b):
        t = 1.0 if table is None else table.exits[j].T
        if trace.gate_logits is None:
            conf[:, j] = apply_temperature(trace.exit_logits[:, j], t).max(axis=1)
        else:
            tg = 1.0 if table is None or table.exits[j].T_gate is None else table.exits[j].T_gate
            conf[:, j] = sigmoid(trace.gate_logits[:, j] / tg)
    return conf, preds
