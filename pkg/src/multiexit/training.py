"""Multi-exit fine-tuning strategies and the optimizer loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateNetworkError, InvalidInputError, NumericalError
from .model import HeadKind, MultiExitNetwork, NetOutputs
from .numerics import Tape, entropy_rows, softmax_rows

STRATEGIES = ("uniform", "weighted", "entropy", "weighted_entropy")


@dataclass(frozen=True)
class TrainStrategy:
    """How exit losses are weighted against the final classifier.

    ``uniform``           L_final + sum_b L_b
    ``weighted``          (1-g) L_final + g sum_b w_b L_b,  w_b = 1/param fraction
    ``entropy``           (1-g) L_final + g sum_b lam_b L_b, lam = 1 - softmax(mean entropy)
    ``weighted_entropy``  (1-g) L_final + g sum_b w_b lam_b L_b with g pinned to 0.5
    """

    kind: str = "weighted"
    gamma: float = 0.5

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise InvalidInputError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.gamma <= 1.0 or math.isnan(self.gamma):
            raise InvalidInputError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.kind == "weighted_entropy":
            object.__setattr__(self, "gamma", 0.5)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidInputError("learning_rate must be nonnegative")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    final_loss: float
    exit_losses: list[float]
    weights: list[float]
    val_exit_acc: list[float]
    val_final_acc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def exit_weights_subgraph(net: MultiExitNetwork) -> np.ndarray:
    if net.num_exits < 1:
        raise InvalidInputError("subgraph weighting needs at least one exit")
    fractions = np.array([net.subgraph_param_fraction(b) for b in range(net.num_exits)])
    return weights_from_fractions(fractions)


def weights_from_fractions(fractions) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    if np.any(f <= 0):
        raise DegenerateNetworkError("parameter fraction must be positive")
    return 1.0 / f


def exit_weights_entropy(batch_exit_probs) -> np.ndarray:
    """``1 - softmax(mean entropy per exit)`` for probabilities shaped (N, B, K)."""
    p = np.asarray(batch_exit_probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[1] == 0:
        raise InvalidInputError("expected probabilities shaped (N, B, K) with B >= 1")
    mean_h = entropy_rows(p).mean(axis=0)
    return 1.0 - softmax_rows(mean_h)


def gate_targets(paired_head_logits, labels) -> np.ndarray:
    """1 where the paired head's argmax equals the label, else 0."""
    z = np.asarray(paired_head_logits)
    y = np.asarray(labels)
    if z.shape[0] != y.shape[0]:
        raise InvalidInputError("logits and labels are not aligned")
    return (np.argmax(z, axis=-1) == y).astype(np.float64)


def combine_losses(strategy: TrainStrategy, final_loss, exit_losses, subgraph_w=None, entropy_w=None):
    """Apply a strategy's weighting to already computed loss terms.

    Works on floats and on tape variables alike.
    """
    b = len(exit_losses)
    if b == 0:
        return final_loss
    if strategy.kind == "uniform":
        return final_loss + sum(exit_losses)
    if strategy.kind == "weighted":
        coeffs = subgraph_w
    elif strategy.kind == "entropy":
        coeffs = entropy_w
    else:
        coeffs = np.asarray(subgraph_w) * np.asarray(entropy_w)
    g = strategy.gamma
    exits = sum(float(c) * l for c, l in zip(coeffs, exit_losses))
    return (1.0 - g) * final_loss + g * exits


def total_loss(
    strategy: TrainStrategy,
    outputs: NetOutputs,
    labels,
    net: MultiExitNetwork,
    entropy_w=None,
    targets=None,
):
    """Scalar training objective for one batch plus a per-term breakdown.

    ``entropy_w`` and ``targets`` override the per-batch entropy weights and
    gate targets; both are treated as constants with respect to parameters.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if outputs.final.value.shape[0] != labels.size:
        raise InvalidInputError("batch and label lengths differ")
    tape = outputs.final.tape
    final = tape.softmax_cross_entropy(outputs.final, labels)
    exit_terms = []
    used_targets = []
    for b, z in enumerate(outputs.exit_logits):
        term = tape.softmax_cross_entropy(z, labels)
        if net.head_kind is HeadKind.GATE:
            y = gate_targets(z.value, labels) if targets is None else np.asarray(targets[b])
            used_targets.append(y)
            term = term + tape.sigmoid_binary_cross_entropy(outputs.gate_logits[b], y)
        exit_terms.append(term)
    b = len(exit_terms)
    subgraph_w = exit_weights_subgraph(net) if b and strategy.kind in ("weighted", "weighted_entropy") else None
    if b and strategy.kind in ("entropy", "weighted_entropy") and entropy_w is None:
        probs = np.stack([softmax_rows(z.value) for z in outputs.exit_logits], axis=1)
        entropy_w = exit_weights_entropy(probs)
    loss = combine_losses(strategy, final, exit_terms, subgraph_w, entropy_w)
    if strategy.kind in ("weighted", "entropy", "weighted_entropy") and b:
        used = {"weighted": subgraph_w, "entropy": entropy_w}.get(strategy.kind)
        weights = used if used is not None else np.asarray(subgraph_w) * np.asarray(entropy_w)
    else:
        weights = np.ones(b)
    breakdown = {
        "final": float(final.value),
        "exits": [float(t.value) for t in exit_terms],
        "weights": np.asarray(weights, dtype=np.float64),
        "entropy_w": None if entropy_w is None else np.asarray(entropy_w),
        "targets": used_targets or None,
    }
    return loss, breakdown


def loss_and_grad(net: MultiExitNetwork, strategy: TrainStrategy, vision, text, labels, entropy_w=None, targets=None):
    """Forward, backward; returns ``(loss, grad copy, breakdown)``."""
    net.grad[:] = 0.0
    tape = Tape()
    out = net.forward(tape, vision, text)
    loss, parts = total_loss(strategy, out, labels, net, entropy_w, targets)
    tape.backward(loss)
    return float(loss.value), net.grad.copy(), parts


class AdamW:
    """Adam with decoupled weight decay over a flat parameter vector."""

    def __init__(self, size, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.eps, self.wd = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        self.t += 1
        params *= 1.0 - self.lr * self.wd
        self.m *= self.b1
        self.m += (1.0 - self.b1) * grad
        self.v *= self.b2
        self.v += (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def exit_accuracies(net: MultiExitNetwork, split) -> tuple[list[float], float]:
    exits, _, final = net.predict_logits(split.vision, split.text)
    y = split.labels
    per_exit = [float(np.mean(np.argmax(exits[:, b], axis=1) == y)) for b in range(net.num_exits)]
    return per_exit, float(np.mean(np.argmax(final, axis=1) == y))


def train(net: MultiExitNetwork, splits, strategy: TrainStrategy, config: TrainConfig, log=None):
    """Fine-tune ``net`` in place. Returns ``(net, TrainHistory)``.

    Each exit loss only reaches the parameters it depends on, which are the
    exit's subgraph and its own head; the final-classifier loss reaches the
    whole backbone.
    """
    train_split, val_split = splits["train"], splits["val"]
    if set(map(int, train_split.ids)) & set(map(int, val_split.ids)):
        raise InvalidInputError("train and validation splits overlap")
    rng = np.random.default_rng(config.seed)
    opt = AdamW(net.params.size, config.learning_rate, config.betas, config.eps, config.weight_decay)
    history = TrainHistory()
    n = len(train_split)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = {"total": 0.0, "final": 0.0}
        exit_sum = np.zeros(net.num_exits)
        weight_sum = np.zeros(net.num_exits)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad, parts = loss_and_grad(
                net, strategy, train_split.vision[idx], train_split.text[idx], train_split.labels[idx]
            )
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {batches + 1}")
            opt.step(net.params, net.grad)
            sums["total"] += loss
            sums["final"] += parts["final"]
            exit_sum += parts["exits"]
            weight_sum += parts["weights"]
            batches += 1
        val_exit, val_final = exit_accuracies(net, val_split)
        rec = EpochRecord(
            epoch=epoch,
            total_loss=sums["total"] / batches,
            final_loss=sums["final"] / batches,
            exit_losses=(exit_sum / batches).tolist(),
            weights=(weight_sum / batches).tolist(),
            val_exit_acc=val_exit,
            val_final_acc=val_final,
        )
        history.records.append(rec)
        if log is not None:
            log(rec)
    return net, history
