"""Synthetic multimodal dataset and JSON-lines formats.

Each class belongs to a difficulty tier that decides which part of the
network can resolve it:

``vision-easy``
    separable from the vision features alone.
``text-easy``
    separable from the text features alone.
``fusion-easy``
    each modality narrows the class down to a pair; both together identify it.
``deep-only``
    the class is encoded in products of vision and text signs (XOR), so every
    deep-only class has the same mean and no affine map of the raw features
    can tell them apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, TraceFormatError

FORMAT_VERSION = 1
TIERS = ("vision-easy", "text-easy", "fusion-easy", "deep-only")
SPLITS = ("train", "val", "test")

# stream ids under the data seed
_PROTOTYPES, _SPLIT_BASE = 0, 1


def default_tiers(classes: int = 16) -> tuple[str, ...]:
    per = classes // len(TIERS)
    extra = classes - per * len(TIERS)
    out = []
    for i, t in enumerate(TIERS):
        out += [t] * (per + (1 if i < extra else 0))
    return tuple(out)


def _default_noise():
    return {"vision-easy": 1.0, "text-easy": 1.0, "fusion-easy": 1.0, "deep-only": 0.9}


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 16
    train: int = 800
    val: int = 400
    test: int = 400
    text_dim: int = 12
    vision_dim: int = 12
    tiers: tuple[str, ...] | None = None
    noise: dict = field(default_factory=_default_noise)
    separation: float = 4.0
    xor_scale: float = 3.0
    xor_order: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise InvalidInputError("classes must be >= 2")
        for split in SPLITS:
            n = getattr(self, split)
            if n < self.classes or n % self.classes:
                raise InvalidInputError(f"{split} size {n} is not a positive multiple of K={self.classes}")
        if self.xor_order < 2:
            raise InvalidInputError("xor_order must be >= 2")
        if self.text_dim < 1 or self.vision_dim < 1:
            raise InvalidInputError("feature dimensions must be >= 1")
        tiers = self.resolved_tiers
        object.__setattr__(self, "tiers", tiers)
        if len(tiers) != self.classes:
            raise InvalidInputError("tiers must list one tier per class")
        bad = set(tiers) - set(TIERS)
        if bad:
            raise InvalidInputError(f"unknown tiers {sorted(bad)}")
        for t in set(tiers):
            if self.noise.get(t, 0) <= 0:
                raise InvalidInputError(f"noise scale for {t} must be positive")

    @property
    def resolved_tiers(self) -> tuple[str, ...]:
        return tuple(self.tiers) if self.tiers is not None else default_tiers(self.classes)

    def classes_in(self, tier: str) -> list[int]:
        return [c for c, t in enumerate(self.resolved_tiers) if t == tier]

    def to_dict(self):
        d = asdict(self)
        d["tiers"] = list(self.resolved_tiers)
        return d

    @classmethod
    def from_dict(cls, d) -> "DatasetSpec":
        d = dict(d)
        if d.get("tiers") is not None:
            d["tiers"] = tuple(d["tiers"])
        if "noise" in d:
            d["noise"] = {**_default_noise(), **d["noise"]}
        return cls(**d)


@dataclass
class MultimodalSample:
    text_features: np.ndarray
    vision_features: np.ndarray
    label: int
    id: int = -1


@dataclass
class Split:
    """Column-oriented split: ``text (N, dt)``, ``vision (N, dv)``, ``labels (N,)``."""

    name: str
    text: np.ndarray
    vision: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return int(self.labels.size)

    def __getitem__(self, i) -> MultimodalSample:
        return MultimodalSample(self.text[i], self.vision[i], int(self.labels[i]), int(self.ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _directions(rng, dim, count):
    g = rng.normal(size=(dim, max(dim, count)))
    if count <= dim:
        q, _ = np.linalg.qr(g[:, :dim])
        return q[:, :count].T
    v = g[:, :count].T
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class _Layout:
    text_mean: np.ndarray  # (K, dt)
    vision_mean: np.ndarray  # (K, dv)
    xor_vision: np.ndarray  # (bits, vision factors, dv)
    xor_text: np.ndarray  # (bits, text factors, dt)
    xor_signs: np.ndarray  # (K, bits); 0 for classes without XOR structure


def _layout(spec: DatasetSpec) -> _Layout:
    rng = np.random.default_rng([spec.seed, _PROTOTYPES])
    k, s = spec.classes, spec.separation
    ve, te, fe, de = (spec.classes_in(t) for t in TIERS)
    fa = math.ceil(math.sqrt(len(fe))) if fe else 0
    fb = math.ceil(len(fe) / fa) if fe else 0
    bits = max(1, math.ceil(math.log2(len(de)))) if len(de) > 1 else (1 if de else 0)
    # parity factors alternate vision, text, vision, ...
    fv, ft = (spec.xor_order + 1) // 2, spec.xor_order // 2
    nv = len(ve) + fa + (1 if de else 0) + bits * fv
    nt = len(te) + fb + (1 if de else 0) + bits * ft
    dv = _directions(rng, spec.vision_dim, nv)
    dt = _directions(rng, spec.text_dim, nt)
    vm = np.zeros((k, spec.vision_dim))
    tm = np.zeros((k, spec.text_dim))
    iv = it = 0
    for c in ve:
        vm[c] = s * dv[iv]
        iv += 1
    for c in te:
        tm[c] = s * dt[it]
        it += 1
    for i, c in enumerate(fe):
        vm[c] = s * dv[iv + i // fb]
        tm[c] = s * dt[it + i % fb]
    iv += fa
    it += fb
    signs = np.zeros((k, bits))
    if de:
        for c in de:
            vm[c] = s * dv[iv]
            tm[c] = s * dt[it]
        iv += 1
        it += 1
        for i, c in enumerate(de):
            signs[c] = [1.0 if (i >> j) & 1 == 0 else -1.0 for j in range(bits)]
    xv = dv[iv : iv + bits * fv].reshape(bits, fv, spec.vision_dim)
    xt = dt[it : it + bits * ft].reshape(bits, ft, spec.text_dim)
    return _Layout(tm, vm, xv, xt, signs)


def class_means(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Expected ``(text, vision)`` feature mean of every class."""
    lay = _layout(spec)
    return lay.text_mean.copy(), lay.vision_mean.copy()


def _sample(spec: DatasetSpec, lay: _Layout, labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    n = labels.size
    sigma = np.array([spec.noise[t] for t in spec.resolved_tiers])[labels][:, None]
    text = lay.text_mean[labels] + sigma * rng.normal(size=(n, spec.text_dim))
    vision = lay.vision_mean[labels] + sigma * rng.normal(size=(n, spec.vision_dim))
    bits = lay.xor_signs.shape[1]
    if bits:
        m = spec.xor_order
        deep = np.abs(lay.xor_signs[labels])  # (n, bits), 1 for deep-only classes
        r = rng.choice([-1.0, 1.0], size=(n, bits, m - 1))
        last = lay.xor_signs[labels] * np.prod(r, axis=2)
        factors = np.concatenate([r, last[:, :, None]], axis=2) * deep[:, :, None]
        vision = vision + spec.xor_scale * np.einsum("nbf,bfd->nd", factors[:, :, 0::2], lay.xor_vision)
        text = text + spec.xor_scale * np.einsum("nbf,bfd->nd", factors[:, :, 1::2], lay.xor_text)
    return text, vision


def sample_class(spec: DatasetSpec, label: int, n: int, seed: int) -> Split:
    """Draw ``n`` samples of one class from an independent stream (for checks)."""
    labels = np.full(n, label, dtype=np.int64)
    text, vision = _sample(spec, _layout(spec), labels, np.random.default_rng([spec.seed, 100 + seed]))
    return Split("probe", text, vision, labels, np.arange(n))


def generate_synthetic(spec: DatasetSpec) -> dict[str, Split]:
    lay = _layout(spec)
    out = {}
    start = 0
    for i, name in enumerate(SPLITS):
        n = getattr(spec, name)
        rng = np.random.default_rng([spec.seed, _SPLIT_BASE + i])
        labels = rng.permutation(np.repeat(np.arange(spec.classes), n // spec.classes))
        text, vision = _sample(spec, lay, labels, rng)
        out[name] = Split(name, text, vision, labels.astype(np.int64), np.arange(start, start + n))
        start += n
    return out


# dataset files


def save_split(split: Split, path, spec: DatasetSpec | None = None):
    header = {
        "v": FORMAT_VERSION,
        "kind": "dataset",
        "split": split.name,
        "n": len(split),
        "text_dim": int(split.text.shape[1]),
        "vision_dim": int(split.vision.shape[1]),
    }
    if spec is not None:
        header["spec"] = spec.to_dict()
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(split)):
            rec = {
                "id": int(split.ids[i]),
                "label": int(split.labels[i]),
                "text": split.text[i].tolist(),
                "vision": split.vision[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def _read_jsonl(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}: invalid JSON ({exc.msg})", lineno) from None


def _check_version(header, path):
    if not isinstance(header, dict) or header.get("v") != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: missing or unsupported version field", 1)


def load_split(path) -> Split:
    rows = _read_jsonl(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise TraceFormatError(f"{path}: empty file", 1) from None
    _check_version(header, path)
    if header.get("kind") != "dataset":
        raise TraceFormatError(f"{path}: not a dataset file", 1)
    text, vision, labels, ids = [], [], [], []
    for lineno, rec in rows:
        try:
            t, v = rec["text"], rec["vision"]
            if len(t) != header["text_dim"] or len(v) != header["vision_dim"]:
                raise TraceFormatError(f"{path}: feature length mismatch", lineno)
            text.append(t)
            vision.append(v)
            labels.append(int(rec["label"]))
            ids.append(int(rec["id"]))
        except (KeyError, TypeError) as exc:
            raise TraceFormatError(f"{path}: malformed record ({exc})", lineno) from None
    if len(labels) != header["n"]:
        raise TraceFormatError(f"{path}: expected {header['n']} records, found {len(labels)}", lineno + 1 if labels else 2)
    return Split(
        header["split"],
        np.array(text, dtype=np.float64).reshape(-1, header["text_dim"]),
        np.array(vision, dtype=np.float64).reshape(-1, header["vision_dim"]),
        np.array(labels, dtype=np.int64),
        np.array(ids, dtype=np.int64),
    )


def save_dataset(splits: dict[str, Split], directory, spec: DatasetSpec | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in splits.items():
        save_split(split, directory / f"{name}.jsonl", spec)


def load_dataset(directory) -> dict[str, Split]:
    directory = Path(directory)
    return {name: load_split(directory / f"{name}.jsonl") for name in SPLITS}


# per-exit logit traces


@dataclass
class LogitTrace:
    """Per-exit outputs for a set of samples, independent of any network.

    ``exit_logits`` is ``(N, B, K)``, ``gate_logits`` is ``(N, B)`` or None,
    ``final_logits`` is ``(N, K)``, ``costs`` is ``(N, B + 1)`` or None with the
    last column the final classifier.
    """

    anchors: list[str]
    exit_logits: np.ndarray
    final_logits: np.ndarray
    labels: np.ndarray
    gate_logits: np.ndarray | None = None
    costs: np.ndarray | None = None

    def __post_init__(self):
        n, b, k = self.exit_logits.shape
        if len(self.anchors) != b:
            raise InvalidInputError(f"{len(self.anchors)} anchors for {b} exits")
        if self.final_logits.shape != (n, k) or self.labels.shape != (n,):
            raise InvalidInputError("final logits / labels are not aligned with exit logits")
        if self.gate_logits is not None and self.gate_logits.shape != (n, b):
            raise InvalidInputError("gate logits must be (N, B)")
        if self.costs is not None and self.costs.shape != (n, b + 1):
            raise InvalidInputError("costs must be (N, B + 1)")

    @property
    def num_exits(self) -> int:
        return self.exit_logits.shape[1]

    @property
    def classes(self) -> int:
        return self.exit_logits.shape[2]

    def __len__(self):
        return int(self.labels.size)


def save_logit_trace(trace: LogitTrace, path):
    header = {
        "v": FORMAT_VERSION,
        "B": trace.num_exits,
        "K": trace.classes,
        "anchors": list(trace.anchors),
        "gates": trace.gate_logits is not None,
        "n": len(trace),
    }
    shared_costs = trace.costs is not None and np.all(trace.costs == trace.costs[:1])
    if shared_costs and len(trace):
        header["costs"] = trace.costs[0].tolist()
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(trace)):
            rec = {
                "label": int(trace.labels[i]),
                "exits": trace.exit_logits[i].tolist(),
                "final": trace.final_logits[i].tolist(),
            }
            if trace.gate_logits is not None:
                rec["gates"] = trace.gate_logits[i].tolist()
            if trace.costs is not None and not shared_costs:
                rec["costs"] = trace.costs[i].tolist()
            fh.write(json.dumps(rec) + "\n")


def load_logit_trace(path) -> LogitTrace:
    rows = _read_jsonl(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise TraceFormatError(f"{path}: empty file", 1) from None
    _check_version(header, path)
    try:
        b, k, anchors = int(header["B"]), int(header["K"]), list(header["anchors"])
    except (KeyError, TypeError, ValueError):
        raise TraceFormatError(f"{path}: header needs B, K and anchors", 1) from None
    if len(anchors) != b:
        raise TraceFormatError(f"{path}: header lists {len(anchors)} anchors but B={b}", 1)
    gates = bool(header.get("gates", False))
    shared = header.get("costs")
    if shared is not None and len(shared) != b + 1:
        raise TraceFormatError(f"{path}: header costs need B+1 entries", 1)
    exits, finals, labels, gate_rows, cost_rows = [], [], [], [], []
    lineno = 1
    for lineno, rec in rows:
        try:
            e = rec["exits"]
            if len(e) != b:
                raise TraceFormatError(f"{path}: record has {len(e)} exits, header says B={b}", lineno)
            if any(len(z) != k for z in e) or len(rec["final"]) != k:
                raise TraceFormatError(f"{path}: logit vector length differs from K={k}", lineno)
            label = int(rec["label"])
            if not 0 <= label < k:
                raise TraceFormatError(f"{path}: label {label} out of range", lineno)
            if gates:
                if len(rec["gates"]) != b:
                    raise TraceFormatError(f"{path}: expected {b} gate logits", lineno)
                gate_rows.append(rec["gates"])
            if shared is None and "costs" in rec:
                if len(rec["costs"]) != b + 1:
                    raise TraceFormatError(f"{path}: costs need B+1 entries", lineno)
                cost_rows.append(rec["costs"])
            exits.append(e)
            finals.append(rec["final"])
            labels.append(label)
        except (KeyError, TypeError) as exc:
            raise TraceFormatError(f"{path}: malformed record ({exc})", lineno) from None
    n = len(labels)
    if "n" in header and header["n"] != n:
        raise TraceFormatError(f"{path}: expected {header['n']} records, found {n} (truncated?)", lineno + 1)
    if cost_rows and len(cost_rows) != n:
        raise TraceFormatError(f"{path}: costs present on some records only", lineno)
    costs = None
    if shared is not None:
        costs = np.tile(np.asarray(shared, dtype=np.float64), (n, 1))
    elif cost_rows:
        costs = np.asarray(cost_rows, dtype=np.float64)
    return LogitTrace(
        anchors=anchors,
        exit_logits=np.asarray(exits, dtype=np.float64).reshape(n, b, k),
        final_logits=np.asarray(finals, dtype=np.float64).reshape(n, k),
        labels=np.asarray(labels, dtype=np.int64),
        gate_logits=np.asarray(gate_rows, dtype=np.float64).reshape(n, b) if gates else None,
        costs=costs,
    )
