"""Multi-exit multimodal classifier.

The backbone is a desk-scale stand-in for a multimodal transformer: a vision
stem and a text stem (affine + nonlinearity each), a fusion layer over their
concatenation, ``L`` residual blocks ``h + act(h W + b)`` and a final affine
classifier. Exit heads hang off anchors in that graph.

Evaluation order is fixed: vision stem, text stem, fusion, then the encoder
blocks. The vision path comes first so that a vision exit never pays for the
text path (which carries the OCR cost in the ``ocr-aware`` cost model).
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    DegenerateNetworkError,
    InvalidInputError,
    InvalidPlacementError,
)
from .numerics import Tape, Var

MAGIC = b"MEXIT1"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class BackboneConfig:
    text_dim: int = 12
    vision_dim: int = 12
    stem_width: int = 32
    fused_width: int = 64
    encoder_layers: int = 12
    classes: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if self.encoder_layers < 1:
            raise InvalidInputError("encoder_layers must be >= 1")
        if self.classes < 2:
            raise InvalidInputError("classes must be >= 2")
        for name in ("text_dim", "vision_dim", "stem_width", "fused_width"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {ACTIVATIONS}")


class HeadKind(str, Enum):
    RAMP = "ramp"
    GATE = "gate"


_ANCHOR_NAMES = {"vision_stem": "VisionStem", "text_stem": "TextStem", "post_fusion": "PostFusion"}
_ANCHOR_KINDS = {v: k for k, v in _ANCHOR_NAMES.items()}
_ENCODER_RE = re.compile(r"^Encoder\((\d+)\)$")


@dataclass(frozen=True)
class Anchor:
    """A point in the backbone where an exit head can read a representation."""

    kind: str
    index: int = 0

    @property
    def depth(self) -> int:
        if self.kind == "encoder":
            return 2 + self.index
        return {"vision_stem": 0, "text_stem": 1, "post_fusion": 2}[self.kind]

    def __str__(self):
        if self.kind == "encoder":
            return f"Encoder({self.index})"
        return _ANCHOR_NAMES[self.kind]

    @classmethod
    def parse(cls, text: str) -> "Anchor":
        text = text.strip()
        if text in _ANCHOR_KINDS:
            return cls(_ANCHOR_KINDS[text])
        m = _ENCODER_RE.match(text)
        if m:
            return cls("encoder", int(m.group(1)))
        raise InvalidPlacementError(f"unknown anchor {text!r}")


VISION_STEM = Anchor("vision_stem")
TEXT_STEM = Anchor("text_stem")
POST_FUSION = Anchor("post_fusion")


def encoder(i: int) -> Anchor:
    return Anchor("encoder", i)


PLACEMENTS = ("independent_all", "concat_all", "concat_single", "concat_quarter", "concat_alternate")


def _scaled(positions, layers):
    # positions are written for a 12-block encoder
    return sorted({min(layers, max(1, round(p * layers / 12))) for p in positions})


@dataclass(frozen=True)
class ExitPlacement:
    """One of the named exit layouts, or ``custom`` with explicit anchors."""

    variant: str = "concat_quarter"
    anchors: tuple[Anchor, ...] = ()

    def __post_init__(self):
        if self.variant not in PLACEMENTS + ("custom",):
            raise InvalidPlacementError(f"unknown placement {self.variant!r}")

    @classmethod
    def custom(cls, anchors) -> "ExitPlacement":
        parsed = tuple(a if isinstance(a, Anchor) else Anchor.parse(a) for a in anchors)
        return cls("custom", parsed)

    def resolve(self, layers: int) -> tuple[Anchor, ...]:
        v = self.variant
        if v == "independent_all":
            out = [VISION_STEM, TEXT_STEM] + [encoder(i) for i in range(1, layers + 1)]
        elif v == "concat_all":
            out = [POST_FUSION] + [encoder(i) for i in range(1, layers + 1)]
        elif v == "concat_single":
            out = [POST_FUSION] + [encoder(i) for i in _scaled([6], layers)]
        elif v == "concat_quarter":
            out = [POST_FUSION] + [encoder(i) for i in _scaled([1, 4, 8, 12], layers)]
        elif v == "concat_alternate":
            out = [POST_FUSION] + [encoder(i) for i in _scaled([2, 5, 9, 11], layers)]
        else:
            out = list(self.anchors)
            for a in out:
                if a.kind == "encoder" and not 1 <= a.index <= layers:
                    raise InvalidPlacementError(f"{a} is outside a {layers}-block encoder")
            depths = [a.depth for a in out]
            if any(d1 >= d2 for d1, d2 in zip(depths, depths[1:])):
                raise InvalidPlacementError("custom anchors must be unique and ordered by depth")
        return tuple(out)

    def to_dict(self):
        return {"variant": self.variant, "anchors": [str(a) for a in self.anchors]}

    @classmethod
    def from_dict(cls, d) -> "ExitPlacement":
        if d["variant"] == "custom":
            return cls.custom(d.get("anchors", []))
        return cls(d["variant"])


@dataclass(frozen=True)
class CostModel:
    """Per-component inference costs in block-equivalents."""

    kind: str = "uniform"
    text_surcharge: float = 3.0
    stem: float = 1.0
    fusion: float = 0.5
    block: float = 1.0
    head: float = 0.1

    def __post_init__(self):
        if self.kind not in ("uniform", "ocr-aware"):
            raise InvalidInputError(f"unknown cost model {self.kind!r}")
        if min(self.text_surcharge, self.stem, self.fusion, self.block, self.head) < 0:
            raise InvalidInputError("costs must be nonnegative")

    @property
    def text_stem(self) -> float:
        return self.stem + (self.text_surcharge if self.kind == "ocr-aware" else 0.0)


@dataclass
class ExitRecord:
    anchor: Anchor
    logits: np.ndarray
    gate_logit: float | None
    cost_fraction: float


@dataclass
class ForwardTrace:
    exits: list[ExitRecord]
    final_logits: np.ndarray
    final_cost_fraction: float = 1.0


@dataclass
class NetOutputs:
    """Tape variables produced by one batched forward pass."""

    exit_logits: list[Var]
    gate_logits: list[Var | None]
    final: Var


class MultiExitNetwork:
    """Backbone plus ``B`` exit heads, with parameters in one flat buffer.

    ``params`` and ``grad`` are flat float64 arrays; ``weights[name]`` and
    ``grads[name]`` are views into them, so an optimizer can update the whole
    network with vector operations.
    """

    def __init__(self, config: BackboneConfig, placement: ExitPlacement, head_kind: HeadKind, seed: int):
        self.config = config
        self.placement = placement
        self.head_kind = HeadKind(head_kind)
        self.seed = int(seed)
        self.anchors = placement.resolve(config.encoder_layers)
        self.layout = self._layout()
        total = sum(int(np.prod(s)) for _, s in self.layout)
        self.params = np.zeros(total)
        self.grad = np.zeros(total)
        self.offsets: dict[str, tuple[int, int]] = {}
        self.weights: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self.offsets[name] = (off, off + n)
            self.weights[name] = self.params[off : off + n].reshape(shape)
            self.grads[name] = self.grad[off : off + n].reshape(shape)
            off += n

    @property
    def num_exits(self) -> int:
        return len(self.anchors)

    def _width(self, anchor: Anchor) -> int:
        if anchor.kind in ("vision_stem", "text_stem"):
            return self.config.stem_width
        return self.config.fused_width

    def _layout(self):
        c = self.config
        out = [
            ("vision_stem.W", (c.vision_dim, c.stem_width)),
            ("vision_stem.b", (c.stem_width,)),
            ("text_stem.W", (c.text_dim, c.stem_width)),
            ("text_stem.b", (c.stem_width,)),
            ("fusion.W", (2 * c.stem_width, c.fused_width)),
            ("fusion.b", (c.fused_width,)),
        ]
        for i in range(1, c.encoder_layers + 1):
            out += [(f"encoder.{i}.W", (c.fused_width, c.fused_width)), (f"encoder.{i}.b", (c.fused_width,))]
        out += [("final.W", (c.fused_width, c.classes)), ("final.b", (c.classes,))]
        for j, anchor in enumerate(self.anchors):
            w = self._width(anchor)
            out += [(f"exit.{j}.W", (w, c.classes)), (f"exit.{j}.b", (c.classes,))]
            if self.head_kind is HeadKind.GATE:
                out += [(f"exit.{j}.gate.W", (w, 1)), (f"exit.{j}.gate.b", (1,))]
        return out

    def initialize(self):
        """Seeded init; each group draws from its own stream keyed by name."""
        for name, shape in self.layout:
            view = self.weights[name]
            if name.endswith(".b"):
                view[...] = 0.0
                continue
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            gain = 0.5 if name.startswith("encoder.") else 1.0
            view[...] = rng.normal(0.0, gain / np.sqrt(shape[0]), size=shape)

    # parameter bookkeeping

    def backbone_groups(self, anchor: Anchor) -> list[str]:
        if anchor.kind == "vision_stem":
            return ["vision_stem.W", "vision_stem.b"]
        if anchor.kind == "text_stem":
            return ["text_stem.W", "text_stem.b"]
        names = ["vision_stem.W", "vision_stem.b", "text_stem.W", "text_stem.b", "fusion.W", "fusion.b"]
        if anchor.kind == "encoder":
            for i in range(1, anchor.index + 1):
                names += [f"encoder.{i}.W", f"encoder.{i}.b"]
        return names

    def subgraph(self, b: int) -> list[str]:
        """Backbone parameter groups that exit ``b`` reads through (its G_b)."""
        self._check_exit(b)
        return self.backbone_groups(self.anchors[b])

    def head_groups(self, b: int) -> list[str]:
        self._check_exit(b)
        return [n for n, _ in self.layout if n.startswith(f"exit.{b}.")]

    def theta_groups(self) -> list[str]:
        """Backbone plus final classifier; exit heads are not part of theta."""
        return [n for n, _ in self.layout if not n.startswith("exit.")]

    def count(self, names) -> int:
        return sum(self.weights[n].size for n in names)

    def _check_exit(self, b: int):
        if not 0 <= b < self.num_exits:
            raise InvalidInputError(f"exit index {b} out of range for B={self.num_exits}")

    def subgraph_param_fraction(self, b: int) -> float:
        """``|theta_G_b| / |theta|``; ``b == B`` denotes the final classifier."""
        if b == self.num_exits:
            return 1.0
        n = self.count(self.subgraph(b))
        if n == 0:
            raise DegenerateNetworkError(f"exit {b} has an empty subgraph")
        return n / self.count(self.theta_groups())

    def _stage_costs(self, cost_model: CostModel) -> list[tuple[str, float]]:
        stages = [("vision_stem", cost_model.stem), ("text_stem", cost_model.text_stem), ("post_fusion", cost_model.fusion)]
        stages += [(f"encoder.{i}", cost_model.block) for i in range(1, self.config.encoder_layers + 1)]
        return stages

    def cost_fractions(self, cost_model: CostModel | None = None) -> np.ndarray:
        """Cumulative cost of emitting each exit (and the final head) over the total."""
        cm = cost_model or CostModel()
        stage_of = {
            "vision_stem": "vision_stem",
            "text_stem": "text_stem",
            "post_fusion": "post_fusion",
        }
        keyed = [stage_of.get(a.kind, f"encoder.{a.index}") for a in self.anchors]
        running = 0.0
        out = []
        for stage, cost in self._stage_costs(cm):
            running += cost
            for k in keyed:
                if k == stage:
                    running += cm.head
                    out.append(running)
        running += cm.head
        out.append(running)
        arr = np.array(out) / running
        arr[-1] = 1.0
        return arr

    def exit_cost_fraction(self, b: int, cost_model: CostModel | None = None) -> float:
        if isinstance(cost_model, str):
            cost_model = CostModel(kind=cost_model)
        elif not isinstance(cost_model, (CostModel, type(None))):
            raise InvalidInputError(f"unknown cost model {cost_model!r}")
        if b != self.num_exits:
            self._check_exit(b)
        return float(self.cost_fractions(cost_model)[b])

    # forward

    def forward(self, tape: Tape, vision: np.ndarray, text: np.ndarray) -> NetOutputs:
        c = self.config
        vision = np.atleast_2d(np.asarray(vision, dtype=np.float64))
        text = np.atleast_2d(np.asarray(text, dtype=np.float64))
        if vision.shape[1] != c.vision_dim or text.shape[1] != c.text_dim or vision.shape[0] != text.shape[0]:
            raise InvalidInputError(
                f"expected vision (*, {c.vision_dim}) and text (*, {c.text_dim}), got {vision.shape} and {text.shape}"
            )
        grads = tape.enabled

        def p(name):
            return tape.param(self.weights[name], self.grads[name] if grads else None)

        act = c.activation
        hv = tape.activation(act, tape.affine(tape.constant(vision), p("vision_stem.W"), p("vision_stem.b")))
        ht = tape.activation(act, tape.affine(tape.constant(text), p("text_stem.W"), p("text_stem.b")))
        h = tape.activation(act, tape.affine(tape.concat([hv, ht]), p("fusion.W"), p("fusion.b")))
        reps = {VISION_STEM: hv, TEXT_STEM: ht, POST_FUSION: h}
        for i in range(1, c.encoder_layers + 1):
            h = h + tape.activation(act, tape.affine(h, p(f"encoder.{i}.W"), p(f"encoder.{i}.b")))
            reps[encoder(i)] = h
        final = tape.affine(h, p("final.W"), p("final.b"))
        exit_logits, gate_logits = [], []
        for j, anchor in enumerate(self.anchors):
            rep = reps[anchor]
            exit_logits.append(tape.affine(rep, p(f"exit.{j}.W"), p(f"exit.{j}.b")))
            if self.head_kind is HeadKind.GATE:
                gate_logits.append(tape.affine(rep, p(f"exit.{j}.gate.W"), p(f"exit.{j}.gate.b")))
            else:
                gate_logits.append(None)
        return NetOutputs(exit_logits, gate_logits, final)

    def predict_logits(self, vision, text):
        """Batched inference: ``(exit (N,B,K), gate (N,B) or None, final (N,K))``."""
        out = self.forward(Tape(enabled=False), vision, text)
        n = out.final.value.shape[0]
        k = self.config.classes
        if self.num_exits:
            exits = np.stack([z.value for z in out.exit_logits], axis=1)
        else:
            exits = np.zeros((n, 0, k))
        gates = None
        if self.head_kind is HeadKind.GATE:
            gates = np.zeros((n, self.num_exits))
            for j, g in enumerate(out.gate_logits):
                gates[:, j] = g.value[:, 0]
        return exits, gates, out.final.value

    def copy(self) -> "MultiExitNetwork":
        other = MultiExitNetwork(self.config, self.placement, self.head_kind, self.seed)
        other.params[:] = self.params
        return other


def build(config: BackboneConfig, placement: ExitPlacement, head_kind: HeadKind | str = HeadKind.RAMP, seed: int = 0) -> MultiExitNetwork:
    net = MultiExitNetwork(config, placement, HeadKind(head_kind), seed)
    net.initialize()
    return net


def forward_full(net: MultiExitNetwork, sample, cost_model: CostModel | None = None) -> ForwardTrace:
    """Evaluate every exit and the final classifier for one sample."""
    exits, gates, final = net.predict_logits(sample.vision_features, sample.text_features)
    fractions = net.cost_fractions(cost_model)
    records = [
        ExitRecord(
            anchor=a,
            logits=exits[0, j].copy(),
            gate_logit=None if gates is None else float(gates[0, j]),
            cost_fraction=float(fractions[j]),
        )
        for j, a in enumerate(net.anchors)
    ]
    return ForwardTrace(records, final[0].copy(), 1.0)


def subgraph_param_fraction(net: MultiExitNetwork, b: int) -> float:
    return net.subgraph_param_fraction(b)


def exit_cost_fraction(net: MultiExitNetwork, b: int, cost_model: CostModel | None = None) -> float:
    return net.exit_cost_fraction(b, cost_model)


# checkpoint I/O


def save_checkpoint(net: MultiExitNetwork, path, extra: dict | None = None):
    """Write ``MEXIT1`` + version + JSON header + little-endian float64 params."""
    header = {
        "config": asdict(net.config),
        "placement": net.placement.to_dict(),
        "head_kind": net.head_kind.value,
        "seed": net.seed,
        "groups": [
            {"name": n, "shape": list(s), "offset": net.offsets[n][0], "size": net.offsets[n][1] - net.offsets[n][0]}
            for n, s in net.layout
        ],
        "dtype": "<f8",
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[MultiExitNetwork, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a MEXIT1 checkpoint")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    net = MultiExitNetwork(
        BackboneConfig(**header["config"]),
        ExitPlacement.from_dict(header["placement"]),
        HeadKind(header["head_kind"]),
        header["seed"],
    )
    expected = [{"name": n, "shape": list(s)} for n, s in net.layout]
    got = [{"name": g["name"], "shape": g["shape"]} for g in header["groups"]]
    if expected != got:
        raise CheckpointFormatError(f"{path}: parameter groups do not match the declared architecture")
    flat = np.frombuffer(raw[pos:], dtype="<f8")
    if flat.size != net.params.size:
        raise CheckpointFormatError(f"{path}: expected {net.params.size} parameters, found {flat.size}")
    net.params[:] = flat
    return net, header.get("extra", {})


def collect_trace(net: MultiExitNetwork, split, cost_model: CostModel | None = None):
    """Run ``net`` over a split and package every exit's outputs as a LogitTrace."""
    from .data import LogitTrace

    exits, gates, final = net.predict_logits(split.vision, split.text)
    costs = np.tile(net.cost_fractions(cost_model), (len(split), 1))
    return LogitTrace(
        anchors=[str(a) for a in net.anchors],
        exit_logits=exits,
        final_logits=final,
        labels=np.asarray(split.labels, dtype=np.int64),
        gate_logits=gates,
        costs=costs,
    )
