"""Run configuration: one JSON document describing a full experiment.

Schema (every key optional, defaults shown by ``RunConfig().to_json()``)::

    {
      "seed": 0,
      "dataset": {...DatasetSpec fields except seed...},
      "dataset_path": null,          # directory with train/val/test.jsonl
      "backbone": {...BackboneConfig fields...},
      "placement": {"variant": "concat_quarter", "anchors": []},
      "head_kind": "ramp",
      "strategy": {"kind": "weighted", "gamma": 0.5},
      "train": {...TrainConfig fields except seed...},
      "bins": 10,
      "policy": {"tau": 0.99, "epsilon": 0.05, "step": 0.05, "budget": 1000000},
      "cost_model": {...CostModel fields...}
    }

All randomness derives from ``seed`` through named substreams, so changing
the shuffling seed never perturbs the data or the initialization.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetSpec
from .errors import InvalidInputError
from .model import BackboneConfig, CostModel, ExitPlacement, HeadKind
from .policy import DEFAULT_BUDGET, DEFAULT_EPSILON, DEFAULT_STEP
from .training import TrainConfig, TrainStrategy

SUBSTREAMS = ("data", "init", "shuffle", "search")


def substream_seed(seed: int, name: str) -> int:
    if name not in SUBSTREAMS:
        raise InvalidInputError(f"unknown seed substream {name!r}")
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class PolicySettings:
    tau: float = 0.99
    epsilon: float = DEFAULT_EPSILON
    step: float = DEFAULT_STEP
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise InvalidInputError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if not 0.0 < self.step < 1.0:
            raise InvalidInputError("step must lie in (0, 1)")
        if self.budget < 1:
            raise InvalidInputError("budget must be >= 1")


def _build(cls, d, what):
    if not isinstance(d, dict):
        raise InvalidInputError(f"{what} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise InvalidInputError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise InvalidInputError(f"bad {what}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_path: str | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    placement: ExitPlacement = field(default_factory=ExitPlacement)
    head_kind: HeadKind = HeadKind.RAMP
    strategy: TrainStrategy = field(default_factory=TrainStrategy)
    train: TrainConfig = field(default_factory=TrainConfig)
    bins: int = 10
    policy: PolicySettings = field(default_factory=PolicySettings)
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        object.__setattr__(self, "head_kind", HeadKind(self.head_kind))
        if self.bins < 1:
            raise InvalidInputError("bins must be >= 1")
        if self.backbone.classes != self.dataset.classes:
            raise InvalidInputError(
                f"backbone has {self.backbone.classes} classes, dataset has {self.dataset.classes}"
            )
        if (self.backbone.text_dim, self.backbone.vision_dim) != (self.dataset.text_dim, self.dataset.vision_dim):
            raise InvalidInputError("backbone input dimensions must match the dataset")

    def substream(self, name: str) -> int:
        return substream_seed(self.seed, name)

    def dataset_spec(self) -> DatasetSpec:
        return replace(self.dataset, seed=self.substream("data"))

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.substream("shuffle"))

    def to_dict(self) -> dict:
        ds = self.dataset.to_dict()
        ds.pop("seed")
        tr = asdict(self.train)
        tr.pop("seed")
        tr["betas"] = list(tr["betas"])
        return {
            "seed": self.seed,
            "dataset": ds,
            "dataset_path": self.dataset_path,
            "backbone": asdict(self.backbone),
            "placement": self.placement.to_dict(),
            "head_kind": self.head_kind.value,
            "strategy": asdict(self.strategy),
            "train": tr,
            "bins": self.bins,
            "policy": asdict(self.policy),
            "cost_model": asdict(self.cost_model),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidInputError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key in ("seed", "dataset_path", "head_kind", "bins"):
            if key in d:
                kw[key] = d[key]
        if "dataset" in d:
            ds = dict(d["dataset"])
            if "seed" in ds:
                raise InvalidInputError("dataset.seed is derived from the run seed; remove it")
            try:
                kw["dataset"] = DatasetSpec.from_dict(ds)
            except TypeError as exc:
                raise InvalidInputError(f"bad dataset: {exc}") from None
        if "backbone" in d:
            kw["backbone"] = _build(BackboneConfig, d["backbone"], "backbone")
        if "placement" in d:
            try:
                kw["placement"] = ExitPlacement.from_dict(d["placement"])
            except KeyError as exc:
                raise InvalidInputError(f"placement is missing {exc}") from None
        if "strategy" in d:
            kw["strategy"] = _build(TrainStrategy, d["strategy"], "strategy")
        if "train" in d:
            if "seed" in d["train"]:
                raise InvalidInputError("train.seed is derived from the run seed; remove it")
            kw["train"] = _build(TrainConfig, d["train"], "train")
        if "policy" in d:
            kw["policy"] = _build(PolicySettings, d["policy"], "policy")
        if "cost_model" in d:
            kw["cost_model"] = _build(CostModel, d["cost_model"], "cost_model")
        try:
            return cls(**kw)
        except ValueError as exc:
            if isinstance(exc, InvalidInputError):
                raise
            raise InvalidInputError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise InvalidInputError(f"config file not found: {p}")
        return cls.from_json(p.read_text())

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")
