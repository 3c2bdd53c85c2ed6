"""Command-line entry point: ``multiexit <command> [options]``.

Every command reads the same JSON run config (``--config``), applies flag
overrides on top, and reads/writes artifacts under ``--workdir``::

    data/{train,val,test}.jsonl   gen-data
    model.mexit, history.jsonl    train
    traces/{val,test}.jsonl       dump-logits
    calibration.json              calibrate
    *.csv, *.json                 policy and evaluation commands

Exit codes: 0 success, 2 configuration or missing-artifact error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from .calibration import CalibrationTable, per_exit_calibrate
from .config import RunConfig
from .data import generate_synthetic, load_dataset, load_logit_trace, save_dataset, save_logit_trace
from .errors import CheckpointFormatError, InvalidInputError, NumericalError, TraceFormatError
from .evaluation import EvalRow, ExitScores, compare_policies, evaluate_scores, write_eval_csv
from .model import PLACEMENTS, build, collect_trace, load_checkpoint, save_checkpoint
from .policy import ExitPolicy, global_sweep, percentile_candidates, random_multi_search
from .training import STRATEGIES, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

D = RunConfig()


class MissingArtifact(InvalidInputError):
    pass


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path} ({hint})")
    return path


# config assembly


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    overrides = {
        ("dataset", "train"): "train_size",
        ("dataset", "val"): "val_size",
        ("dataset", "test"): "test_size",
        ("train", "epochs"): "epochs",
        ("train", "batch_size"): "batch_size",
        ("train", "learning_rate"): "lr",
        ("train", "weight_decay"): "weight_decay",
        ("strategy", "kind"): "strategy",
        ("strategy", "gamma"): "gamma",
        ("policy", "tau"): "tau",
        ("policy", "epsilon"): "epsilon",
        ("policy", "step"): "step",
        ("policy", "budget"): "budget",
        ("cost_model", "kind"): "cost_model",
    }
    for (section, key), attr in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            d[section][key] = value
    if getattr(args, "placement", None) is not None:
        d["placement"] = {"variant": args.placement, "anchors": []}
    if getattr(args, "head_kind", None) is not None:
        d["head_kind"] = args.head_kind
    if getattr(args, "bins", None) is not None:
        d["bins"] = args.bins
    if getattr(args, "data", None) is not None:
        d["dataset_path"] = args.data
    if d["strategy"]["kind"] == "weighted_entropy":
        d["strategy"]["gamma"] = 0.5
    return RunConfig.from_dict(d)


class Context:
    def __init__(self, args):
        self.args = args
        self.config = _load_config(args)
        self.workdir = Path(args.workdir)

    @property
    def data_dir(self) -> Path:
        return Path(self.config.dataset_path) if self.config.dataset_path else self.workdir / "data"

    @property
    def checkpoint(self) -> Path:
        return self.workdir / "model.mexit"

    @property
    def calibration_path(self) -> Path:
        return self.workdir / "calibration.json"

    @property
    def calibrated(self) -> bool:
        return not getattr(self.args, "no_calibration", False)

    @property
    def tag(self) -> str:
        return "calibrated" if self.calibrated else "uncalibrated"

    def out(self, name: str) -> Path:
        self.workdir.mkdir(parents=True, exist_ok=True)
        return self.workdir / name

    def splits(self):
        d = self.data_dir
        for name in ("train", "val", "test"):
            _require(d / f"{name}.jsonl", "run gen-data first")
        return load_dataset(d)

    def network(self):
        net, _ = load_checkpoint(_require(self.checkpoint, "run train first"))
        return net

    def traces(self):
        """Validation and test traces, from ``--traces`` or the checkpoint."""
        tdir = getattr(self.args, "traces", None)
        if tdir:
            tdir = Path(tdir)
            return (
                load_logit_trace(_require(tdir / "val.jsonl", "run dump-logits first")),
                load_logit_trace(_require(tdir / "test.jsonl", "run dump-logits first")),
            )
        net = self.network()
        splits = self.splits()
        cm = self.config.cost_model
        return collect_trace(net, splits["val"], cm), collect_trace(net, splits["test"], cm)

    def table(self, val) -> CalibrationTable | None:
        if not self.calibrated:
            return None
        table = CalibrationTable.load(_require(self.calibration_path, "run calibrate first"))
        if len(table) != val.num_exits:
            raise InvalidInputError(f"{self.calibration_path} has {len(table)} exits, the model has {val.num_exits}")
        return table

    def policy(self) -> ExitPolicy:
        path = getattr(self.args, "policy", None)
        if path:
            return ExitPolicy.load(_require(Path(path), "policy JSON"))
        return ExitPolicy.global_threshold(self.config.policy.tau)


def _fmt(values) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


# commands


def cmd_gen_data(ctx: Context):
    spec = ctx.config.dataset_spec()
    splits = generate_synthetic(spec)
    out = ctx.workdir / "data"
    save_dataset(splits, out, spec)
    ctx.config.save(ctx.out("run_config.json"))
    print(f"wrote {', '.join(f'{n}={len(s)}' for n, s in splits.items())} samples to {out}")


def cmd_train(ctx: Context):
    cfg = ctx.config
    splits = ctx.splits()
    net = build(cfg.backbone, cfg.placement, cfg.head_kind, cfg.substream("init"))

    def log(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.total_loss:.4f}  val final {rec.val_final_acc:.4f}", flush=True)

    net, history = train(net, splits, cfg.strategy, cfg.train_config(), log=log)
    save_checkpoint(net, ctx.out("model.mexit"), extra={"run_config": cfg.to_dict()})
    history.save(ctx.out("history.jsonl"))
    last = history.records[-1]
    for anchor, acc in zip(net.anchors, last.val_exit_acc):
        print(f"val accuracy {str(anchor):<12} {acc:.4f}")
    print(f"val accuracy {'Final':<12} {last.val_final_acc:.4f}")


def cmd_dump_logits(ctx: Context):
    net = ctx.network()
    splits = ctx.splits()
    out = Path(ctx.args.out) if ctx.args.out else ctx.workdir / "traces"
    out.mkdir(parents=True, exist_ok=True)
    for name in ("val", "test"):
        save_logit_trace(collect_trace(net, splits[name], ctx.config.cost_model), out / f"{name}.jsonl")
    print(f"wrote traces to {out}")


def cmd_calibrate(ctx: Context):
    val, _ = ctx.traces()
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        table = per_exit_calibrate(val, ctx.config.bins)
    table.save(ctx.out("calibration.json"))
    print(f"T   {_fmt(table.temperatures)}")
    print(f"ACC {_fmt(table.accuracies)}")
    print(f"ECE {_fmt(table.eces)}")


def cmd_sweep_global(ctx: Context):
    val, test = ctx.traces()
    scores = ExitScores.from_trace(test, ctx.table(val))
    points = global_sweep(ctx.config.policy.step, scores.metrics)
    path = ctx.out(f"global_sweep_{ctx.tag}.csv")
    points.write_csv(path)
    print(f"{len(points)} thresholds -> {path}")


def cmd_search_multi(ctx: Context):
    val, test = ctx.traces()
    table = ctx.table(val)
    sval = ExitScores.from_trace(val, table)
    stest = ExitScores.from_trace(test, table)
    cands = percentile_candidates(sval.confidences)
    found = random_multi_search(cands, ctx.config.policy.budget, sval.metrics, ctx.config.substream("search"))
    found.write_csv(ctx.out(f"multi_search_{ctx.tag}_val.csv"))
    rows = []
    for taus in found.taus[found.pareto]:
        r = evaluate_scores(stest, taus)
        rows.append(EvalRow(f"multi_exit_{ctx.tag}", "multi", taus, r.accuracy, r.latency_reduction, r.exit_histogram))
    path = ctx.out(f"multi_search_{ctx.tag}.csv")
    write_eval_csv(rows, path)
    print(f"{len(found)} combinations searched on val, {len(rows)} Pareto vectors -> {path}")


def cmd_heuristic(ctx: Context):
    val, test = ctx.traces()
    table = ctx.table(val)
    stats = table if table is not None else per_exit_calibrate(val, ctx.config.bins, fit=False)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        policy = ExitPolicy.heuristic(stats.accuracies, stats.eces, ctx.config.policy.epsilon)
    Path(ctx.out(f"heuristic_policy_{ctx.tag}.json")).write_text(policy.to_json() + "\n")
    r = evaluate_scores(ExitScores.from_trace(test, table), policy)
    path = ctx.out(f"heuristic_{ctx.tag}.csv")
    write_eval_csv([EvalRow(f"heuristic_{ctx.tag}", "heuristic", r.thresholds, r.accuracy, r.latency_reduction, r.exit_histogram)], path)
    print(f"tau {_fmt(policy.thresholds)}  accuracy {r.accuracy:.4f}  latency reduction {r.latency_reduction:.4f}")


def cmd_evaluate(ctx: Context):
    val, test = ctx.traces()
    table = ctx.table(val)
    policy = ctx.policy()
    r = evaluate_scores(ExitScores.from_trace(test, table), policy)
    path = ctx.out(f"eval_{ctx.tag}.csv")
    write_eval_csv([EvalRow(f"{policy.kind}_{ctx.tag}", policy.kind, r.thresholds, r.accuracy, r.latency_reduction, r.exit_histogram)], path)
    final = float(np.mean(np.argmax(test.final_logits, axis=1) == test.labels))
    print(f"accuracy {r.accuracy:.4f}  latency reduction {r.latency_reduction:.4f}  final-classifier accuracy {final:.4f}")
    print("exits " + " ".join(f"{a}={int(c)}" for a, c in zip(test.anchors + ["Final"], r.exit_histogram)))


def cmd_exit_patterns(ctx: Context):
    val, test = ctx.traces()
    table = ctx.table(val)
    policy = ctx.policy()
    r = evaluate_scores(ExitScores.from_trace(test, table), policy)
    names = None
    tiers = ctx.config.dataset.resolved_tiers
    if len(tiers) == r.patterns.counts.shape[0]:
        names = [f"{c}:{t}" for c, t in enumerate(tiers)]
    r.patterns.write_csv(ctx.out(f"exit_patterns_{ctx.tag}.csv"), class_names=names)
    r.patterns.write_csv(ctx.out(f"exit_patterns_{ctx.tag}_log.csv"), normalized=True, class_names=names)
    print(f"exit patterns for {policy.kind} policy -> {ctx.workdir}")


def cmd_compare(ctx: Context):
    val, test = ctx.traces()
    table = CalibrationTable.load(ctx.calibration_path) if ctx.calibration_path.exists() else None
    p = ctx.config.policy
    report = compare_policies(val, test, table, p.step, p.budget, p.epsilon, ctx.config.substream("search"), ctx.config.bins)
    out = ctx.workdir / "compare"
    for path in report.write(out):
        print(path)
    print(out / "multi_exit_search_validation.csv")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic multimodal dataset"),
    "train": (cmd_train, "train a multi-exit network"),
    "dump-logits": (cmd_dump_logits, "write validation/test logit traces"),
    "calibrate": (cmd_calibrate, "fit per-exit temperatures on validation"),
    "sweep-global": (cmd_sweep_global, "sweep one shared threshold on test"),
    "search-multi": (cmd_search_multi, "random search over per-exit percentile thresholds"),
    "heuristic": (cmd_heuristic, "ACC/ECE heuristic thresholds"),
    "evaluate": (cmd_evaluate, "evaluate one policy on test"),
    "exit-patterns": (cmd_exit_patterns, "per-class counts of correct exits"),
    "compare": (cmd_compare, "all policies side by side plus the merged Pareto front"),
}


def _common(p):
    p.add_argument("--config", metavar="FILE", help="JSON run config (default: built-in defaults)")
    p.add_argument("--workdir", metavar="DIR", default="run", help="artifact directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help=f"master seed for data/init/shuffle/search substreams (default: {D.seed})")


def _traces(p, calibration=True):
    p.add_argument("--traces", metavar="DIR", help="read val.jsonl/test.jsonl traces from DIR instead of the checkpoint")
    if calibration:
        p.add_argument("--no-calibration", action="store_true", help="use raw MSPs instead of calibration.json (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiexit", description="Multi-exit classifier experiments: train, calibrate, choose exit thresholds, evaluate.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    ps = {}
    for name, (_, help_) in COMMANDS.items():
        ps[name] = sub.add_parser(name, help=help_, description=help_)
        _common(ps[name])

    g = ps["gen-data"]
    g.add_argument("--train-size", type=int, help=f"training samples (default: {D.dataset.train})")
    g.add_argument("--val-size", type=int, help=f"validation samples (default: {D.dataset.val})")
    g.add_argument("--test-size", type=int, help=f"test samples (default: {D.dataset.test})")

    t = ps["train"]
    t.add_argument("--data", metavar="DIR", help="dataset directory (default: WORKDIR/data)")
    t.add_argument("--placement", choices=PLACEMENTS, help=f"exit placement (default: {D.placement.variant})")
    t.add_argument("--head-kind", choices=("ramp", "gate"), help=f"exit head kind (default: {D.head_kind.value})")
    t.add_argument("--strategy", choices=STRATEGIES, help=f"loss weighting (default: {D.strategy.kind})")
    t.add_argument("--gamma", type=float, help=f"exit-loss share in [0, 1] (default: {D.strategy.gamma})")
    t.add_argument("--epochs", type=int, help=f"(default: {D.train.epochs})")
    t.add_argument("--batch-size", type=int, help=f"(default: {D.train.batch_size})")
    t.add_argument("--lr", type=float, help=f"AdamW learning rate (default: {D.train.learning_rate})")
    t.add_argument("--weight-decay", type=float, help=f"AdamW weight decay (default: {D.train.weight_decay})")

    for name in ("dump-logits", "calibrate", "sweep-global", "search-multi", "heuristic", "evaluate", "exit-patterns", "compare"):
        ps[name].add_argument("--data", metavar="DIR", help="dataset directory (default: WORKDIR/data)")
        ps[name].add_argument("--cost-model", choices=("uniform", "ocr-aware"), help=f"latency cost model (default: {D.cost_model.kind})")
    ps["dump-logits"].add_argument("--out", metavar="DIR", help="output directory (default: WORKDIR/traces)")
    _traces(ps["calibrate"], calibration=False)
    ps["calibrate"].add_argument("--bins", type=int, help=f"ECE bins (default: {D.bins})")
    _traces(ps["sweep-global"])
    ps["sweep-global"].add_argument("--step", type=float, help=f"sweep step (default: {D.policy.step})")
    _traces(ps["search-multi"])
    ps["search-multi"].add_argument("--budget", type=int, help=f"threshold combinations to evaluate (default: {D.policy.budget})")
    _traces(ps["heuristic"])
    ps["heuristic"].add_argument("--epsilon", type=float, help=f"min-max normalization margin (default: {D.policy.epsilon})")
    ps["heuristic"].add_argument("--bins", type=int, help=f"ECE bins for --no-calibration (default: {D.bins})")
    for name in ("evaluate", "exit-patterns"):
        _traces(ps[name])
        ps[name].add_argument("--policy", metavar="FILE", help="policy JSON (default: global threshold --tau)")
        ps[name].add_argument("--tau", type=float, help=f"global threshold (default: {D.policy.tau})")
    _traces(ps["compare"], calibration=False)
    ps["compare"].add_argument("--step", type=float, help=f"sweep step (default: {D.policy.step})")
    ps["compare"].add_argument("--budget", type=int, help=f"search budget (default: {D.policy.budget})")
    ps["compare"].add_argument("--epsilon", type=float, help=f"heuristic margin (default: {D.policy.epsilon})")
    ps["compare"].add_argument("--bins", type=int, help=f"ECE bins (default: {D.bins})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        handler(Context(args))
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, TraceFormatError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
