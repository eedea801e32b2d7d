"""Command-line experiment runner.

``timepar train`` runs one configuration and writes a JSON Lines metrics file:
a config record first, then one record per round (or serial iteration), then
a summary.  ``timepar report`` compares metrics files; ``timepar gen-data``
writes a synthetic dataset as CSV.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import BatchStream, gen_ellipse, gen_swissroll, load_mnist_idx
from .dynamics import ModelSpec, init_controls
from .errors import ContractError, NumericError, TimeParError
from .multilevel import CoarseConfig
from .parallel import make_plan, parallel_train
from .trajectory import LearningRate, evaluate, serial_train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATASETS = ("swissroll", "ellipse", "mnist")
MODES = ("serial", "parallel", "lockstep-oracle")
LEVELS = ("single", "multilevel")
EXECUTORS = ("sequential", "process")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ContractError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    """One experiment.  Every field has a default; see ``FIELD_HELP``."""

    dataset: str = "swissroll"
    n_per_class: int = 250
    test_per_class: int = 0
    mnist_train_images: str = ""
    mnist_train_labels: str = ""
    mnist_test_images: str = ""
    mnist_test_labels: str = ""
    mnist_limit: int = 0
    scheme: str = "verlet"
    layers: int = 32
    width: int = 0
    horizon: float = 10.0
    segments: int = 2
    splits: list = field(default_factory=list)
    mode: str = "serial"
    level: str = "single"
    coarse_iters: int = 20
    coarsen: int = 2
    coarse_lr: float = 0.2
    lr: float = 0.2
    lr_decay: float = 0.0
    weight_decay: float = 1e-4
    ridge: float = 1e-4
    window: int = 2048
    batch_size: int = 32
    epochs: int = 1
    rounds: int = 0
    seed: int = 0
    init_scale: float = 1.0
    executor: str = "sequential"
    processes: int = 0
    eval_every: int = 0
    out: str = "metrics.jsonl"

    def validate(self) -> None:
        for name, options in (("dataset", DATASETS), ("mode", MODES), ("level", LEVELS),
                              ("executor", EXECUTORS), ("scheme", ("euler", "verlet"))):
            if getattr(self, name) not in options:
                raise ConfigError(name, f"{getattr(self, name)!r} is not one of {options}")
        positive = ("n_per_class", "layers", "segments", "coarsen", "batch_size", "window")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        nonneg = ("test_per_class", "mnist_limit", "width", "coarse_iters", "lr_decay", "weight_decay",
                  "ridge", "epochs", "rounds", "processes", "eval_every")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be nonnegative")
        for name in ("lr", "coarse_lr", "horizon", "init_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.dataset == "mnist" and not (self.mnist_train_images and self.mnist_train_labels):
            raise ConfigError("mnist_train_images", "mnist needs train image and label paths")
        if self.scheme == "verlet" and self.width % 2:
            raise ConfigError("width", "verlet needs an even width")
        if self.mode == "serial":
            if self.level == "multilevel":
                raise ConfigError("level", "multilevel needs mode parallel or lockstep-oracle")
            return
        if self.segments < 2:
            raise ConfigError("segments", "parallel modes need at least 2 segments")
        if self.splits:
            if len(self.splits) != self.segments - 1:
                raise ConfigError("splits", f"need {self.segments - 1} splits for {self.segments} segments")
            if sorted(set(self.splits)) != list(self.splits) or self.splits[0] <= 0 \
                    or self.splits[-1] >= self.layers:
                raise ConfigError("splits", "must be strictly increasing and inside (0, layers)")
        elif self.layers % self.segments:
            raise ConfigError("segments", f"{self.layers} layers do not split into {self.segments} equal parts")
        if self.level == "multilevel":
            if self.layers % self.coarsen:
                raise ConfigError("coarsen", f"must divide layers ({self.layers})")
            splits = self.splits or [self.layers // self.segments * i for i in range(1, self.segments)]
            if any(s % self.coarsen for s in splits):
                raise ConfigError("splits", f"must be multiples of coarsen ({self.coarsen})")

    def resolved_width(self) -> int:
        if self.width:
            return self.width
        return 16 if self.dataset == "mnist" else 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_id(self) -> str:
        """Hash of every field except the output path."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


FIELD_HELP = {
    "dataset": "swissroll, ellipse or mnist",
    "n_per_class": "synthetic training samples per class",
    "test_per_class": "synthetic held-out samples per class (0: none)",
    "mnist_train_images": "IDX image file (optionally .gz)",
    "mnist_train_labels": "IDX label file",
    "mnist_test_images": "held-out IDX image file",
    "mnist_test_labels": "held-out IDX label file",
    "mnist_limit": "keep only the first N training images (0: all)",
    "scheme": "euler or verlet",
    "layers": "number of residual layers",
    "width": "state width (0: 4 for 2-D data, 16 for mnist)",
    "horizon": "final time; the step is horizon / layers",
    "segments": "number of segments K in parallel modes",
    "splits": "explicit split layers (default: equal segments)",
    "mode": "serial, parallel or lockstep-oracle",
    "level": "single or multilevel",
    "coarse_iters": "iterations of the coarse prediction phase",
    "coarsen": "coarsening factor between fine and coarse grids",
    "coarse_lr": "learning rate of the coarse phase",
    "lr": "learning rate eta0",
    "lr_decay": "eta_k = lr / (1 + k / lr_decay); 0 keeps it constant",
    "weight_decay": "weight of the per-layer squared-norm penalty",
    "ridge": "ridge parameter of the co-state regression",
    "window": "capacity of each (state, co-state) window",
    "batch_size": "mini-batch size",
    "epochs": "passes over the training set",
    "rounds": "if positive, overrides epochs with an exact round count",
    "seed": "seed for data, initialization and batch order",
    "init_scale": "scale of the random initial weights",
    "executor": "sequential or process",
    "processes": "worker processes (0: TIMEPAR_THREADS or the CPU count)",
    "eval_every": "evaluate accuracy every N rounds (0: only at the end)",
    "out": "metrics file (JSON Lines)",
}


def _coerce(name: str, value, kind):
    try:
        if kind is list:
            if isinstance(value, str):
                return [int(v) for v in value.split(",") if v.strip()]
            return [int(v) for v in value]
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError("expected an integer")
        if kind is int and isinstance(value, bool):
            raise ValueError("expected an integer")
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"cannot interpret {value!r}: {exc}") from None


_KINDS = {"int": int, "float": float, "str": str, "list": list}


def _field_kinds() -> dict:
    return {f.name: _KINDS[f.type] for f in fields(ExperimentConfig)}


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge TOML values and command-line overrides over the defaults, then validate."""
    kinds = _field_kinds()
    values = {}
    for source in (file_values or {}, overrides or {}):
        for name, value in source.items():
            if name not in kinds:
                raise ConfigError(name, "unknown field")
            if value is not None:
                values[name] = _coerce(name, value, kinds[name])
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    file_values = {}
    if path:
        try:
            with open(path, "rb") as fh:
                file_values = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"invalid TOML in {path}: {exc}") from None
    return build_config(file_values, overrides)


# -- running -------------------------------------------------------------------

def _load_data(cfg: ExperimentConfig):
    if cfg.dataset == "mnist":
        train = load_mnist_idx(cfg.mnist_train_images, cfg.mnist_train_labels)
        if cfg.mnist_limit:
            train = train.subset(slice(0, cfg.mnist_limit))
        test = None
        if cfg.mnist_test_images and cfg.mnist_test_labels:
            test = load_mnist_idx(cfg.mnist_test_images, cfg.mnist_test_labels)
        return train, test
    gen = gen_swissroll if cfg.dataset == "swissroll" else gen_ellipse
    train = gen(cfg.n_per_class, seed=cfg.seed)
    test = gen(cfg.test_per_class, seed=cfg.seed + 1, reference=train) if cfg.test_per_class else None
    return train, test


class MetricsWriter:
    """Single append-only writer; one JSON object per line."""

    def __init__(self, path):
        self.path = Path(path)
        if self.path.parent != Path(""):
            self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, list):
        return [_clean(v) for v in value]
    return value


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run ``cfg`` end to end, writing metrics to ``cfg.out``; returns the summary record."""
    cfg.validate()
    run_id = cfg.run_id()
    train, test = _load_data(cfg)
    spec = ModelSpec(scheme=cfg.scheme, width=cfg.resolved_width(), input_dim=train.input_dim,
                     n_classes=train.n_classes, horizon=cfg.horizon, n_layers=cfg.layers,
                     weight_decay=cfg.weight_decay)
    schedule = LearningRate(cfg.lr, cfg.lr_decay or None)
    stream = BatchStream(len(train), cfg.batch_size, cfg.seed)
    n_rounds = cfg.rounds or cfg.epochs * stream.per_epoch
    K = 1 if cfg.mode == "serial" else cfg.segments
    writer = MetricsWriter(cfg.out)
    writer.write({"type": "config", "run_id": run_id, "config": cfg.to_dict(), "K": K,
                  "n_rounds": n_rounds, "n_train": len(train)})

    def emit(rec):
        out = {"type": "round", "run_id": run_id, "round": rec.get("round", rec.get("iteration")),
               "loss": rec["loss"], "eta": rec["eta"],
               "segment_seconds": rec.get("segment_seconds", [rec.get("seconds")]),
               "fit_mse": rec.get("fit_mse", []), "epsilon": rec.get("epsilon", [])}
        for key in ("train_loss", "train_accuracy", "test_loss", "test_accuracy"):
            if key in rec:
                out[key] = rec[key]
        writer.write({k: _clean(v) for k, v in out.items()})

    try:
        t0 = time.perf_counter()
        prediction_seconds = 0.0
        if cfg.mode == "serial":
            controls = init_controls(spec, cfg.seed, cfg.init_scale)
            controls, recs = serial_train(spec, controls, train, stream, schedule, n_rounds,
                                          eval_every=cfg.eval_every)
            total = time.perf_counter() - t0
        else:
            plan = make_plan(spec, cfg.segments, cfg.splits or None,
                             cfg.coarsen if cfg.level == "multilevel" else 1)
            coarse = None
            init = None
            if cfg.level == "multilevel":
                coarse = CoarseConfig(cfg.coarsen, cfg.coarse_iters, cfg.coarse_lr)
            else:
                init = init_controls(spec, cfg.seed, cfg.init_scale)
            controls, metrics = parallel_train(
                spec, plan, train, schedule, n_rounds, seed=cfg.seed, batch_size=cfg.batch_size,
                controls=init, coarse=coarse,
                mode="lockstep" if cfg.mode == "lockstep-oracle" else "parallel",
                ridge=cfg.ridge, capacity=cfg.window, executor=cfg.executor,
                n_procs=cfg.processes or None, eval_every=cfg.eval_every, eval_data=test,
                init_scale=cfg.init_scale)
            recs = metrics["rounds"]
            total = metrics["total_seconds"]
            prediction_seconds = metrics["prediction_seconds"]
    except NumericError:
        writer.close()
        raise
    # records are written after the timed section so wall-clock covers compute only
    for rec in recs:
        emit(rec)
    train_loss, train_acc = evaluate(spec, controls, train)
    summary = {"type": "summary", "run_id": run_id, "rounds": n_rounds, "K": K,
               "total_seconds": total, "prediction_seconds": prediction_seconds,
               "train_loss": _clean(train_loss), "train_accuracy": train_acc,
               "controls_checksum": controls.checksum()}
    if test is not None:
        summary["test_loss"], summary["test_accuracy"] = evaluate(spec, controls, test)
        summary["test_loss"] = _clean(summary["test_loss"])
    writer.write(summary)
    writer.close()
    return summary


# -- reporting -----------------------------------------------------------------

def read_metrics(path) -> dict:
    """Parse a metrics file into ``{"path", "config", "rounds", "summary"}``."""
    run = {"path": str(path), "config": None, "rounds": [], "summary": None}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{n}: not valid JSON ({exc.msg})") from None
            kind = rec.get("type")
            if kind == "config":
                run["config"] = rec
            elif kind == "round":
                run["rounds"].append(rec)
            elif kind == "summary":
                run["summary"] = rec
    if run["config"] is None:
        raise ContractError(f"{path}: missing config record")
    if run["summary"] is None:
        raise ContractError(f"{path}: missing summary record (incomplete run?)")
    return run


def _group_key(run) -> tuple:
    c = run["config"]["config"]
    return (c["dataset"], c["n_per_class"] if c["dataset"] != "mnist" else c["mnist_train_images"],
            c["layers"], c["scheme"])


def compare_runs(runs: list) -> dict:
    """Speedup, efficiency and accuracy deltas of parsed runs.

    Runs are grouped by dataset, depth and scheme; each group is compared
    against its first serial run (or its first run when none is serial).
    Groups are never mixed, and more than one group is reported as a warning.
    """
    groups = {}
    for run in runs:
        groups.setdefault(_group_key(run), []).append(run)
    rows, warnings = [], []
    if len(groups) > 1:
        warnings.append("incompatible runs (different dataset/depth/scheme) compared only within groups: "
                        + "; ".join(f"{k[0]} {k[2]} layers {k[3]}: {len(v)} file(s)" for k, v in groups.items()))
    for key, members in groups.items():
        serial = [r for r in members if r["config"]["config"]["mode"] == "serial"]
        base = serial[0] if serial else members[0]
        if not serial:
            warnings.append(f"{key[0]} {key[2]} layers: no serial run; baseline is {base['path']}")
        base_wall = base["summary"]["total_seconds"]
        base_acc = base["summary"]["train_accuracy"]
        for run in members:
            c, s = run["config"]["config"], run["summary"]
            K = run["config"]["K"]
            wall = s["total_seconds"]
            speedup = base_wall / wall if wall > 0 else float("inf")
            rows.append({"path": run["path"], "dataset": key[0], "layers": key[2], "scheme": key[3],
                         "mode": c["mode"], "level": c["level"], "K": K, "seconds": wall,
                         "speedup": speedup, "efficiency": speedup / K,
                         "train_accuracy": s["train_accuracy"],
                         "accuracy_delta": s["train_accuracy"] - base_acc,
                         "baseline": base["path"]})
    series = {run["path"]: [r["fit_mse"][0] if r["fit_mse"] else None for r in run["rounds"]]
              for run in runs if run["config"]["config"]["mode"] == "parallel"}
    return {"rows": rows, "warnings": warnings, "mse_series": series}


def format_report(result: dict) -> str:
    lines = [f"WARNING: {w}" for w in result["warnings"]]
    head = f"{'file':<32} {'mode':<16} {'level':<10} {'K':>2} {'seconds':>9} {'speedup':>8} {'eff':>6} {'acc':>7} {'d_acc':>7}"
    lines.append(head)
    for r in result["rows"]:
        lines.append(f"{Path(r['path']).name:<32} {r['mode']:<16} {r['level']:<10} {r['K']:>2} "
                     f"{r['seconds']:>9.3f} {r['speedup']:>8.2f} {r['efficiency']:>6.2f} "
                     f"{r['train_accuracy']:>7.4f} {r['accuracy_delta']:>+7.4f}")
    if result["mse_series"]:
        lines.append("")
        lines.append("fit_mse at the first split, per round")
        names = list(result["mse_series"])
        lines.append("round," + ",".join(Path(n).name for n in names))
        length = max(len(v) for v in result["mse_series"].values())
        for k in range(length):
            vals = []
            for n in names:
                v = result["mse_series"][n]
                vals.append("" if k >= len(v) or v[k] is None else f"{v[k]:.6e}")
            lines.append(f"{k}," + ",".join(vals))
    return "\n".join(lines)


def compare_report(paths) -> str:
    return format_report(compare_runs([read_metrics(p) for p in paths]))


def write_rows_csv(result: dict, path) -> None:
    cols = ["path", "dataset", "layers", "scheme", "mode", "level", "K", "seconds", "speedup",
            "efficiency", "train_accuracy", "accuracy_delta", "baseline"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(result["rows"])


# -- entry point -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timepar", description="Layer-parallel ResNet training experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    tr = sub.add_parser("train", help="run one experiment")
    tr.add_argument("--config", help="TOML file with ExperimentConfig fields")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag] if flag == "--" + f.name else [flag, "--" + f.name]
        tr.add_argument(*names, dest=f.name, default=None, help=FIELD_HELP[f.name],
                        metavar=f.name.upper())
    rp = sub.add_parser("report", help="compare metrics files")
    rp.add_argument("files", nargs="+")
    rp.add_argument("--csv", help="also write the comparison table as CSV")
    gd = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    gd.add_argument("--dataset", required=True, choices=("swissroll", "ellipse"))
    gd.add_argument("--n", type=int, required=True, help="samples per class")
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
            cfg = load_config(args.config, overrides)
            summary = run_experiment(cfg)
            print(f"run {summary['run_id']}: {summary['rounds']} rounds, "
                  f"train accuracy {summary['train_accuracy']:.4f}, "
                  f"{summary['total_seconds']:.2f} s -> {cfg.out}")
        elif args.command == "report":
            result = compare_runs([read_metrics(p) for p in args.files])
            print(format_report(result))
            if args.csv:
                write_rows_csv(result, args.csv)
        else:
            if args.n < 1:
                print("timepar: error: --n must be at least 1", file=sys.stderr)
                return EXIT_CONFIG
            gen = gen_swissroll if args.dataset == "swissroll" else gen_ellipse
            gen(args.n, seed=args.seed).to_csv(args.out)
            print(f"wrote {2 * args.n} samples to {args.out}")
    except ConfigError as exc:
        print(f"timepar: config error in field {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"timepar: numeric failure at round {exc.iteration}: {exc.detail}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TimeParError, OSError) as exc:
        print(f"timepar: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
