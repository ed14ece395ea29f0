"""Command-line entry point: ``asl {gen-data,search,train,eval,export-curve}``.

Every command resolves its settings as built-in defaults, then an optional
``--config`` JSON file, then explicit flags. ``--dump-config`` prints the
resolved settings as JSON (a valid ``--config`` file) and exits.

Exit codes: 0 success, 2 usage / validation / I/O, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import curves
from .data import SceneParams, gen_dataset, read_dataset, write_dataset
from .errors import ConfigError, DomainError, NumericError, ParseError
from .metrics import ALL_METRICS, MetricId
from .net import (
    TrainSchedule, evaluate, load_checkpoint, model_init, save_checkpoint, train,
)
from .search import SearchConfig, run_search
from .seeding import subseed
from .surrogate import LossSpec, combined, naive_loss_and_grad

EXIT_USAGE = 2
EXIT_NUMERIC = 3

METRIC_NAMES = [m.value for m in ALL_METRICS]

# Defaults per command. Keys are the config-file keys; flags map onto them.
DEFAULTS = {
    "gen-data": dict(seed=0, count=100, size=16, classes=3, imbalance=0.1, noise=0.4, blur=True, out=None),
    "search": dict(data=None, out=".", metric="miou", tolerance=None, family="bezier", segments=None,
                   steps=10, samples=8, sigma=0.2, epsilon=0.1, update_steps=100, update_lr=0.02,
                   hidden=16, iterations=100, batch_size=8, lr=0.1, seed=0, strategy="ppo2",
                   jobs=None, timing=False),
    "train": dict(loss=None, weights=None, data=None, out=".", hidden=16, iterations=200, batch_size=8,
                  lr=0.1, seed=0, eval_count=40),
    "eval": dict(checkpoint=None, data=None, metric="miou", tolerance=None, split="all"),
    "export-curve": dict(loss=None, out=".", points=1001),
}
REQUIRED = {
    "gen-data": ("out",),
    "search": ("data",),
    "train": ("loss", "data"),
    "eval": ("checkpoint", "data"),
    "export-curve": ("loss",),
}


class CLIError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


# -- parsing ------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS  # unset flags stay absent, so config-file values survive

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_, argument_default=S)
        c.add_argument("--config", help="JSON file with settings; flags override it")
        c.add_argument("--dump-config", action="store_true", help="print resolved settings and exit")
        return c

    g = cmd("gen-data", "write a synthetic dataset directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--imbalance", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--blur", action=argparse.BooleanOptionalAction)
    g.add_argument("--out")

    s = cmd("search", "search surrogate-loss parameters")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--metric", choices=METRIC_NAMES)
    s.add_argument("--tolerance", type=int)
    s.add_argument("--family", choices=list(curves.FAMILIES))
    s.add_argument("--segments", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--update-steps", type=int)
    s.add_argument("--update-lr", type=float)
    s.add_argument("--hidden", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--strategy", choices=["ppo2", "random"])
    s.add_argument("--jobs", type=int, help="concurrent candidate trainings (default: $ASL_JOBS or 1)")
    s.add_argument("--timing", action=argparse.BooleanOptionalAction,
                   help="record wall-clock ms per step (makes the trajectory non-reproducible)")

    t = cmd("train", "train with one or two loss files and report all metrics")
    t.add_argument("--loss", action="append",
                   help="LossSpec JSON path, or naive:<metric> for the plain arithmetic extension")
    t.add_argument("--weights", help="comma-separated weights when two losses are given")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--hidden", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-count", type=int)

    e = cmd("eval", "score a checkpoint on a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--metric", choices=METRIC_NAMES)
    e.add_argument("--tolerance", type=int)
    e.add_argument("--split", choices=["train", "holdout", "all"])

    x = cmd("export-curve", "write one (y, g) CSV per operator slot")
    x.add_argument("--loss")
    x.add_argument("--out")
    x.add_argument("--points", type=int)
    return p


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CLIError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CLIError(f"config {path} must be a JSON object")
    return data


def resolve_config(argv) -> tuple[str, dict, bool]:
    """Parse argv into (command, settings, dump_only); unknown config keys are rejected."""
    ns = vars(_parser().parse_args(argv))
    command = ns.pop("command")
    dump = ns.pop("dump_config", False)
    cfg = dict(DEFAULTS[command])
    path = ns.pop("config", None)
    if path is not None:
        file_cfg = _load_config_file(path)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise CLIError(f"unknown config keys for {command}: {unknown}")
        cfg.update(file_cfg)
    cfg.update(ns)
    if command == "search" and cfg["jobs"] is None:
        env = os.environ.get("ASL_JOBS")
        try:
            cfg["jobs"] = int(env) if env else 1
        except ValueError as exc:
            raise CLIError(f"ASL_JOBS must be an integer, got {env!r}") from exc
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise CLIError(f"{command}: missing required setting(s) {', '.join('--' + k for k in missing)}")
    _validate(command, cfg)
    return command, cfg, dump


def _validate(command, cfg):
    """Build the typed records once so range errors surface at parse time."""
    if command == "gen-data":
        _scene_params(cfg)
        if cfg["count"] < 4:
            raise ConfigError(f"count must be >= 4, got {cfg['count']}")
    elif command == "search":
        _search_config(cfg)
        if cfg["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
    elif command == "train":
        _schedule(cfg)
        _weights(cfg)
        if cfg["eval_count"] < 4 or cfg["hidden"] < 1:
            raise ConfigError("eval_count must be >= 4 and hidden >= 1")
    elif command == "eval":
        MetricId.of(cfg["metric"], cfg["tolerance"])
    elif command == "export-curve":
        if cfg["points"] < 2:
            raise ConfigError("points must be >= 2")


def _scene_params(cfg) -> SceneParams:
    return SceneParams(cfg["size"], cfg["classes"], cfg["imbalance"], cfg["noise"], cfg["blur"])


def _schedule(cfg, seed=0) -> TrainSchedule:
    return TrainSchedule(iterations=cfg["iterations"], batch_size=cfg["batch_size"],
                         lr_initial=cfg["lr"], seed=seed)


def _search_config(cfg) -> SearchConfig:
    segments = cfg["segments"] or curves.DEFAULT_SEGMENTS.get(cfg["family"], 2)
    return SearchConfig(metric=cfg["metric"], tolerance_px=cfg["tolerance"], family=cfg["family"],
                        n_segments=segments, steps=cfg["steps"], samples=cfg["samples"],
                        sigma=cfg["sigma"], epsilon=cfg["epsilon"],
                        inner_update_steps=cfg["update_steps"], inner_update_lr=cfg["update_lr"],
                        hidden=cfg["hidden"], schedule=_schedule(cfg), master_seed=cfg["seed"])


def _weights(cfg):
    losses = cfg["loss"]
    if isinstance(losses, str):
        losses = cfg["loss"] = [losses]
    if not 1 <= len(losses) <= 2:
        raise ConfigError("train takes one or two --loss files")
    w = cfg["weights"]
    if w is None:
        if len(losses) == 2:
            raise ConfigError("two losses need --weights")
        return [1.0]
    try:
        vals = [float(x) for x in w.split(",")] if isinstance(w, str) else [float(x) for x in w]
    except ValueError as exc:
        raise ConfigError(f"bad --weights {w!r}") from exc
    if len(vals) != len(losses):
        raise ConfigError(f"{len(losses)} losses but {len(vals)} weights")
    return vals


# -- commands ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"file not found: {p}")
    return p.read_bytes()


def _load_dataset(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise CLIError(f"dataset not found: {exc}") from exc


def cmd_gen_data(cfg) -> int:
    split = gen_dataset(cfg["seed"], cfg["count"], _scene_params(cfg))
    write_dataset(split, cfg["out"])
    print(f"wrote {len(split.train)} train + {len(split.hold_out)} holdout scenes "
          f"(seed {cfg['seed']}) to {cfg['out']}")
    return 0


def cmd_search(cfg) -> int:
    config = _search_config(cfg)
    dataset = _load_dataset(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / "trajectory.jsonl"
    traj_path.write_text("")

    def on_step(rec):
        with traj_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"step {rec['t']}: mean {rec['mean_score']:.4f} max {rec['max_score']:.4f}", file=sys.stderr)

    result = run_search(config, dataset, jobs=cfg["jobs"], strategy=cfg["strategy"],
                        on_step=on_step, timing=cfg["timing"])
    (out / "loss.json").write_text(result.best_spec.to_json(seed=cfg["seed"]))
    print(f"best step {result.best_step} ({result.trainings} trainings); wrote {out / 'loss.json'}")
    return 0


def _load_loss(ref) -> LossSpec | str:
    if ref.startswith("naive:"):
        return ref
    try:
        return LossSpec.from_json(_read_bytes(ref).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"loss file {ref} is not text") from exc


def cmd_train(cfg) -> int:
    weights = _weights(cfg)
    specs = [_load_loss(r) for r in cfg["loss"]]
    loss_fn = None
    if isinstance(specs[0], str):
        if len(specs) > 1:
            raise ConfigError("naive:<metric> cannot be combined with another loss")
        spec = MetricId.of(specs[0].split(":", 1)[1])
        loss_fn = naive_loss_and_grad
    elif len(specs) == 2:
        if isinstance(specs[1], str):
            raise ConfigError("naive:<metric> cannot be combined with another loss")
        spec = combined(specs[0], specs[1], *weights)
    else:
        spec = specs[0]
    dataset = _load_dataset(cfg["data"])
    seed = cfg["seed"]
    p = dataset.params
    net = model_init(subseed(seed, "init"), p.num_features, cfg["hidden"], p.num_classes)
    net = train(net, *dataset.arrays("all"), spec, _schedule(cfg, subseed(seed, "batches")), loss_fn=loss_fn)
    eval_seed = subseed(seed, "evalset")
    evalset = gen_dataset(eval_seed, cfg["eval_count"], p)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(evalset, out / "evalset")
    (out / "model.asln").write_bytes(save_checkpoint(net))
    x, y = evalset.arrays("all")
    scores = {m.value: evaluate(net, x, y, MetricId.of(m.value)) for m in ALL_METRICS}
    report = {"seed": seed, "eval_seed": eval_seed, "eval_count": cfg["eval_count"],
              "losses": cfg["loss"], "weights": weights, "metrics": scores}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, v in scores.items():
        print(f"{name} {v:.6f}")
    return 0


def cmd_eval(cfg) -> int:
    net = load_checkpoint(_read_bytes(cfg["checkpoint"]))
    dataset = _load_dataset(cfg["data"])
    if net.dims[0] != dataset.params.num_features or net.dims[2] != dataset.params.num_classes:
        raise ConfigError(f"checkpoint dims {net.dims} do not match dataset "
                          f"({dataset.params.num_features} features, {dataset.params.num_classes} classes)")
    x, y = dataset.arrays(cfg["split"])
    print(f"{evaluate(net, x, y, MetricId.of(cfg['metric'], cfg['tolerance'])):.6f}")
    return 0


def cmd_export_curve(cfg) -> int:
    spec = LossSpec.from_json(_read_bytes(cfg["loss"]).decode("utf-8"))
    slots = list(spec.slots) + (list(spec.combine[0].slots) if spec.combine else [])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for k, slot in enumerate(slots):
        (out / f"slot_{k}.csv").write_text(curves.curve_csv(slot.curve, cfg["points"]))
    print(f"wrote {len(slots)} curve file(s) to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-curve": cmd_export_curve,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg, dump = resolve_config(argv)
        if dump:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        return COMMANDS[command](cfg)
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except CLIError as exc:
        print(f"asl: error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"asl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, ParseError) as exc:
        print(f"asl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"asl: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
