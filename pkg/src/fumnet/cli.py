"""Command-line driver: train, eval, gradcheck and gen-synthetic.

Settings are layered: built-in defaults, then the named ``--preset``, then a
flat JSON ``--config`` file, then explicit flags. Exit codes: 0 success,
1 runtime or check failure, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checks import format_table, run_battery
from .episodes import (
    DatasetError,
    generate_synthetic_dataset,
    load_folder_dataset,
    prepare_dataset,
    save_folder_dataset,
    split_counts,
    split_dataset,
)
from .model import PRESETS, VARIANTS, ModelConfig
from .train import CheckpointError, TrainRun, evaluate, load_checkpoint, meta_train, model_from_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

DEFAULTS = {
    "dataset": "synthetic",
    "train_split": None,
    "val_split": None,
    "test_split": None,
    "num_classes": 30,
    "samples_per_class": 40,
    "noise_sigma": 0.1,
    "n_way": 5,
    "k_shot": 1,
    "query_size": 16,
    "variant": "proposed",
    "preset": "full",
    "episodes": 60_000,
    "eval_interval": 500,
    "eval_episodes": 100,
    "seed": 0,
    "learning_rate": 0.001,
    "filter_sizes": [16, 32],
    "k": 2,
    "c": 64,
    "d": 64,
    "h_sq": 128,
    "h1": 256,
    "h2": 128,
    "out_dir": "runs/train",
    "workers": 0,
}
DATA_KEYS = ("dataset", "train_split", "val_split", "test_split", "num_classes",
             "samples_per_class", "noise_sigma", "seed")
MODEL_KEYS = ("k", "c", "d", "filter_sizes", "h_sq", "h1", "h2", "variant", "n_way")


class UsageError(Exception):
    pass


# -- argument parsing -----------------------------------------------------------
def _flag(parser, name: str, default=None, **kw):
    """Add --name whose absence leaves the attribute unset, so layering works."""
    shown = default if default is not None else DEFAULTS.get(name.replace("-", "_"))
    if isinstance(shown, list):
        shown = " ".join(map(str, shown))
    help_text = kw.pop("help", "")
    parser.add_argument(f"--{name}", default=argparse.SUPPRESS,
                        help=f"{help_text} (default: {shown})".strip(), **kw)


def _data_flags(p) -> None:
    _flag(p, "dataset", help="'synthetic' or a folder with one directory per class")
    _flag(p, "train-split", "<dataset>/train.txt", help="split file listing training classes")
    _flag(p, "val-split", "<dataset>/val.txt", help="split file listing validation classes")
    _flag(p, "test-split", "<dataset>/test.txt", help="split file listing test classes")
    _flag(p, "num-classes", type=int, help="synthetic classes, split 2/3 train, 1/6 val, rest test")
    _flag(p, "samples-per-class", type=int, help="synthetic images per class")
    _flag(p, "noise-sigma", type=float, help="synthetic pixel noise")
    _flag(p, "seed", type=int, help="root seed for data, init, sampling and evaluation")
    _flag(p, "k-shot", type=int, help="support images per class")
    _flag(p, "query-size", type=int, help="query images per episode")
    _flag(p, "config", None, help="flat JSON file of settings; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fumnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="meta-train a model on episodes")
    _data_flags(tr)
    _flag(tr, "n-way", type=int, help="classes per episode")
    _flag(tr, "variant", choices=VARIANTS, help="sequence module architecture")
    _flag(tr, "preset", choices=sorted(PRESETS), help="named width preset applied before the config file")
    _flag(tr, "episodes", type=int, help="training episode budget")
    _flag(tr, "eval-interval", type=int, help="episodes between validation passes")
    _flag(tr, "eval-episodes", type=int, help="episodes per validation pass")
    _flag(tr, "learning-rate", type=float, help="initial Adam learning rate")
    _flag(tr, "filter-sizes", type=int, nargs="+", help="growth per block of each module")
    _flag(tr, "k", type=int, help="causal kernel size and dilation base")
    _flag(tr, "c", type=int, help="channels of the feature map (sequence length)")
    _flag(tr, "d", type=int, help="values per channel vector")
    _flag(tr, "h-sq", type=int, help="hidden width of the channel squeeze network")
    _flag(tr, "h1", type=int, help="first hidden width of the prediction head")
    _flag(tr, "h2", type=int, help="second hidden width of the prediction head")
    _flag(tr, "out-dir", help="directory for best.ckpt and metrics.jsonl")
    _flag(tr, "workers", type=int, help="episode producer threads (0 samples inline)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on test episodes")
    ev.add_argument("checkpoint", help="path to a checkpoint written by train")
    _data_flags(ev)
    ev.add_argument("--episodes", type=int, default=600, help="test episodes (default: 600)")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test",
                    help="split to evaluate (default: test)")
    ev.add_argument("--report", default=None,
                    help="report path stem (default: eval_report next to the checkpoint)")

    gc = sub.add_parser("gradcheck", help="run the gradient, causality and shape battery")
    gc.add_argument("--seed", type=int, default=0, help="seed for random test inputs (default: 0)")
    gc.add_argument("--inject-fault", choices=("none", "padding"), default="none",
                    help="deliberately break a kernel to see the battery fail (default: none)")

    gs = sub.add_parser("gen-synthetic", help="write a synthetic dataset as a class folder tree")
    gs.add_argument("out", help="output directory")
    gs.add_argument("--num-classes", type=int, default=30, help="number of classes (default: 30)")
    gs.add_argument("--samples-per-class", type=int, default=40, help="images per class (default: 40)")
    gs.add_argument("--noise-sigma", type=float, default=0.1, help="pixel noise (default: 0.1)")
    gs.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")
    return parser


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a flat JSON object")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return data


def resolve(args: argparse.Namespace, base: dict | None = None) -> dict:
    """Merge defaults, `base`, preset, config file and explicit flags."""
    given = {k: v for k, v in vars(args).items() if k in DEFAULTS}
    from_file = load_config_file(args.config) if getattr(args, "config", None) else {}
    user = {**(base or {}), **from_file, **given}
    preset = user.get("preset", DEFAULTS["preset"])
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = {**DEFAULTS, **PRESETS[preset], **user}
    cfg["filter_sizes"] = list(cfg["filter_sizes"])
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    positive = ("n_way", "k_shot", "query_size", "episodes", "eval_interval", "eval_episodes",
                "c", "d", "h_sq", "h1", "h2", "num_classes", "samples_per_class")
    for key in positive:
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise UsageError(f"{key} must be a positive integer, got {cfg[key]!r}")
    if cfg["n_way"] < 2:
        raise UsageError("n_way must be at least 2")
    if not isinstance(cfg["k"], int) or cfg["k"] < 2:
        raise UsageError(f"k must be an integer >= 2, got {cfg['k']!r}")
    if not (isinstance(cfg["learning_rate"], (int, float)) and cfg["learning_rate"] > 0):
        raise UsageError("learning_rate must be positive")
    if cfg["noise_sigma"] < 0:
        raise UsageError("noise_sigma must be non-negative")
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"variant must be one of {', '.join(VARIANTS)}")
    fs = cfg["filter_sizes"]
    if len(fs) != 2 or any(not isinstance(f, int) or f < 1 for f in fs):
        raise UsageError(f"filter_sizes must be two positive integers, got {fs}")
    if cfg["workers"] < 0:
        raise UsageError("workers must be >= 0")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})


def load_splits(cfg: dict, names=("train", "val", "test")) -> dict:
    """Preprocessed datasets for the requested splits."""
    if cfg["dataset"] == "synthetic":
        try:
            full = generate_synthetic_dataset(cfg["num_classes"], cfg["samples_per_class"],
                                              cfg["noise_sigma"], seed=cfg["seed"])
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc
        parts = split_dataset(full, split_counts(cfg["num_classes"]))
        return {n: prepare_dataset(parts[n]) for n in names}
    root = Path(cfg["dataset"])
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    out = {}
    for name in names:
        split_file = cfg[f"{name}_split"] or root / f"{name}.txt"
        if not Path(split_file).is_file():
            raise DatasetError(f"missing split file {split_file}")
        out[name] = prepare_dataset(load_folder_dataset(root, split_file, name))
    return out


# -- commands -------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = resolve(args)
    mcfg = model_config(cfg)
    data = load_splits(cfg, ("train", "val"))
    for name, ds in data.items():
        ds.validate(cfg["n_way"], cfg["k_shot"], cfg["query_size"])
    run = TrainRun(mcfg, data["train"], data["val"], k_shot=cfg["k_shot"], query_size=cfg["query_size"],
                   episodes=cfg["episodes"], eval_interval=cfg["eval_interval"],
                   eval_episodes=cfg["eval_episodes"], seed=cfg["seed"],
                   learning_rate=cfg["learning_rate"], out_dir=Path(cfg["out_dir"]),
                   workers=cfg["workers"], extra_config={"run": cfg})
    Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
    (Path(cfg["out_dir"]) / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    def progress(rec):
        print(f"episode {rec['episode_index']:>6}  loss {rec['train_loss']:.4f}  "
              f"val {100 * rec['eval_accuracy']:.2f}% ± {100 * rec['ci95']:.2f}  "
              f"lr {rec['learning_rate']:.6g}", flush=True)

    result = meta_train(run, progress)
    best = result.best.meta
    print(f"best validation accuracy: {100 * best['val_accuracy']:.2f}% "
          f"at episode {best['episode_index']}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from exc
    recorded = ckpt.config.get("run", {})
    cfg = resolve(args, {k: recorded[k] for k in (*DATA_KEYS, "query_size", "k_shot") if k in recorded})
    if args.episodes < 1:
        raise UsageError("--episodes must be positive")
    model = model_from_checkpoint(ckpt)
    n_way = model.config.n_way
    data = load_splits(cfg, (args.split,))[args.split]
    data.validate(n_way, cfg["k_shot"], cfg["query_size"])
    report = evaluate(model, data, n_way, cfg["k_shot"], args.episodes,
                      seed=cfg["seed"], query_size=cfg["query_size"], stream="test")
    print(report.summary())
    stem = Path(args.report) if args.report else Path(args.checkpoint).parent / "eval_report"
    stem.parent.mkdir(parents=True, exist_ok=True)
    record = report.to_dict() | {"checkpoint": str(args.checkpoint), "split": args.split,
                                 "n_way": n_way, "k_shot": cfg["k_shot"], "seed": cfg["seed"]}
    stem.with_suffix(".json").write_text(json.dumps(record, indent=2) + "\n")
    stem.with_suffix(".txt").write_text(
        f"{report.summary()}\nepisodes: {report.episode_count}\nsplit: {args.split}\n"
        f"{n_way}-way {cfg['k_shot']}-shot, seed {cfg['seed']}\ncheckpoint: {args.checkpoint}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_battery(seed=args.seed, inject_fault=args.inject_fault)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.num_classes < 1 or args.samples_per_class < 1:
        raise UsageError("need --num-classes >= 1 and --samples-per-class >= 1")
    if args.noise_sigma < 0:
        raise UsageError("--noise-sigma must be non-negative")
    ds = generate_synthetic_dataset(args.num_classes, args.samples_per_class, args.noise_sigma,
                                    seed=args.seed, check_sizes=False)
    paths = save_folder_dataset(ds, args.out)
    print(f"wrote {len(ds)} classes x {args.samples_per_class} images to {args.out}; "
          f"splits: {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "gen-synthetic": cmd_gen_synthetic}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fumnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"fumnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"fumnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
