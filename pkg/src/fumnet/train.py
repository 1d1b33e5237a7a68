"""Episodic meta-training, evaluation and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .episodes import QUERY_SIZE, Dataset, Episode, episode_stream, rng_stream
from .model import FumModel, ModelConfig
from .nn import softmax_cross_entropy
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

CUB_EPISODES = 60_000
MINI_IMAGENET_EPISODES = 120_000


# -- optimisation ------------------------------------------------------------
@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: list[Tensor], state: OptimizerState) -> bool:
    """One bias-corrected Adam update from each parameter's `.grad`.

    Moments are keyed by position in `params`, so pass the same list every
    call. Gradients are cleared afterwards. Returns False (and leaves the
    parameters alone) when any gradient is non-finite.
    """
    grads = [p.grad for p in params]
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        logger.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        for p in params:
            p.grad = None
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** state.step
    corr2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (state.learning_rate / corr1) * m / (np.sqrt(v / corr2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
        p.grad = None
    return True


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by `factor` after `patience` evaluations in a
    row without a strict improvement of the metric."""

    initial_lr: float = 0.001
    patience: int = 7
    factor: float = 0.9
    best: float = -math.inf
    counter: int = 0
    reductions: int = 0

    @property
    def learning_rate(self) -> float:
        return self.initial_lr * self.factor ** self.reductions

    def update(self, metric: float) -> float | None:
        """Feed one evaluation; returns the new learning rate when it changes."""
        if metric > self.best:
            self.best = metric
            self.counter = 0
            return None
        self.counter += 1
        if self.counter >= self.patience:
            self.counter = 0
            self.reductions += 1
            return self.learning_rate
        return None


def plateau_update(sched: PlateauSchedule, new_metric: float) -> float | None:
    return sched.update(new_metric)


# -- steps and evaluation ------------------------------------------------------
def episode_loss(model: FumModel, episode: Episode) -> tuple[Tensor, np.ndarray]:
    logits = model(episode)
    return softmax_cross_entropy(logits, episode.query_labels), logits.data


def train_step(model: FumModel, episode: Episode, opt: OptimizerState,
               params: list[Tensor] | None = None) -> float:
    """Mean query cross-entropy of one episode, followed by one Adam update."""
    if episode.n_way != model.config.n_way:
        raise ValueError(f"{episode.n_way}-way episode for a {model.config.n_way}-way model")
    model.train()
    params = params if params is not None else model.parameters()
    loss, _ = episode_loss(model, episode)
    backward(loss)
    adam_step(params, opt)
    return loss.item()


def episode_accuracy(model: FumModel, episode: Episode) -> float:
    with no_grad():
        scores = model(episode).data
    return float(np.mean(scores.argmax(axis=1) == episode.query_labels))


@dataclass
class EvalReport:
    accuracies: np.ndarray

    @property
    def episode_count(self) -> int:
        return len(self.accuracies)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95_halfwidth(self) -> float:
        return float(1.96 * np.std(self.accuracies) / math.sqrt(len(self.accuracies)))

    def summary(self) -> str:
        return f"accuracy: {100 * self.mean_accuracy:.2f}% ± {100 * self.ci95_halfwidth:.2f}"

    def to_dict(self) -> dict:
        return {
            "episode_count": self.episode_count,
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "accuracies": [float(a) for a in self.accuracies],
        }


def evaluate(model: FumModel, dataset: Dataset, n_way: int, k_shot: int, episodes: int = 600,
             seed: int = 0, query_size: int = QUERY_SIZE, stream: str = "eval") -> EvalReport:
    """Accuracy over `episodes` seeded episodes, model in eval mode."""
    was_training = model.training
    model.eval()
    try:
        accs = [episode_accuracy(model, ep) for ep in
                episode_stream(dataset, n_way, k_shot, query_size, seed, episodes, stream=stream)]
    finally:
        model.train(was_training)
    return EvalReport(np.asarray(accs))


# -- checkpoints --------------------------------------------------------------
MAGIC = b"FUMNETCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: dict
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])


def checkpoint_of(model: FumModel, meta: dict | None = None, extra_config: dict | None = None) -> Checkpoint:
    config = {"model": model.config.to_dict()} | (extra_config or {})
    state = {k: t.data.astype(np.float32, copy=True) for k, t in model.state().items()}
    return Checkpoint(config, state, dict(meta or {}))


def save_checkpoint(path, ckpt: Checkpoint | FumModel, meta: dict | None = None) -> Path:
    """Write magic, version, a JSON config blob and float32 little-endian records."""
    if isinstance(ckpt, FumModel):
        ckpt = checkpoint_of(ckpt, meta)
    path = Path(path)
    blob = json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(ckpt.state))]
    for name, arr in ckpt.state.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes); unsupported format version")
    r.pos = len(MAGIC)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (blob_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(blob_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config blob") from exc
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Checkpoint(header["config"], state, header.get("meta", {}))


def load_state(model: FumModel, ckpt: Checkpoint) -> FumModel:
    """Copy checkpoint tensors into `model`, checking names and shapes."""
    current = model.state()
    missing = sorted(set(current) - set(ckpt.state))
    unexpected = sorted(set(ckpt.state) - set(current))
    if missing or unexpected:
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, t in current.items():
        arr = ckpt.state[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {t.shape}")
    for name, t in current.items():
        t.data = ckpt.state[name].astype(t.dtype, copy=True)
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> FumModel:
    return load_state(FumModel(ckpt.model_config, 0), ckpt)


# -- meta-training ------------------------------------------------------------
@dataclass
class TrainRun:
    model_config: ModelConfig
    train: Dataset
    val: Dataset
    k_shot: int = 1
    query_size: int = QUERY_SIZE
    episodes: int = 2000
    eval_interval: int = 500
    eval_episodes: int = 100
    seed: int = 0
    learning_rate: float = 0.001
    out_dir: Path | None = None
    workers: int = 0
    extra_config: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    best: Checkpoint
    model: FumModel
    metrics: list[dict]
    checkpoint_path: Path | None = None


def meta_train(run: TrainRun, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on seeded episodes, validating every `eval_interval` episodes.

    Each validation reuses the same seeded episodes, feeds the plateau
    schedule and, on strict improvement, replaces the best checkpoint. One
    metrics record is written per validation (plus one for a trailing partial
    interval).
    """
    cfg = run.model_config
    n_way = cfg.n_way
    run.train.validate(n_way, run.k_shot, run.query_size)
    run.val.validate(n_way, run.k_shot, run.query_size)
    model = FumModel(cfg, rng_stream(run.seed, "init"))
    params = model.parameters()
    opt = OptimizerState(learning_rate=run.learning_rate)
    sched = PlateauSchedule(initial_lr=run.learning_rate)
    out_dir = Path(run.out_dir) if run.out_dir else None
    metrics_file = None
    ckpt_path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w")
        ckpt_path = out_dir / "best.ckpt"
    run_config = {
        "k_shot": run.k_shot, "query_size": run.query_size, "episodes": run.episodes,
        "eval_interval": run.eval_interval, "eval_episodes": run.eval_episodes, "seed": run.seed,
        "learning_rate": run.learning_rate, "adam": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
    } | run.extra_config
    metrics: list[dict] = []
    best: Checkpoint | None = None
    best_acc = -math.inf
    losses: list[float] = []
    start = time.perf_counter()
    try:
        episodes = episode_stream(run.train, n_way, run.k_shot, run.query_size, run.seed,
                                  run.episodes, stream="sampler", workers=run.workers)
        for i, ep in enumerate(episodes, start=1):
            losses.append(train_step(model, ep, opt, params))
            if i % run.eval_interval and i != run.episodes:
                continue
            report = evaluate(model, run.val, n_way, run.k_shot, run.eval_episodes,
                              seed=run.seed, query_size=run.query_size, stream="val")
            acc = report.mean_accuracy
            record = {
                "episode_index": i,
                "train_loss": float(np.mean(losses)),
                "eval_accuracy": acc,
                "ci95": report.ci95_halfwidth,
                "learning_rate": opt.learning_rate,
                "wall_time_ms": int(1000 * (time.perf_counter() - start)),
            }
            losses = []
            new_lr = sched.update(acc)
            if new_lr is not None:
                opt.learning_rate = new_lr
            if acc > best_acc:
                best_acc = acc
                best = checkpoint_of(model, {"episode_index": i, "val_accuracy": acc}, run_config)
                if ckpt_path:
                    save_checkpoint(ckpt_path, best)
            metrics.append(record)
            if metrics_file:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if progress:
                progress(record)
    finally:
        if metrics_file:
            metrics_file.close()
    if best is None:
        raise RuntimeError("training finished without a validation pass")
    final = load_state(FumModel(cfg, 0), best)
    return TrainResult(best, final, metrics, ckpt_path)
