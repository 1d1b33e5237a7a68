import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fumnet.checks import TINY
from fumnet.episodes import generate_synthetic_dataset, split_dataset
from fumnet.model import FumModel, ModelConfig
from fumnet.tensor import Tensor, precision
from fumnet.train import (
    CUB_EPISODES,
    MINI_IMAGENET_EPISODES,
    CheckpointError,
    EvalReport,
    OptimizerState,
    PlateauSchedule,
    TrainRun,
    adam_step,
    checkpoint_of,
    evaluate,
    load_checkpoint,
    load_state,
    meta_train,
    model_from_checkpoint,
    plateau_update,
    save_checkpoint,
    train_step,
)

ORACLES = np.load(Path(__file__).parent / "data" / "oracles.npz")


def tiny_splits(seed=0):
    ds = generate_synthetic_dataset(8, 6, 0.1, seed=seed, size=TINY["image_size"], check_sizes=False)
    return split_dataset(ds, (4, 2, 2))


# -- Adam -------------------------------------------------------------------------
def test_adam_matches_reference_trajectory():
    with precision(np.float64):
        p = Tensor(ORACLES["adam.p0"], requires_grad=True)
        state = OptimizerState()
        for g in ORACLES["adam.grads"]:
            p.grad = g.copy()
            assert adam_step([p], state)
    assert np.allclose(p.data, ORACLES["adam.p3"], rtol=0, atol=1e-12)


def test_adam_first_step_moves_by_learning_rate():
    with precision(np.float64):
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.array([1.0])
        adam_step([p], OptimizerState())
    assert p.data[0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    adam_step([p], OptimizerState())
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_skips_non_finite_gradients(caplog):
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([3.0], requires_grad=True)
    p.grad, q.grad = np.array([np.nan, 1.0]), np.array([1.0])
    state = OptimizerState()
    assert not adam_step([p, q], state)
    assert p.data.tolist() == [1.0, 2.0] and q.data.tolist() == [3.0]
    assert state.step == 0 and state.skipped == 1 and p.grad is None
    assert "non-finite" in caplog.text


# -- plateau schedule -----------------------------------------------------------------
def test_seven_stagnant_evaluations_cut_rate():
    sched = PlateauSchedule()
    sched.update(0.5)
    changes = [plateau_update(sched, 0.5) for _ in range(7)]
    assert changes[:6] == [None] * 6 and changes[6] == pytest.approx(0.0009)


def test_improvement_resets_patience():
    sched = PlateauSchedule()
    sched.update(0.5)
    for _ in range(6):
        sched.update(0.4)
    assert sched.update(0.6) is None
    assert all(sched.update(0.6) is None for _ in range(6))
    assert sched.learning_rate == 0.001


def test_monotone_metrics_never_cut():
    sched = PlateauSchedule()
    assert all(sched.update(m) is None for m in np.linspace(0.2, 0.9, 50))


@given(st.integers(0, 12))
def test_rate_after_m_reductions(m):
    sched = PlateauSchedule()
    sched.update(1.0)
    for _ in range(7 * m):
        sched.update(0.0)
    assert sched.reductions == m
    assert sched.learning_rate == pytest.approx(0.001 * 0.9 ** m, rel=1e-12)


# -- evaluation ---------------------------------------------------------------------
def test_eval_report_interval():
    rep = EvalReport(np.array([0.5, 0.7, 0.6, 0.6]))
    assert rep.mean_accuracy == pytest.approx(0.6)
    assert rep.ci95_halfwidth == pytest.approx(1.96 * np.std([0.5, 0.7, 0.6, 0.6]) / 2)
    assert rep.summary() == "accuracy: 60.00% ± 6.93"
    assert rep.to_dict()["episode_count"] == 4


def test_evaluate_is_deterministic_and_bounded():
    splits = tiny_splits()
    model = FumModel(ModelConfig(**TINY), 0)
    a = evaluate(model, splits["test"], 2, 1, episodes=20, seed=3, query_size=4)
    b = evaluate(model, splits["test"], 2, 1, episodes=20, seed=3, query_size=4)
    assert np.array_equal(a.accuracies, b.accuracies)
    assert np.all((a.accuracies >= 0) & (a.accuracies <= 1)) and a.episode_count == 20
    assert model.training


def test_train_step_rejects_wrong_way():
    from fumnet.checks import tiny_episode

    model = FumModel(ModelConfig(**TINY), 0)
    ep = tiny_episode(ModelConfig(**{**TINY, "n_way": 3}), np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_step(model, ep, OptimizerState())


# -- checkpoints --------------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model = FumModel(ModelConfig(**TINY), 3)
    model.features.norms[0].running_mean.data[:] = 0.25
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"episode_index": 7})
    ckpt = load_checkpoint(path)
    assert ckpt.meta == {"episode_index": 7} and ckpt.model_config == model.config
    again = model_from_checkpoint(ckpt)
    for name, t in model.state().items():
        assert np.array_equal(again.state()[name].data, t.data), name
    save_checkpoint(tmp_path / "m2.ckpt", checkpoint_of(again, {"episode_index": 7}))
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"NOTACKPT" + b[8:], "magic"),
    (lambda b: b[:8] + (2).to_bytes(4, "little") + b[12:], "version 2"),
    (lambda b: b[:-10], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_checkpoints_rejected(tmp_path, mutate, message):
    path = save_checkpoint(tmp_path / "m.ckpt", FumModel(ModelConfig(**TINY), 0))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_shape_mismatch_names_the_tensor(tmp_path):
    five = FumModel(ModelConfig(**{**TINY, "n_way": 5}), 0)
    ten = FumModel(ModelConfig(**{**TINY, "n_way": 10}), 0)
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", five))
    with pytest.raises(CheckpointError, match="shape mismatch for modules.0.blocks.0"):
        load_state(ten, ckpt)


# -- meta-training ------------------------------------------------------------------
@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    splits = tiny_splits()
    out = tmp_path_factory.mktemp("run")
    run = TrainRun(ModelConfig(**TINY), splits["train"], splits["val"], query_size=4, episodes=200,
                   eval_interval=40, eval_episodes=10, out_dir=out)
    seen = []
    return meta_train(run, progress=seen.append), out, seen


def test_meta_train_writes_checkpoint_and_metrics(tiny_run):
    result, out, seen = tiny_run
    assert (out / "best.ckpt").exists() and result.checkpoint_path == out / "best.ckpt"
    lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["episode_index"] for r in lines] == [40, 80, 120, 160, 200]
    assert lines == seen == result.metrics
    assert set(lines[0]) == {"episode_index", "train_loss", "eval_accuracy", "ci95",
                             "learning_rate", "wall_time_ms"}
    assert all(math.isfinite(r["train_loss"]) for r in lines)


def test_best_checkpoint_is_first_maximum(tiny_run):
    result, out, _ = tiny_run
    accs = [r["eval_accuracy"] for r in result.metrics]
    best = load_checkpoint(out / "best.ckpt")
    assert best.meta["val_accuracy"] == max(accs)
    assert best.meta["episode_index"] == result.metrics[accs.index(max(accs))]["episode_index"]


def test_best_checkpoint_reproduces_its_validation_score(tiny_run):
    result, out, _ = tiny_run
    splits = tiny_splits()
    model = model_from_checkpoint(load_checkpoint(out / "best.ckpt"))
    rep = evaluate(model, splits["val"], 2, 1, episodes=10, seed=0, query_size=4, stream="val")
    assert rep.mean_accuracy == result.best.meta["val_accuracy"]


def test_meta_train_is_reproducible(tiny_run, tmp_path):
    result, _, _ = tiny_run
    splits = tiny_splits()
    run = TrainRun(ModelConfig(**TINY), splits["train"], splits["val"], query_size=4, episodes=200,
                   eval_interval=40, eval_episodes=10, out_dir=tmp_path)
    again = meta_train(run)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time_ms"} for r in rs]
    assert strip(again.metrics) == strip(result.metrics)


def test_budgets():
    assert CUB_EPISODES == 60_000 and MINI_IMAGENET_EPISODES == 120_000
