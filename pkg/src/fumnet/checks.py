"""Invariant battery: gradient checks, causality, receptive field and shapes.

Every check runs in 64-bit mode on small configurations and returns a
:class:`CheckResult`. :func:`run_battery` runs them all; ``inject_fault``
swaps in a deliberately broken kernel so the battery can be seen to fail.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import nn
from .episodes import Episode, build_channel_vector_sequence, splice_channels
from .model import (
    ForgetUpdateModule,
    FumModel,
    ModelConfig,
    RecurrentNet,
    blocks_per_module,
)
from .tensor import (
    GradcheckReport,
    Tensor,
    add,
    backward,
    concat,
    concat_feature,
    gradcheck,
    matmul,
    mul,
    precision,
    sigmoid,
    sub,
    tanh,
    relu,
    tsum,
)

STEP = 1e-3
TOL = 1e-4
TINY = dict(c=8, d=4, n_way=2, filter_sizes=(2, 2), h_sq=6, h1=8, h2=6, image_size=12,
            rnn_hidden=5, rnn_layers=2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # a generic scalar readout; random weights avoid symmetric cancellations
    return tsum(mul(y, Tensor(w, dtype=y.dtype)))


def param_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                    rng: np.random.Generator, max_coords: int = 40,
                    step: float = STEP, max_kinked: float = 0.1) -> tuple[float, str]:
    """Finite-difference check of d loss / d param on sampled coordinates.

    Tensors with at most `max_coords` entries are checked exhaustively.
    A coordinate whose central difference changes by more than the tolerance
    when the step shrinks tenfold straddles a relu or max-pool kink; it is
    skipped, and more than `max_kinked` of coordinates skipped counts as a
    failure. Returns the worst relative error and where it came from.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in params.items()}

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(loss_fn().data)
        flat[i] = orig - h
        lo = float(loss_fn().data)
        flat[i] = orig
        return (hi - lo) / (2 * h)

    worst, where, checked, kinked = 0.0, "", 0, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            analytic = float(grads[name].reshape(-1)[i])
            num = central(flat, i, step)
            err = abs(analytic - num) / max(abs(analytic), abs(num), 1e-6)
            checked += 1
            if err > TOL:
                fine = central(flat, i, step / 10)
                if abs(fine - num) / max(abs(fine), abs(num), 1e-6) > TOL:
                    kinked += 1
                    continue
            if err > worst:
                idx = tuple(int(j) for j in np.unravel_index(i, p.shape))
                worst, where = err, f"{name}{list(idx)}"
        p.grad = None
    if kinked > max_kinked * checked:
        return float("inf"), f"{kinked}/{checked} coordinates straddle kinks"
    return worst, f"{where}, {checked} coords, {kinked} at kinks"


def _grad_result(name: str, reports: list[tuple[str, GradcheckReport]]) -> CheckResult:
    worst = max(reports, key=lambda r: r[1].max_rel_error)
    ok = all(r.passed for _, r in reports)
    return CheckResult(name, ok, f"max rel err {worst[1].max_rel_error:.2e} ({worst[0]})")


def _kink_mask(x: np.ndarray) -> np.ndarray:
    return np.abs(x) < 1e-2


# -- per-operation gradient checks --------------------------------------------
def check_elementwise(rng) -> CheckResult:
    a = Tensor(rng.uniform(-2, 2, (3, 4)))
    b = Tensor(rng.uniform(-2, 2, (3, 4)))
    w = rng.normal(size=(3, 4))
    reps = []
    for op in (add, sub, mul):
        reps.append((f"{op.__name__}/a", gradcheck(lambda t: _weighted_sum(op(t, b), w), a, STEP, TOL)))
        reps.append((f"{op.__name__}/b", gradcheck(lambda t: _weighted_sum(op(a, t), w), b, STEP, TOL)))
    return _grad_result("grad: elementwise add/sub/mul", reps)


def check_activations(rng) -> CheckResult:
    x = Tensor(rng.uniform(-2, 2, (5, 6)))
    w = rng.normal(size=(5, 6))
    reps = [
        ("sigmoid", gradcheck(lambda t: _weighted_sum(sigmoid(t), w), x, STEP, TOL)),
        ("tanh", gradcheck(lambda t: _weighted_sum(tanh(t), w), x, STEP, TOL)),
        ("relu", gradcheck(lambda t: _weighted_sum(relu(t), w), x, STEP, TOL, skip=_kink_mask)),
    ]
    return _grad_result("grad: sigmoid/tanh/relu", reps)


def check_matmul(rng) -> CheckResult:
    a = Tensor(rng.uniform(-2, 2, (3, 4)))
    b = Tensor(rng.uniform(-2, 2, (4, 2)))
    w = rng.normal(size=(3, 2))
    reps = [
        ("a", gradcheck(lambda t: _weighted_sum(matmul(t, b), w), a, STEP, TOL)),
        ("b", gradcheck(lambda t: _weighted_sum(matmul(a, t), w), b, STEP, TOL)),
    ]
    return _grad_result("grad: matmul", reps)


def check_concat(rng) -> CheckResult:
    a = Tensor(rng.uniform(-2, 2, (4, 3)))
    b = Tensor(rng.uniform(-2, 2, (4, 2)))
    w = rng.normal(size=(4, 5))
    reps = [
        ("a", gradcheck(lambda t: _weighted_sum(concat_feature(t, b), w), a, STEP, TOL)),
        ("b", gradcheck(lambda t: _weighted_sum(concat_feature(a, t), w), b, STEP, TOL)),
    ]
    return _grad_result("grad: concat_feature", reps)


def check_conv2d(rng) -> CheckResult:
    layer = nn.Conv2d(3, 4, rng)
    x = Tensor(rng.uniform(-2, 2, (2, 3, 8, 8)))
    w = rng.normal(size=(2, 4, 8, 8))
    f = lambda: _weighted_sum(layer(x), w)
    reps = [("input", gradcheck(lambda t: _weighted_sum(layer(t), w), x, STEP, TOL))]
    err, where = param_gradcheck(f, dict(layer.named_parameters()), rng)
    ok = reps[0][1].passed and err < TOL
    return CheckResult("grad: conv2d 3x3", ok,
                       f"input {reps[0][1].max_rel_error:.2e}, params {err:.2e} {where}")


def check_maxpool(rng) -> CheckResult:
    x = Tensor(rng.uniform(-2, 2, (2, 3, 6, 6)))
    w = rng.normal(size=(2, 3, 3, 3))
    return _grad_result("grad: maxpool2x2",
                        [("x", gradcheck(lambda t: _weighted_sum(nn.maxpool2x2(t), w), x, STEP, TOL))])


def check_batchnorm(rng) -> CheckResult:
    layer = nn.BatchNorm2d(4)
    layer.gamma.data = rng.uniform(0.5, 1.5, 4)
    layer.beta.data = rng.uniform(-0.5, 0.5, 4)
    x = Tensor(rng.uniform(-2, 2, (2, 4, 5, 5)))
    w = rng.normal(size=(2, 4, 5, 5))
    rep = gradcheck(lambda t: _weighted_sum(layer(t), w), x, STEP, TOL)
    err, where = param_gradcheck(lambda: _weighted_sum(layer(x), w), dict(layer.named_parameters()), rng)
    return CheckResult("grad: batchnorm2d (train)", rep.passed and err < TOL,
                       f"input {rep.max_rel_error:.2e}, params {err:.2e} {where}")


def check_causal_conv(rng) -> CheckResult:
    layer = nn.CausalConv1d(5, 3, 2, 2, rng)
    x = Tensor(rng.uniform(-2, 2, (2, 9, 5)))
    w = rng.normal(size=(2, 9, 3))
    rep = gradcheck(lambda t: _weighted_sum(layer(t), w), x, STEP, TOL)
    err, where = param_gradcheck(lambda: _weighted_sum(layer(x), w), dict(layer.named_parameters()), rng)
    return CheckResult("grad: causal dilated conv1d", rep.passed and err < TOL,
                       f"input {rep.max_rel_error:.2e}, params {err:.2e} {where}")


def check_linear_weightnorm(rng) -> CheckResult:
    layer = nn.Linear(5, 3, rng, weight_norm=True)
    x = Tensor(rng.uniform(-2, 2, (4, 5)))
    w = rng.normal(size=(4, 3))
    rep = gradcheck(lambda t: _weighted_sum(layer(t), w), x, STEP, TOL)
    err, where = param_gradcheck(lambda: _weighted_sum(layer(x), w), dict(layer.named_parameters()), rng)
    return CheckResult("grad: weight-normalised linear", rep.passed and err < TOL,
                       f"input {rep.max_rel_error:.2e}, params {err:.2e} {where}")


def check_cross_entropy(rng) -> CheckResult:
    logits = Tensor(rng.uniform(-2, 2, (4, 5)))
    rep = gradcheck(lambda t: nn.softmax_cross_entropy(t, [0, 3, 1, 4]), logits, STEP, TOL)
    return _grad_result("grad: softmax cross-entropy", [("logits", rep)])


def check_recurrent(rng) -> CheckResult:
    details, ok = [], True
    for kind in ("gru", "lstm"):
        net = RecurrentNet(kind, 3, 4, 2, rng)
        x = Tensor(rng.uniform(-2, 2, (2, 4, 3)))
        w = rng.normal(size=(2, 4, 4))
        rep = gradcheck(lambda t: _weighted_sum(net(t), w), x, STEP, TOL)
        err, where = param_gradcheck(lambda: _weighted_sum(net(x), w), dict(net.named_parameters()), rng)
        ok &= rep.passed and err < TOL
        details.append(f"{kind} input {rep.max_rel_error:.2e} params {err:.2e}")
    return CheckResult("grad: GRU/LSTM 4-step recurrence", ok, "; ".join(details))


def tiny_episode(cfg: ModelConfig, rng: np.random.Generator, k_shot: int = 1, q: int = 2) -> Episode:
    n = cfg.n_way
    size = cfg.image_size
    support = rng.uniform(-1, 1, (n * k_shot, cfg.in_channels, size, size))
    query = rng.uniform(-1, 1, (q, cfg.in_channels, size, size))
    return Episode(n, k_shot, support, np.repeat(np.arange(n), k_shot), query,
                   np.arange(q) % n, np.arange(n))


def check_end_to_end(rng, variant: str = "proposed") -> CheckResult:
    cfg = ModelConfig(variant=variant, **TINY)
    model = FumModel(cfg, rng)
    ep = tiny_episode(cfg, rng)
    loss = lambda: nn.softmax_cross_entropy(model(ep), ep.query_labels)
    err, where = param_gradcheck(loss, dict(model.named_parameters()), rng, max_coords=12)
    return CheckResult(f"grad: end-to-end tiny model ({variant})", err < TOL,
                       f"max rel err {err:.2e} at {where}")


# -- structural checks --------------------------------------------------------
def module_trace(modules, seq: Tensor) -> list[np.ndarray]:
    """Outputs of every block of every module, in order."""
    outs = []
    for module in modules:
        if hasattr(module, "project"):
            seq = module.project(seq)
            outs.append(seq.data.copy())
        for block in module.blocks:
            seq = block(seq)
            outs.append(seq.data.copy())
    return outs


def check_causality(rng, variant: str = "proposed") -> CheckResult:
    cfg = ModelConfig(variant=variant, c=16, d=3, n_way=3, filter_sizes=(2, 3))
    model = FumModel(cfg, rng)
    seq = rng.normal(size=(cfg.c, cfg.sequence_width))
    base = module_trace(model.modules, Tensor(seq))
    for t in range(cfg.c):
        pert = seq.copy()
        pert[t] += rng.normal(size=cfg.sequence_width)
        outs = module_trace(model.modules, Tensor(pert))
        for i, (a, b) in enumerate(zip(base, outs)):
            if not np.array_equal(a[:t], b[:t]):
                return CheckResult(f"causality: stacked modules ({variant})", False,
                                   f"perturbing step {t} changed earlier steps at stage {i}")
    return CheckResult(f"causality: stacked modules ({variant})", True,
                       f"{cfg.c} steps x {len(base)} stages, earlier steps bit-identical")


def impulse_reach(layers, length: int, width: int, source: int) -> np.ndarray:
    """Boolean per output step: does an impulse at `source` change it?"""
    zero = np.zeros((length, width))
    hit = zero.copy()
    hit[source] = 1.0
    a, b = Tensor(zero), Tensor(hit)
    for layer in layers:
        a, b = layer(a), layer(b)
    return np.any(a.data != b.data, axis=1)


def check_receptive_field(rng, n_layers: int = 6, k: int = 2) -> CheckResult:
    layers = []
    for i in range(n_layers):
        layer = nn.CausalConv1d(2, 2, k, nn.dilation_for_layer(k, i + 1), rng)
        layer.weight.data = np.abs(layer.weight.data) + 0.1
        layers.append(layer)
    field = k ** n_layers
    length = field + 8
    t = length - 1
    reach = impulse_reach(layers, length, 2, t - field + 1)
    miss = impulse_reach(layers, length, 2, t - field)
    ok = bool(reach[t]) and not bool(miss[t])
    # the proposed module itself: last step must see step 0
    c = k ** n_layers
    module = ForgetUpdateModule(4, 2, k, c, rng)
    seen = impulse_reach([module], c, 4, 0)
    ok &= bool(seen[c - 1]) and not bool(impulse_reach([module], c + 1, 4, 0)[c])
    return CheckResult("receptive field: impulse response", ok,
                       f"field {field}: reaches t-{field - 1}: {bool(reach[t])}, t-{field}: {bool(miss[t])}; "
                       f"module last step sees step 0: {bool(seen[c - 1])}")


def shape_chain(cfg: ModelConfig | None = None, rng=None) -> dict[str, tuple[int, ...]]:
    cfg = cfg or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    model = FumModel(cfg, rng).eval()
    image = Tensor(rng.uniform(-1, 1, (1, cfg.in_channels, cfg.image_size, cfg.image_size)))
    chain = {"image": image.shape[1:]}
    fmap = model.features.conv_features(image)
    chain["conv"] = fmap.shape[1:]
    emb = model.embed(image.data)
    chain["embedding"] = emb.shape[1:]
    classes = Tensor(rng.normal(size=(cfg.n_way, cfg.c, cfg.d)))
    seq = build_channel_vector_sequence([classes[i] for i in range(cfg.n_way)], emb[0]).data
    chain["sequence"] = seq.shape
    x = Tensor(seq.data[None])
    for i, module in enumerate(model.modules):
        x = module(x)
        chain[f"module{i + 1}"] = x.shape[1:]
    chain["scores"] = model.scores(classes, emb).shape[1:]
    return chain


def check_shape_chain(rng) -> CheckResult:
    cfg = ModelConfig()
    chain = shape_chain(cfg, rng)
    model_dil = [m.dilations for m in FumModel(cfg, rng).modules]
    expected = {
        "image": (3, 84, 84), "conv": (64, 21, 21), "embedding": (64, 64), "sequence": (64, 384),
        "module1": (64, 480), "module2": (64, 672), "scores": (5,),
    }
    ok = chain == expected and blocks_per_module(2, 64) == 6 and model_dil == [[1, 2, 4, 8, 16, 32]] * 2
    text = " -> ".join("x".join(map(str, s)) for s in chain.values())
    return CheckResult("shape chain (defaults)", ok, f"{text}; dilations {model_dil[0]}")


def check_one_shot_average(rng) -> CheckResult:
    cfg = ModelConfig(**TINY)
    model = FumModel(cfg, rng).eval()
    ep = tiny_episode(cfg, rng, k_shot=1, q=3)
    with_avg = model(ep, average=True).data
    bypass = model(ep, average=False).data
    return CheckResult("one-shot class averaging is identity", np.array_equal(with_avg, bypass),
                       f"max |diff| {np.max(np.abs(with_avg - bypass)):.1e}")


def check_splice_inverse(rng) -> CheckResult:
    maps = Tensor(rng.normal(size=(5, 6, 4)))
    query = Tensor(rng.normal(size=(2, 6, 4)))
    seq = splice_channels(maps, query).data
    ok = seq.shape == (2, 6, 24)
    for p in range(2):
        for i in range(5):
            ok &= np.array_equal(seq[p, :, i * 4:(i + 1) * 4], maps.data[i])
        ok &= np.array_equal(seq[p, :, 20:], query.data[p])
    return CheckResult("channel splice is invertible", bool(ok), "every class/query block recovered")


# -- fault injection ------------------------------------------------------------
def _lookahead_conv1d(original):
    # pads on the right instead of the left, so step t reads step t + shift
    def conv(x, weight, bias, dilation):
        shift = max(1, (weight.shape[2] - 1) * dilation)
        pad = Tensor(np.zeros(x.shape[:-2] + (shift, x.shape[-1])), dtype=x.dtype)
        ahead = concat([x[..., shift:, :], pad], axis=-2)
        return original(ahead, weight, bias, dilation)
    return conv


@contextlib.contextmanager
def fault(name: str | None) -> Iterator[None]:
    if not name or name == "none":
        yield
        return
    if name != "padding":
        raise ValueError(f"unknown fault {name!r}")
    original = nn.causal_conv1d
    nn.causal_conv1d = _lookahead_conv1d(original)
    try:
        yield
    finally:
        nn.causal_conv1d = original


CHECKS: list[tuple[str, Callable]] = [
    ("elementwise", check_elementwise),
    ("activations", check_activations),
    ("matmul", check_matmul),
    ("concat", check_concat),
    ("conv2d", check_conv2d),
    ("maxpool", check_maxpool),
    ("batchnorm", check_batchnorm),
    ("causal_conv", check_causal_conv),
    ("linear", check_linear_weightnorm),
    ("cross_entropy", check_cross_entropy),
    ("recurrent", check_recurrent),
    ("end_to_end", check_end_to_end),
    ("causality", check_causality),
    ("receptive_field", check_receptive_field),
    ("shape_chain", check_shape_chain),
    ("one_shot_average", check_one_shot_average),
    ("splice_inverse", check_splice_inverse),
]


def run_battery(seed: int = 0, inject_fault: str | None = None,
                only: list[str] | None = None) -> list[CheckResult]:
    results = []
    with precision(np.float64), fault(inject_fault):
        for key, fn in CHECKS:
            if only and key not in only:
                continue
            start = time.perf_counter()
            try:
                res = fn(np.random.default_rng(seed))
            except Exception as exc:  # a crashing check is a failing check
                res = CheckResult(key, False, f"raised {type(exc).__name__}: {exc}")
            res.seconds = time.perf_counter() - start
            results.append(res)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}    {r.seconds:6.2f}s {r.detail}")
    return "\n".join(lines)
