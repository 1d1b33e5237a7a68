"""Feature extractor, forget-update modules, prediction head and baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn
from .episodes import Episode, splice_channels
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    concat_feature,
    getitem,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
)

VARIANTS = ("proposed", "tcn", "update_only", "gru_head", "lstm_head")

# "desk" narrows every width so a few thousand episodes fit in minutes on one core
PRESETS = {
    "full": {},
    "desk": {"c": 32, "d": 16, "filter_sizes": (8, 16), "h_sq": 64, "h1": 128, "h2": 64},
}


@dataclass
class ModelConfig:
    k: int = 2
    c: int = 64
    d: int = 64
    filter_sizes: tuple[int, ...] = (16, 32)
    n_way: int = 5
    variant: str = "proposed"
    h_sq: int = 128
    h1: int = 256
    h2: int = 128
    rnn_hidden: int = 512
    rnn_layers: int = 2
    in_channels: int = 3
    image_size: int = 84

    def __post_init__(self):
        self.filter_sizes = tuple(int(f) for f in self.filter_sizes)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.k < 2:
            raise ValueError("kernel size k must be >= 2")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4 (two 2x2 pools)")
        if self.n_way < 1 or self.c < 1 or self.d < 1:
            raise ValueError("n_way, c and d must be positive")

    @property
    def blocks_per_module(self) -> int:
        return blocks_per_module(self.k, self.c)

    @property
    def sequence_width(self) -> int:
        return (self.n_way + 1) * self.d

    def module_widths(self) -> list[int]:
        """Feature width entering each module, followed by the final width."""
        widths = [self.sequence_width]
        for fs in self.filter_sizes:
            widths.append(widths[-1] + self.blocks_per_module * fs)
        return widths

    @property
    def readout_width(self) -> int:
        if self.variant in ("gru_head", "lstm_head"):
            return self.rnn_hidden
        return self.module_widths()[-1]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["filter_sizes"] = list(self.filter_sizes)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def blocks_per_module(k: int, c: int) -> int:
    """ceil(log_k c), computed exactly in integers."""
    n, reach = 0, 1
    while reach < c:
        reach *= k
        n += 1
    return n


# -- feature extractor --------------------------------------------------------
class FeatureExtractor(nn.Module):
    """Four conv-BN-relu layers (pooling after the first two) then a squeeze
    network shared across channels that maps each channel's spatial map to d
    values."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        ch = [cfg.in_channels] + [cfg.c] * 4
        self.convs = [nn.Conv2d(ch[i], ch[i + 1], rng) for i in range(4)]
        self.norms = [nn.BatchNorm2d(cfg.c) for _ in range(4)]
        side = cfg.image_size // 4
        self.spatial = side * side
        self.squeeze1 = nn.Linear(self.spatial, cfg.h_sq, rng)
        self.squeeze2 = nn.Linear(cfg.h_sq, cfg.d, rng)
        self.c = cfg.c

    def conv_features(self, images: Tensor) -> Tensor:
        x = images
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            x = relu(bn(conv(x)))
            if i < 2:
                x = nn.maxpool2x2(x)
        return x

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim == 3:
            images = reshape(images, (1,) + images.shape)
        if images.ndim != 4 or images.shape[1] != self.convs[0].weight.shape[1]:
            raise ShapeError(f"feature extractor got images of shape {images.shape}")
        fmap = self.conv_features(images)
        b, c, h, w = fmap.shape
        if h * w != self.spatial:
            raise ShapeError(f"conv features are {h}x{w}, squeeze expects {self.spatial} values")
        flat = reshape(fmap, (b, c, h * w))
        return self.squeeze2(relu(self.squeeze1(flat)))


def feature_extract(fe: FeatureExtractor, image: Tensor, mode: str = "eval") -> Tensor:
    """Embed one (3, H, W) image as a (c, d) map."""
    fe.train(mode == "train")
    out = fe(image)
    return reshape(out, out.shape[1:])


# -- forget-update blocks -----------------------------------------------------
class ForgetUpdateBlock(nn.Module):
    """Gated block: a sigmoid-reweighted copy of the input, followed by
    ``filter_size`` new tanh x sigmoid features, stitched along the feature
    axis. The three causal convolutions have independent parameters."""

    def __init__(self, in_feat: int, filter_size: int, k: int, dilation: int,
                 rng: np.random.Generator):
        self.in_feat = in_feat
        self.filter_size = filter_size
        self.dilation = dilation
        self.forget_conv = nn.CausalConv1d(in_feat, in_feat, k, dilation, rng)
        self.update_conv_tanh = nn.CausalConv1d(in_feat, filter_size, k, dilation, rng)
        self.update_conv_gate = nn.CausalConv1d(in_feat, filter_size, k, dilation, rng)

    def _check(self, x: Tensor) -> None:
        if x.shape[-1] != self.in_feat:
            raise ShapeError(f"block expects width {self.in_feat}, got {x.shape}")

    def forget_gate(self, x: Tensor) -> Tensor:
        return sigmoid(self.forget_conv(x))

    def forget(self, x: Tensor) -> Tensor:
        self._check(x)
        return mul(self.forget_gate(x), x)

    def update(self, x: Tensor) -> Tensor:
        self._check(x)
        return mul(tanh(self.update_conv_tanh(x)), sigmoid(self.update_conv_gate(x)))

    def forward(self, x: Tensor) -> Tensor:
        return concat_feature(self.forget(x), self.update(x))


class UpdateOnlyBlock(ForgetUpdateBlock):
    """Ablation: the input passes through untouched in place of the forget path."""

    def __init__(self, in_feat: int, filter_size: int, k: int, dilation: int,
                 rng: np.random.Generator):
        self.in_feat = in_feat
        self.filter_size = filter_size
        self.dilation = dilation
        self.update_conv_tanh = nn.CausalConv1d(in_feat, filter_size, k, dilation, rng)
        self.update_conv_gate = nn.CausalConv1d(in_feat, filter_size, k, dilation, rng)

    def forward(self, x: Tensor) -> Tensor:
        return concat_feature(x, self.update(x))


class TCNBlock(nn.Module):
    """Residual temporal block: x + relu(conv2(relu(conv1(x)))), width-preserving."""

    def __init__(self, width: int, k: int, dilation: int, rng: np.random.Generator):
        self.dilation = dilation
        self.conv1 = nn.CausalConv1d(width, width, k, dilation, rng)
        self.conv2 = nn.CausalConv1d(width, width, k, dilation, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.conv1.weight.shape[1]:
            raise ShapeError(f"TCN block expects width {self.conv1.weight.shape[1]}, got {x.shape}")
        return add(x, relu(self.conv2(relu(self.conv1(x)))))


class ForgetUpdateModule(nn.Module):
    """ceil(log_k c) blocks with dilations k**0, k**1, ...; returns the last
    block's output."""

    def __init__(self, in_feat: int, filter_size: int, k: int, c: int, rng: np.random.Generator,
                 block_cls=ForgetUpdateBlock):
        self.filter_size = filter_size
        self.in_feat = in_feat
        self.blocks = []
        width = in_feat
        for i in range(blocks_per_module(k, c)):
            self.blocks.append(block_cls(width, filter_size, k, k ** i, rng))
            width += filter_size
        self.out_feat = width

    @property
    def dilations(self) -> list[int]:
        return [b.dilation for b in self.blocks]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class TCNModule(nn.Module):
    """Baseline with the proposed module's widths: a 1-tap projection to the
    target width, then residual causal blocks with the same dilations."""

    def __init__(self, in_feat: int, filter_size: int, k: int, c: int, rng: np.random.Generator):
        n = blocks_per_module(k, c)
        self.in_feat = in_feat
        self.out_feat = in_feat + n * filter_size
        self.project = nn.CausalConv1d(in_feat, self.out_feat, 1, 1, rng)
        self.blocks = [TCNBlock(self.out_feat, k, k ** i, rng) for i in range(n)]

    @property
    def dilations(self) -> list[int]:
        return [b.dilation for b in self.blocks]

    def forward(self, x: Tensor) -> Tensor:
        x = self.project(x)
        for block in self.blocks:
            x = block(x)
        return x


# -- recurrent baselines ------------------------------------------------------
def _uniform(shape, bound: float, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class RecurrentLayer(nn.Module):
    """One unidirectional GRU or LSTM layer (gate layout as in cuDNN)."""

    def __init__(self, kind: str, in_f: int, hidden: int, rng: np.random.Generator):
        if kind not in ("gru", "lstm"):
            raise ValueError(f"unknown recurrent kind {kind!r}")
        self.kind = kind
        self.hidden = hidden
        gates = 3 if kind == "gru" else 4
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = _uniform((gates * hidden, in_f), bound, rng)
        self.w_hh = _uniform((gates * hidden, hidden), bound, rng)
        self.b_ih = _uniform((gates * hidden,), bound, rng)
        self.b_hh = _uniform((gates * hidden,), bound, rng)

    def _gate(self, x: Tensor, i: int) -> Tensor:
        h = self.hidden
        return getitem(x, (slice(None), slice(i * h, (i + 1) * h)))

    def forward(self, seq: Tensor) -> Tensor:
        """(batch, steps, in) -> (batch, steps, hidden)."""
        b, t, _ = seq.shape
        h = Tensor(np.zeros((b, self.hidden)), dtype=seq.dtype)
        cell = h
        ones = Tensor(np.ones((b, self.hidden)), dtype=seq.dtype)
        projected = nn.affine(seq, self.w_ih, self.b_ih)
        outputs = []
        for step in range(t):
            gi = getitem(projected, (slice(None), step))
            gh = nn.affine(h, self.w_hh, self.b_hh)
            if self.kind == "gru":
                r = sigmoid(add(self._gate(gi, 0), self._gate(gh, 0)))
                z = sigmoid(add(self._gate(gi, 1), self._gate(gh, 1)))
                n = tanh(add(self._gate(gi, 2), mul(r, self._gate(gh, 2))))
                h = add(mul(sub(ones, z), n), mul(z, h))
            else:
                pre = add(gi, gh)
                i_g = sigmoid(self._gate(pre, 0))
                f_g = sigmoid(self._gate(pre, 1))
                g_g = tanh(self._gate(pre, 2))
                o_g = sigmoid(self._gate(pre, 3))
                cell = add(mul(f_g, cell), mul(i_g, g_g))
                h = mul(o_g, tanh(cell))
            outputs.append(reshape(h, (b, 1, self.hidden)))
        return concat(outputs, axis=1)


class RecurrentNet(nn.Module):
    def __init__(self, kind: str, in_f: int, hidden: int, layers: int, rng: np.random.Generator):
        self.kind = kind
        self.layers = [RecurrentLayer(kind, in_f if i == 0 else hidden, hidden, rng) for i in range(layers)]
        self.out_feat = hidden

    def forward(self, seq: Tensor) -> Tensor:
        for layer in self.layers:
            seq = layer(seq)
        return seq


# -- prediction head and full model ------------------------------------------
class PredictionHead(nn.Module):
    """Three weight-normalised fully connected layers with relu in between."""

    def __init__(self, in_f: int, h1: int, h2: int, n_way: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(in_f, h1, rng, weight_norm=True)
        self.fc2 = nn.Linear(h1, h2, rng, weight_norm=True)
        self.fc3 = nn.Linear(h2, n_way, rng, weight_norm=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc3(relu(self.fc2(relu(self.fc1(x)))))


class FumModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = cfg
        self.features = FeatureExtractor(cfg, rng)
        widths = cfg.module_widths()
        if cfg.variant in ("gru_head", "lstm_head"):
            self.modules = [RecurrentNet(cfg.variant[:-5], widths[0], cfg.rnn_hidden, cfg.rnn_layers, rng)]
        else:
            self.modules = [self._make_module(w, fs, rng) for w, fs in zip(widths, cfg.filter_sizes)]
        self.head = PredictionHead(cfg.readout_width, cfg.h1, cfg.h2, cfg.n_way, rng)

    def _make_module(self, width: int, filter_size: int, rng):
        cfg = self.config
        if cfg.variant == "tcn":
            return TCNModule(width, filter_size, cfg.k, cfg.c, rng)
        block = UpdateOnlyBlock if cfg.variant == "update_only" else ForgetUpdateBlock
        return ForgetUpdateModule(width, filter_size, cfg.k, cfg.c, rng, block_cls=block)

    # -- pipeline stages
    def embed(self, images) -> Tensor:
        """(B, C, H, W) images -> (B, c, d) channel vectors."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        return self.features(images)

    def class_maps(self, support_maps: Tensor, n_way: int, k_shot: int, average: bool = True) -> Tensor:
        """Class-level maps from class-grouped support embeddings."""
        _, c, d = support_maps.shape
        grouped = reshape(support_maps, (n_way, k_shot, c, d))
        if average:
            return mean(grouped, axis=1)
        if k_shot != 1:
            raise ValueError("averaging can only be bypassed for one-shot episodes")
        return reshape(support_maps, (n_way, c, d))

    def sequence_features(self, seq: Tensor) -> Tensor:
        for module in self.modules:
            seq = module(seq)
        return seq

    def scores(self, class_maps: Tensor, query_maps: Tensor) -> Tensor:
        """(N, c, d) class maps and (Q, c, d) queries -> (Q, N) scores."""
        if class_maps.shape[0] != self.config.n_way:
            raise ShapeError(f"model is {self.config.n_way}-way, got {class_maps.shape[0]} class maps")
        out = self.sequence_features(splice_channels(class_maps, query_maps))
        last = getitem(out, (slice(None), -1))
        return self.head(last)

    def forward(self, episode: Episode, average: bool = True) -> Tensor:
        n, k = episode.n_way, episode.k_shot
        images = np.concatenate([episode.support, episode.query])
        maps = self.embed(images)
        support = getitem(maps, slice(0, n * k))
        query = getitem(maps, slice(n * k, None))
        return self.scores(self.class_maps(support, n, k, average), query)


def model_forward(model: FumModel, class_maps, query_map: Tensor) -> Tensor:
    """Scores of one query against N class maps, shape (N,)."""
    if not isinstance(class_maps, Tensor):
        class_maps = stack(list(class_maps))
    q = reshape(query_map, (1,) + query_map.shape)
    out = model.scores(class_maps, q)
    return reshape(out, out.shape[1:])
