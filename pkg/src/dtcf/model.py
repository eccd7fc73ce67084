"""Quarter-channel ResNet34 speaker embedding model.

The backbone consumes an (T, 80) log-mel feature matrix as a 1-channel map
and produces a 512-dim utterance embedding via attentive statistics pooling.
Stage layout (channels, stride as time x freq):

    stem   3x3/ (1,1) -> 32 x T x 80
    stage1 3 blocks / (1,1) -> 32 x T x 80
    stage2 4 blocks / (1,2) -> 64 x T x 40
    stage3 6 blocks / (2,2) -> 128 x ceil(T/2) x 20
    stage4 3 blocks / (2,2) -> 256 x ceil(T/4) x 10

Each residual block can gate its main path with SE or DTCF attention right
before the skip addition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import DTCFBlock, SEBlock
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2dLayer, LinearLayer, xavier_uniform
from .tensor import Tensor, concat, matmul, no_grad, reshape, sum_axis, transpose

__all__ = ["BackboneConfig", "ResidualBlock", "ASPHead", "SpeakerModel"]

ATTENTION_KINDS = ("none", "se", "dtcf")


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    blocks: tuple[int, ...] = (3, 4, 6, 3)
    strides: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (2, 2), (2, 2))
    attention: str = "none"
    reduction: int = 8
    emb_dim: int = 512
    asp_hidden: int = 128
    n_mels: int = 80

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.blocks) != 4 or len(self.strides) != 4:
            raise ConfigError("backbone uses exactly 4 stages")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage widths must double: {self.widths}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}")
        if min(self.blocks) < 1 or self.reduction < 1:
            raise ConfigError("block counts and reduction must be >= 1")

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths), "blocks": list(self.blocks),
            "strides": [list(s) for s in self.strides], "attention": self.attention,
            "reduction": self.reduction, "emb_dim": self.emb_dim,
            "asp_hidden": self.asp_hidden, "n_mels": self.n_mels,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(
            widths=tuple(d["widths"]), blocks=tuple(d["blocks"]),
            strides=tuple(tuple(s) for s in d["strides"]), attention=d["attention"],
            reduction=d["reduction"], emb_dim=d["emb_dim"],
            asp_hidden=d["asp_hidden"], n_mels=d["n_mels"],
        )


def _make_attention(kind: str, channels: int, reduction: int, rng, dtype):
    if kind == "none":
        return None
    cls = SEBlock if kind == "se" else DTCFBlock
    return cls(channels, reduction, rng=rng, dtype=dtype)


class ResidualBlock:
    """conv-bn-relu-conv-bn, attention gate, then skip addition and relu."""

    def __init__(self, in_channels: int, out_channels: int, stride=(1, 1),
                 attention: str = "none", reduction: int = 8,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2dLayer(in_channels, out_channels, stride=stride,
                                 bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2dLayer(out_channels, out_channels, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        if stride != (1, 1) or in_channels != out_channels:
            self.down_conv = Conv2dLayer(in_channels, out_channels, kernel=(1, 1),
                                         stride=stride, padding=(0, 0),
                                         bias=False, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm2d(out_channels, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None
        self.attn = _make_attention(attention, out_channels, reduction, rng, dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        main = self.bn1.forward(self.conv1.forward(x), training).relu()
        main = self.bn2.forward(self.conv2.forward(main), training)
        if self.attn is not None:
            main = self.attn.apply(main)
        if self.down_conv is not None:
            skip = self.down_bn.forward(self.down_conv.forward(x), training)
        else:
            skip = x
        if main.shape != skip.shape:
            raise ShapeError(f"main path {main.shape} does not match skip {skip.shape}")
        return (main + skip).relu()

    def modules(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        if self.down_conv is not None:
            yield "down_conv", self.down_conv
            yield "down_bn", self.down_bn
        if self.attn is not None:
            yield "attn", self.attn


class ASPHead:
    """Attentive statistics pooling over frames.

    Each frame is the flattened channel x frequency vector h_t. Frame weights
    are softmax(v . tanh(W h_t + b)); the output concatenates the weighted
    mean with the weighted standard deviation, giving 2 * C * F dims.
    """

    def __init__(self, in_dim: int, hidden: int = 128, eps: float = 1e-9,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.eps = eps
        self.w = xavier_uniform(rng, (hidden, in_dim), in_dim, hidden, dtype)
        self.b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.v = xavier_uniform(rng, (hidden, 1), hidden, 1, dtype)

    def _frames(self, fmap: Tensor) -> Tensor:
        if fmap.ndim == 3:
            fmap = reshape(fmap, (1,) + fmap.shape)
        b, c, t, f = fmap.shape
        if c * f != self.in_dim:
            raise ShapeError(f"pooling expects {self.in_dim} dims per frame, got {c * f}")
        return reshape(transpose(fmap, (0, 2, 1, 3)), (b, t, c * f))

    def _weights(self, h: Tensor) -> Tensor:
        b, t, d = h.shape
        scores = matmul(reshape(h, (b * t, d)), transpose(self.w, (1, 0)))
        scores = (scores + self.b.reshape(1, -1)).tanh()
        scores = reshape(matmul(scores, self.v), (b, t))
        # shift by the (constant) per-utterance max for a stable softmax
        shift = Tensor(scores.data.max(axis=1, keepdims=True))
        ez = (scores - shift).exp()
        return ez / sum_axis(ez, 1, keepdims=True)

    def forward(self, fmap: Tensor) -> Tensor:
        batched = fmap.ndim == 4
        h = self._frames(fmap)
        alpha = self._weights(h)
        al = reshape(alpha, alpha.shape + (1,))
        mu = sum_axis(al * h, 1)
        msq = sum_axis(al * (h * h), 1)
        std = ((msq - mu * mu).relu() + self.eps).sqrt()
        out = concat(mu, std, axis=1)
        return out if batched else reshape(out, (-1,))

    def frame_weights(self, fmap: Tensor) -> np.ndarray:
        with no_grad():
            return self._weights(self._frames(fmap)).data

    def params(self):
        return [("w", self.w), ("b", self.b), ("v", self.v)]


class SpeakerModel:
    """Backbone + pooling + embedding layer. Construction is rng-seeded."""

    MIN_FRAMES = 8

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        cfg = config or BackboneConfig()
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.dtype = dtype
        w = cfg.widths
        self.stem_conv = Conv2dLayer(1, w[0], bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(w[0], dtype=dtype)
        self.stages: list[list[ResidualBlock]] = []
        in_ch = w[0]
        for width, count, stride in zip(w, cfg.blocks, cfg.strides):
            stage = []
            for j in range(count):
                stage.append(ResidualBlock(
                    in_ch, width, stride=stride if j == 0 else (1, 1),
                    attention=cfg.attention, reduction=cfg.reduction,
                    rng=rng, dtype=dtype))
                in_ch = width
            self.stages.append(stage)
        self._final_freq = self._trace_freq(cfg)
        stats_dim = w[-1] * self._final_freq
        self.asp = ASPHead(stats_dim, cfg.asp_hidden, rng=rng, dtype=dtype)
        self.emb = LinearLayer(2 * stats_dim, cfg.emb_dim, bias=True, rng=rng, dtype=dtype)

    @staticmethod
    def _trace_freq(cfg: BackboneConfig) -> int:
        f = cfg.n_mels
        for _, sf in cfg.strides:
            f = (f + 2 - 3) // sf + 1
        return f

    # -- forward paths ------------------------------------------------------

    def forward_map(self, x: Tensor, training: bool = False,
                    trace: list | None = None) -> Tensor:
        v = self.stem_bn.forward(self.stem_conv.forward(x), training).relu()
        for stage in self.stages:
            for block in stage:
                v = block.forward(v, training)
            if trace is not None:
                trace.append(v.shape[-3:])
        return v

    def forward(self, feats: Tensor, training: bool = False) -> Tensor:
        """(T, 80) -> (512,) embedding, or (B, T, 80) -> (B, 512)."""
        batched = feats.ndim == 3
        if not batched and feats.ndim != 2:
            raise ShapeError(f"expected (T,{self.config.n_mels}) features, got {feats.shape}")
        if feats.shape[-1] != self.config.n_mels:
            raise ShapeError(f"expected {self.config.n_mels} mel bins, got {feats.shape[-1]}")
        if feats.shape[-2] < self.MIN_FRAMES:
            raise ShapeError(f"need at least {self.MIN_FRAMES} frames, got {feats.shape[-2]}")
        shape = feats.shape
        x = reshape(feats, (shape[0] if batched else 1, 1, shape[-2], shape[-1]))
        fmap = self.forward_map(x, training)
        pooled = self.asp.forward(fmap)
        out = self.emb.forward(pooled)
        return out if batched else reshape(out, (-1,))

    def embed(self, feats: np.ndarray) -> np.ndarray:
        """Eval-mode utterance embedding; deterministic, no graph recorded."""
        with no_grad():
            out = self.forward(Tensor(np.asarray(feats, dtype=self.dtype)), training=False)
        return out.data.copy()

    # -- parameter access ---------------------------------------------------

    def _modules(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage):
                for name, mod in block.modules():
                    yield f"stage{i + 1}.block{j}.{name}", mod
        yield "asp", self.asp
        yield "emb", self.emb

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, mod in self._modules():
            for name, t in mod.params():
                out.append((f"{prefix}.{name}", t))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, mod in self._modules():
            if isinstance(mod, BatchNorm2d):
                for name, arr in mod.buffers():
                    out.append((f"{prefix}.{name}", arr))
        return out

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for prefix, mod in self._modules():
            if isinstance(mod, BatchNorm2d):
                mod.running_mean = values[f"{prefix}.running_mean"].copy()
                mod.running_var = values[f"{prefix}.running_var"].copy()

    def param_count(self) -> int:
        return sum(int(np.prod(t.shape)) for _, t in self.named_params())
