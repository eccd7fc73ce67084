"""Channel attention blocks: SE baseline and the duality (DTCF) variant.

Both blocks gate the channels of a (C, T, F) feature map with sigmoid masks
learned through a reduction bottleneck C -> C' -> C, where C' = C / r.

SE squeezes the whole time-frequency plane to one value per channel, so its
mask is a single gate per channel. The duality block keeps per-frame and
per-bin context: it pools time and frequency in parallel, encodes the
concatenated [freq-profile, time-profile] matrix through a shared 1x1
bottleneck, then derives one mask over (C, T) and one over (C, F) and
multiplies both into the map.

All ops accept an optional leading batch axis; the unbatched (C, T, F) form
is the reference contract.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import xavier_uniform
from .tensor import Tensor, concat, matmul, mean_axis, reshape, split, transpose

__all__ = ["SEBlock", "DTCFBlock", "reduced_channels", "param_count"]


def reduced_channels(channels: int, reduction: int) -> int:
    """Bottleneck width C' = C / r, clamped to 1 when C < r."""
    if channels < reduction:
        return 1
    if channels % reduction:
        raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
    return channels // reduction


def _per_column(w: Tensor, u: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply a (C2, C1) channel map independently to every column of (B, C1, P)."""
    b, c1, p = u.shape
    flat = reshape(transpose(u, (1, 0, 2)), (c1, b * p))
    out = matmul(w, flat)
    if bias is not None:
        out = out + bias.reshape(-1, 1)
    return transpose(reshape(out, (w.shape[0], b, p)), (1, 0, 2))


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected a (C,T,F) or (B,C,T,F) map, got {x.shape}")


class SEBlock:
    """Squeeze-and-excitation: global-average squeeze, two FC layers, sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 8, bias: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        c_red = reduced_channels(channels, reduction)
        self.channels = channels
        self.reduction = reduction
        self.w1 = xavier_uniform(rng, (c_red, channels), channels, c_red, dtype)
        self.w2 = xavier_uniform(rng, (channels, c_red), c_red, channels, dtype)
        self.b1 = Tensor(np.zeros(c_red, dtype=dtype), requires_grad=True) if bias else None
        self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True) if bias else None

    def squeeze(self, x: Tensor) -> Tensor:
        """Mean over time and frequency: (C,T,F) -> (C,) or (B,C,T,F) -> (B,C)."""
        xb, batched = _as_batch(x)
        if xb.shape[2] < 1 or xb.shape[3] < 1:
            raise ShapeError("empty time or frequency axis")
        pooled = mean_axis(mean_axis(xb, 3), 2)
        return pooled if batched else reshape(pooled, (-1,))

    def mask(self, xc: Tensor) -> Tensor:
        """Gate per channel: sigmoid(W2 relu(W1 xc)), values strictly in (0,1)."""
        vec = xc.ndim == 1
        if xc.shape[-1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {xc.shape[-1]}")
        u = reshape(xc, (1, -1)) if vec else xc
        hidden = matmul(u, transpose(self.w1, (1, 0)))
        if self.b1 is not None:
            hidden = hidden + self.b1.reshape(1, -1)
        out = matmul(hidden.relu(), transpose(self.w2, (1, 0)))
        if self.b2 is not None:
            out = out + self.b2.reshape(1, -1)
        out = out.sigmoid()
        return reshape(out, (-1,)) if vec else out

    def apply(self, x: Tensor) -> Tensor:
        """Recalibrate: multiply every (t, f) cell of channel c by its gate."""
        xb, batched = _as_batch(x)
        m = self.mask(self.squeeze(xb))
        out = xb * reshape(m, m.shape + (1, 1))
        return out if batched else reshape(out, x.shape)

    def params(self):
        named = [("w1", self.w1), ("w2", self.w2)]
        if self.b1 is not None:
            named += [("b1", self.b1), ("b2", self.b2)]
        return named


class DTCFBlock:
    """Duality temporal-channel-frequency attention.

    W1 is the shared bottleneck encoder; W2 produces the time-conditioned
    channel mask and W3 the frequency-conditioned one. The encoder input is
    the concatenation [freq profile (C,F), time profile (C,T)] and the split
    after encoding uses the same order, so W3 reads the first F columns and
    W2 the remaining T.
    """

    def __init__(self, channels: int, reduction: int = 8, bias: bool = False,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        c_red = reduced_channels(channels, reduction)
        self.channels = channels
        self.reduction = reduction
        self.w1 = xavier_uniform(rng, (c_red, channels), channels, c_red, dtype)
        self.w2 = xavier_uniform(rng, (channels, c_red), c_red, channels, dtype)
        self.w3 = xavier_uniform(rng, (channels, c_red), c_red, channels, dtype)
        if bias:
            self.b1 = Tensor(np.zeros(c_red, dtype=dtype), requires_grad=True)
            self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
            self.b3 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        else:
            self.b1 = self.b2 = self.b3 = None

    def pool(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Parallel means: xcf[c,f] over time, xct[c,t] over frequency."""
        xb, batched = _as_batch(x)
        if xb.shape[2] < 1 or xb.shape[3] < 1:
            raise ShapeError("empty time or frequency axis")
        xcf = mean_axis(xb, 2)   # (B, C, F)
        xct = mean_axis(xb, 3)   # (B, C, T)
        if not batched:
            xcf = reshape(xcf, xcf.shape[1:])
            xct = reshape(xct, xct.shape[1:])
        return xcf, xct

    def encode(self, xcf: Tensor, xct: Tensor) -> Tensor:
        """relu(W1 [xcf, xct]): a (C', F+T) joint context, column-independent."""
        vec = xcf.ndim == 2
        a = reshape(xcf, (1,) + xcf.shape) if vec else xcf
        b = reshape(xct, (1,) + xct.shape) if vec else xct
        if a.shape[1] != self.channels or b.shape[1] != self.channels:
            raise ShapeError(f"profile channel dim must be {self.channels}")
        u = concat(a, b, axis=2)
        enc = _per_column(self.w1, u, self.b1).relu()
        return reshape(enc, enc.shape[1:]) if vec else enc

    def masks(self, x1: Tensor, f_len: int) -> tuple[Tensor, Tensor]:
        """Split the encoding back at f_len and gate each half.

        Returns (mct, mcf): the time mask sigmoid(W2 . time half) of shape
        (C, T) and the frequency mask sigmoid(W3 . freq half) of shape (C, F).
        """
        vec = x1.ndim == 2
        u = reshape(x1, (1,) + x1.shape) if vec else x1
        if not 0 < f_len < u.shape[2]:
            raise ShapeError(f"split point {f_len} out of range for {u.shape[2]} positions")
        part_f, part_t = split(u, axis=2, at=f_len)
        mct = _per_column(self.w2, part_t, self.b2).sigmoid()
        mcf = _per_column(self.w3, part_f, self.b3).sigmoid()
        if vec:
            mct = reshape(mct, mct.shape[1:])
            mcf = reshape(mcf, mcf.shape[1:])
        return mct, mcf

    def apply(self, x: Tensor) -> Tensor:
        """Full pipeline: pool, encode, mask, and recalibrate the map."""
        xb, batched = _as_batch(x)
        _, _, t, f = xb.shape
        xcf = mean_axis(xb, 2)
        xct = mean_axis(xb, 3)
        enc = _per_column(self.w1, concat(xcf, xct, axis=2), self.b1).relu()
        mct, mcf = self.masks(enc, f)
        out = xb * reshape(mct, mct.shape + (1,)) * reshape(mcf, (mcf.shape[0], mcf.shape[1], 1, f))
        return out if batched else reshape(out, x.shape)

    def params(self):
        named = [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)]
        if self.b1 is not None:
            named += [("b1", self.b1), ("b2", self.b2), ("b3", self.b3)]
        return named


def param_count(block: SEBlock | DTCFBlock) -> int:
    """Number of trainable scalars in an attention block."""
    return sum(int(np.prod(t.shape)) for _, t in block.params())
