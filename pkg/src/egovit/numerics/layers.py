"""Linear, layer-norm, softmax, multi-head attention, MLP and LSTM over :class:`Tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import tensor as tt
from .tensor import Tensor, as_tensor, parameter


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class LinearParams:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class MhaParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    heads: int = 1

    @property
    def dim(self) -> int:
        return self.q.in_dim


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class LstmLayer:
    w_ih: Tensor  # [in, 4H], gate blocks ordered i, f, g, o
    w_hh: Tensor  # [H, 4H]
    bias: Tensor  # [4H]


@dataclass
class LstmParams:
    layers: list[LstmLayer] = field(default_factory=list)

    @property
    def hidden(self) -> int:
        return self.layers[0].w_hh.shape[0]


# ---------------------------------------------------------------- init helpers

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_linear(rng, d_in: int, d_out: int, std: float = 0.02) -> LinearParams:
    return LinearParams(parameter(trunc_normal(rng, (d_in, d_out), std)), parameter(np.zeros(d_out)))


def init_layer_norm(dim: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(parameter(np.ones(dim)), parameter(np.zeros(dim)), eps)


def init_mha(rng, dim: int, heads: int, std: float = 0.02) -> MhaParams:
    if dim % heads:
        raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
    return MhaParams(*(init_linear(rng, dim, dim, std) for _ in range(4)), heads=heads)


def init_mlp(rng, dim: int, hidden: int, std: float = 0.02) -> MlpParams:
    return MlpParams(init_linear(rng, dim, hidden, std), init_linear(rng, hidden, dim, std))


def init_lstm(rng, d_in: int, hidden: int, num_layers: int = 2, std: float = 0.02) -> LstmParams:
    if num_layers < 1:
        raise ConfigError("LSTM needs at least one layer")
    layers = []
    for i in range(num_layers):
        din = d_in if i == 0 else hidden
        layers.append(LstmLayer(parameter(trunc_normal(rng, (din, 4 * hidden), std)),
                                parameter(trunc_normal(rng, (hidden, 4 * hidden), std)),
                                parameter(np.zeros(4 * hidden))))
    return LstmParams(layers)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / dicts / lists depth-first in declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from named_parameters(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from named_parameters(v, f"{prefix}.{i}" if prefix else str(i))


def count_parameters(obj) -> int:
    return sum(t.size for _, t in named_parameters(obj))


# ---------------------------------------------------------------------- forward ops

def linear_forward(x, p: LinearParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"linear expects last dim {p.in_dim}, got {x.shape[-1]} (input shape {x.shape})")
    if x.ndim == 1:
        return (tt.matmul(x.reshape(1, p.in_dim), p.weight) + p.bias).reshape(p.out_dim)
    return tt.matmul(x, p.weight) + p.bias


def softmax(x, axis: int = -1) -> Tensor:
    return tt.softmax(as_tensor(x), axis)


def layer_norm(x, p: LayerNormParams) -> Tensor:
    return tt.layer_norm(as_tensor(x), p.gamma, p.beta, p.eps)


def mean_over_axis(x, axis: int) -> Tensor:
    return tt.mean(as_tensor(x), axis=axis)


def gelu(x) -> Tensor:
    return tt.gelu(as_tensor(x))


def mlp_forward(x, p: MlpParams) -> Tensor:
    return linear_forward(gelu(linear_forward(x, p.fc1)), p.fc2)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nd = x.ndim
    return tt.swapaxes(x, nd - 3, nd - 2)  # [..., h, n, dh]


def multi_head_attention(tokens, p: MhaParams, key_mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention over the second-to-last axis.

    ``tokens`` is [..., N, D]; returns ``(out [..., N, D], attn [..., h, N, N])``.
    ``key_mask`` (broadcastable to [..., N], 1 = keep) removes keys from every
    query's softmax; a query whose keys are all masked gets uniform weights.
    """
    x = as_tensor(tokens)
    d = x.shape[-1]
    if d % p.heads:
        raise ConfigError(f"model dim {d} is not divisible by {p.heads} heads")
    if x.shape[-2] < 1:
        raise ShapeError("attention needs at least one token")
    dh = d // p.heads
    q = _split_heads(linear_forward(x, p.q), p.heads)
    k = _split_heads(linear_forward(x, p.k), p.heads)
    v = _split_heads(linear_forward(x, p.v), p.heads)
    scores = tt.matmul(q, tt.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        penalty = np.where(km, 0.0, -1e30)[..., None, None, :]
        scores = scores + penalty
    attn = tt.softmax(scores, axis=-1)
    ctx = tt.matmul(attn, v)  # [..., h, N, dh]
    nd = ctx.ndim
    ctx = tt.swapaxes(ctx, nd - 3, nd - 2)
    ctx = ctx.reshape(*ctx.shape[:-2], d)
    return linear_forward(ctx, p.o), attn


def lstm_forward(seq, p: LstmParams) -> tuple[Tensor, Tensor]:
    """Stacked LSTM over axis -2 of ``seq`` ([..., T, Din]); zero initial state.

    Returns the top layer's hidden states [..., T, H] and the last one [..., H].
    """
    x = as_tensor(seq)
    steps = x.shape[-2]
    if steps < 1:
        raise ShapeError("LSTM needs a sequence of length >= 1")
    for layer in p.layers:
        hid = layer.w_hh.shape[0]
        pre = linear_forward(x, LinearParams(layer.w_ih, layer.bias))  # [..., T, 4H]
        lead = x.shape[:-2]
        h = Tensor(np.zeros(lead + (hid,)))
        c = Tensor(np.zeros(lead + (hid,)))
        outs = []
        for t in range(steps):
            z = pre[..., t, :] + tt.matmul(h.reshape(*lead, 1, hid), layer.w_hh).reshape(*lead, 4 * hid) \
                if t else pre[..., t, :]
            i = tt.sigmoid(z[..., 0:hid])
            f = tt.sigmoid(z[..., hid:2 * hid])
            g = tt.tanh(z[..., 2 * hid:3 * hid])
            o = tt.sigmoid(z[..., 3 * hid:4 * hid])
            c = f * c + i * g if t else i * g
            h = o * tt.tanh(c)
            outs.append(h)
        x = tt.stack(outs, axis=-2)
    return x, outs[-1]
