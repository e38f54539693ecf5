"""Layers built from :mod:`riskcap.tensor` ops.

Modules discover their parameters by walking instance attributes in
definition order, so parameter names are stable (``blocks.2.attn.wq.weight``)
and double as checkpoint keys.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Buffer:
    """Fixed array stored with a module's state but never optimised."""

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    def _walk(self, kind, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, kind):
                yield name, val
            elif isinstance(val, Module):
                yield from val._walk(kind, name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(kind, f"{name}.{i}.")
                    elif isinstance(item, kind):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        return self._walk(Parameter, prefix)

    def named_state(self):
        """Parameters and buffers, i.e. everything a checkpoint holds."""
        yield from self._walk((Parameter, Buffer))

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_state()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_state())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(uniform_init(rng, d_in, (d_out,))) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Whiten(Module):
    """Fixed ZCA whitening (x - mean) @ W, fitted once from training data.

    Eigenvalues are floored at ``floor`` times their mean so directions the
    data never visits are not blown up.
    """

    def __init__(self, channels, floor=1e-3):
        self.mean = Buffer(np.zeros(channels))
        self.matrix = Buffer(np.eye(channels))
        self.floor = floor

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        mu = x.mean(0)
        lam, u = np.linalg.eigh(np.cov((x - mu).T, bias=True).reshape(len(mu), len(mu)))
        lam = np.maximum(lam, 0.0)
        self.mean.data = mu
        self.matrix.data = (u / np.sqrt(lam + self.floor * max(lam.mean(), 1e-12))) @ u.T

    def forward(self, x):
        return (T.as_tensor(x) - self.mean.data) @ T.Tensor(self.matrix.data)


class MultiHeadAttention(Module):
    """Projected multi-head attention; key/value input width may differ."""

    def __init__(self, d_model, heads, rng, d_kv=None):
        if d_model % heads:
            raise ValueError(f"width {d_model} not divisible by {heads} heads")
        d_kv = d_model if d_kv is None else d_kv
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_kv, d_model, rng)
        self.wv = Linear(d_kv, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.heads = heads

    def forward(self, q_in, kv_in, mask=None):
        q, k, v = self.wq(q_in), self.wk(kv_in), self.wv(kv_in)
        return self.wo(T.multi_head_attention(q, k, v, self.heads, mask))


class FeedForward(Module):
    def __init__(self, d, rng, mult=4):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, d, heads, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)

    def forward(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))


def key_padding_mask(lengths, n):
    """Additive (B, 1, 1, n) mask hiding key positions >= length."""
    lengths = np.asarray(lengths)
    hide = np.arange(n)[None, :] >= lengths[:, None]
    return np.where(hide, T.NEG_INF, 0.0)[:, None, None, :]


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out
