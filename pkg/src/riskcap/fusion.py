"""Gate-attention fusion of the grid streams into the region stream."""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T


@dataclass
class FusedVisual:
    tokens: T.Tensor  # (B, Q, D_l) fed to the language model
    c_g: T.Tensor = None
    v_r: T.Tensor = None
    v: T.Tensor = None
    v_hat: T.Tensor = None
    gate: T.Tensor = None

    @property
    def n_tokens(self):
        return self.tokens.shape[-2]


def _check_tokens(named, q, c):
    for name, t in named.items():
        if t is None:
            continue
        if t.shape[-2:] != (q, c):
            raise ValueError(f"{name} must be {q}x{c} tokens, got {t.shape[-2:]}")


class GateFusion(nn.Module):
    """V_hat = w * CA(SA(L_r), C_g, C_g) + L_r with scalar w starting at 0.

    C_g is [L_g; H_g] along channels (width 2C), or L_g alone when the hi
    branch is disabled; the cross-attention key/value projections absorb
    the width change.
    """

    def __init__(self, d, d_lm, heads, n_queries, rng, use_hi=True):
        self.sa = nn.MultiHeadAttention(d, heads, rng)
        self.ca = nn.MultiHeadAttention(d, heads, rng, d_kv=2 * d if use_hi else d)
        self.w = nn.Parameter(np.zeros(()))
        self.proj = nn.Linear(d, d_lm, rng)
        self.d, self.q, self.use_hi = d, n_queries, use_hi

    def fuse(self, L_g, H_g, L_r):
        _check_tokens({"L_g": L_g, "H_g": H_g, "L_r": L_r}, self.q, self.d)
        if L_g is None or L_r is None or (self.use_hi and H_g is None):
            raise ValueError("gate fusion needs L_g, L_r and (with the hi branch) H_g")
        c_g = T.concat([L_g, H_g], axis=-1) if self.use_hi else L_g
        v_r = self.sa(L_r, L_r)
        v = self.ca(v_r, c_g)
        v_hat = self.w * v + L_r
        return FusedVisual(self.project_to_lm(v_hat), c_g, v_r, v, v_hat, self.w)

    def project_to_lm(self, v_hat):
        return self.proj(v_hat)

    def forward(self, L_g=None, H_g=None, L_r=None):
        return self.fuse(L_g, H_g, L_r)


class ConcatFusion(nn.Module):
    """Ablation: channel-concatenate whichever streams exist, then project."""

    def __init__(self, d, d_lm, n_streams, n_queries, rng):
        self.mix = nn.Linear(n_streams * d, d, rng)
        self.proj = nn.Linear(d, d_lm, rng)
        self.d, self.q, self.n_streams = d, n_queries, n_streams

    def fuse(self, L_g=None, H_g=None, L_r=None):
        _check_tokens({"L_g": L_g, "H_g": H_g, "L_r": L_r}, self.q, self.d)
        streams = [t for t in (L_g, H_g, L_r) if t is not None]
        if len(streams) != self.n_streams:
            raise ValueError(f"expected {self.n_streams} streams, got {len(streams)}")
        mixed = self.mix(T.concat(streams, axis=-1) if len(streams) > 1 else streams[0])
        return FusedVisual(self.project_to_lm(mixed), v_hat=mixed)

    def project_to_lm(self, v_hat):
        return self.proj(v_hat)

    def forward(self, L_g=None, H_g=None, L_r=None):
        return self.fuse(L_g, H_g, L_r)
