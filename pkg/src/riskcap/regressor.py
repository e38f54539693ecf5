"""Risk-object box regression: one query token over visual + caption tokens.

The sequence is ``[q; visual tokens; caption tokens]`` with sinusoidal
positions; six pre-norm transformer layers mix it and the state at index 0
goes through an MLP and a sigmoid to give a normalised (x, y, w, h) box.
Trained with smooth-L1 plus GIoU loss.
"""

import numpy as np

from . import nn
from . import tensor as T

VISUAL_SOURCES = ("lo-grid", "hi-grid", "concat", "detector")


def _extents(b, b_hat, k):
    """Overlap and enclosing extent along axis k (0 = x, 1 = y)."""
    w, w_hat = b[..., k + 2], b_hat[..., k + 2]
    d = T.absolute(b[..., k] - b_hat[..., k])
    half = (w + w_hat) * 0.5
    over = T.relu(T.minimum(T.minimum(w, w_hat), half - d))
    return over, T.maximum(T.maximum(w, w_hat), half + d)


def giou(b, b_hat):
    """Per-box (iou, giou) as Tensors for center-format boxes (..., 4).

    Extents are measured from the center distance, so nested and touching
    boxes come out exact, and the enclosing penalty is clamped at zero so
    rounding can never push giou above iou.
    """
    b, b_hat = T.as_tensor(b), T.as_tensor(b_hat)
    if np.any(b.data[..., 2:] <= 0) or np.any(b_hat.data[..., 2:] <= 0):
        raise ValueError("boxes need positive width and height")
    iw, ew = _extents(b, b_hat, 0)
    ih, eh = _extents(b, b_hat, 1)
    inter = iw * ih
    union = b[..., 2] * b[..., 3] + b_hat[..., 2] * b_hat[..., 3] - inter
    iou = inter / union
    enclosing = ew * eh
    return iou, iou - T.relu(enclosing - union) / enclosing


def giou_loss(b, b_hat):
    """Per-box 1 - GIoU."""
    return 1.0 - giou(b, b_hat)[1]


def smooth_l1(b, b_hat, beta=1.0):
    """Per-box smooth-L1 summed over the four coordinates."""
    d = T.as_tensor(b_hat) - T.as_tensor(b)
    ad = T.absolute(d)
    per = T.where(ad.data < beta, (d * d) * (0.5 / beta), ad - 0.5 * beta)
    return per.sum(axis=-1)


def box_loss(b, b_hat):
    """Mean over the batch of smooth-L1 + GIoU loss."""
    return (smooth_l1(b, b_hat) + giou_loss(b, b_hat)).mean()


def cell_boxes(n):
    """Center-format boxes of the cells of a square grid with n cells, row-major."""
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} grid tokens do not form a square grid")
    c = (np.arange(g) + 0.5) / g
    y, x = np.meshgrid(c, c, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), np.full(n, 1.0 / g), np.full(n, 1.0 / g)], axis=1)


class RegressionModule(nn.Module):
    """Stage-2 box head; every parameter here is trained from scratch."""

    def __init__(self, rng, d=64, heads=8, layers=6, d_text=128, visual_source="lo-grid",
                 lo_channels=96, hi_channels=48, max_len=256):
        if visual_source not in VISUAL_SOURCES:
            raise ValueError(f"visual_source must be one of {VISUAL_SOURCES}")
        self.query = nn.Parameter(nn.uniform_init(rng, d, (1, d)))
        self.lo_in = self.hi_in = self.det_in = None
        if visual_source in ("lo-grid", "concat"):
            self.lo_in = nn.Linear(lo_channels, d, rng)
        if visual_source in ("hi-grid", "concat"):
            self.hi_in = nn.Linear(hi_channels, d, rng)
        if visual_source == "detector":
            self.det_in = nn.Linear(lo_channels + 4, d, rng)
        self.text_in = nn.Linear(d_text, d, rng)
        # grid tokens also carry their cell's (x, y, w, h), like detector regions do
        self.cell_in = nn.Linear(4, d, rng) if visual_source != "detector" else None
        # frozen features and LM embeddings are small next to the unit-scale
        # positional code; normalising each stream keeps content visible
        # frozen features are whitened with training-split statistics; raw, the
        # luminance directions swamp the colour contrast
        self.lo_std = nn.Whiten(lo_channels)
        self.hi_std = nn.Whiten(hi_channels)
        self.det_std = nn.Whiten(lo_channels + 4)
        self.vis_norm = nn.LayerNorm(d)
        self.text_norm = nn.LayerNorm(d)
        self.layers = [nn.TransformerLayer(d, heads, rng) for _ in range(layers)]
        self.ln_out = nn.LayerNorm(d)
        self.mlp1 = nn.Linear(d, d, rng)
        self.mlp2 = nn.Linear(d, 4, rng)
        self.visual_source = visual_source
        self.d = d
        self._pos = nn.sinusoidal_positions(max_len, d)

    def visual_tokens(self, lo=None, hi=None, regions=None):
        """(B, N_v, d) Tensor of normalised visual tokens."""
        if self.visual_source == "lo-grid":
            v = self._grid(self.lo_in, self.lo_std, lo)
        elif self.visual_source == "hi-grid":
            v = self._grid(self.hi_in, self.hi_std, hi)
        elif self.visual_source == "concat":
            v = T.concat([self._grid(self.hi_in, self.hi_std, hi), self._grid(self.lo_in, self.lo_std, lo)], axis=1)
        else:
            v = self.det_in(self.det_std(regions))
        return self.vis_norm(v)

    def _grid(self, proj, std, tokens):
        tokens = std(tokens)
        return proj(tokens) + self.cell_in(T.Tensor(cell_boxes(tokens.shape[1])))

    def fit_feature_stats(self, lo=None, hi=None, regions=None):
        """Per-channel mean/std of each visual stream from training features.

        ``regions`` is a list of per-scene (k, channels) proposal arrays.
        """
        if lo is not None:
            self.lo_std.fit(lo)
        if hi is not None:
            self.hi_std.fit(hi)
        if regions is not None:
            self.det_std.fit(np.concatenate(regions))

    def forward(self, text, text_lengths, lo=None, hi=None, regions=None, region_lengths=None):
        """Boxes (B, 4) in (0, 1).

        ``text`` is a (B, N_l, d_text) array of caption token vectors, padded
        past ``text_lengths``.
        """
        text = T.as_tensor(text)
        text_lengths = np.asarray(text_lengths)
        if text.shape[1] == 0 or np.any(text_lengths < 1):
            raise ValueError("every caption needs at least one token")
        b = text.shape[0]
        vis = self.visual_tokens(lo, hi, regions)
        n_v = vis.shape[1]
        seq = T.concat([T.broadcast_to(self.query, (b, 1, self.d)), vis, self.text_norm(self.text_in(text))], axis=1)
        n = seq.shape[1]
        if n > self._pos.shape[0]:
            raise ValueError(f"regression sequence of {n} tokens exceeds {self._pos.shape[0]}")
        x = seq + self._pos[:n]
        valid = np.ones((b, n), dtype=bool)
        if region_lengths is not None and self.visual_source == "detector":
            valid[:, 1:1 + n_v] = np.arange(n_v)[None, :] < np.asarray(region_lengths)[:, None]
        valid[:, 1 + n_v:] = np.arange(text.shape[1])[None, :] < text_lengths[:, None]
        mask = np.where(valid, 0.0, T.NEG_INF)[:, None, None, :]
        for layer in self.layers:
            x = layer(x, mask)
        head = self.ln_out(x[:, 0, :])
        return T.sigmoid(self.mlp2(T.gelu(self.mlp1(head))))
