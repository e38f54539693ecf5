"""Dual-branch visual encoder: frozen stand-in backbones + trainable heads.

Frozen part (plain numpy, never touched by an optimizer):

* :class:`PatchBackbone` - non-overlapping 32x32 patch embedding. Its weight
  is a fixed low-frequency cosine basis per colour channel mixed by a seeded
  Gaussian matrix, so each token summarises the colour layout of one patch.
* :func:`detect_regions` - proposal sampler standing in for a detector.

Trainable part: per-path linear projections and three independent
:class:`QueryFormer` instances that squeeze each path to ``Q`` tokens.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .rng import stream
from .scenes import HI_SIZE, LO_SIZE, NormBox

PATCH = 32
MIN_PROPOSALS = 10
MAX_PROPOSALS = 100


@dataclass
class GridFeatures:
    tokens: np.ndarray  # (rows * cols, channels), row-major
    source: str  # "lo" or "hi"
    spatial: tuple

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


@dataclass
class RegionFeatures:
    features: np.ndarray  # (n, channels + 4): pooled embedding then box
    boxes: np.ndarray  # (n, 4) center format
    scores: np.ndarray  # (n,), descending

    def __len__(self):
        return len(self.scores)


def _cosine_basis(patch, freqs):
    c = (np.arange(patch) + 0.5) / patch
    rows = []
    for fy in range(freqs):
        for fx in range(freqs):
            b = np.outer(np.cos(np.pi * fy * c), np.cos(np.pi * fx * c))
            rows.append(b / np.linalg.norm(b))
    return np.stack(rows)  # (freqs^2, patch, patch)


class PatchBackbone:
    """Frozen linear patch embedding for one input resolution."""

    def __init__(self, image_size, channels, seed, name, freqs=4):
        if image_size % PATCH:
            raise ValueError(f"image size {image_size} not a multiple of {PATCH}")
        self.image_size = image_size
        self.grid = image_size // PATCH
        self.channels = channels
        rng = stream(seed, f"backbone/{name}")
        basis = _cosine_basis(PATCH, freqs)  # (K, P, P)
        k = basis.shape[0]
        # (P, P, 3, 3K): basis k applied to colour c lands in column c*K + k
        full = np.zeros((PATCH, PATCH, 3, 3 * k))
        for c in range(3):
            full[:, :, c, c * k:(c + 1) * k] = np.moveaxis(basis, 0, -1)
        mix = rng.normal(size=(3 * k, channels)) / np.sqrt(3 * k)
        self.weight = (full.reshape(-1, 3 * k) @ mix) / PATCH
        self.bias = rng.uniform(-0.1, 0.1, size=channels)
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    def patches(self, image):
        g = self.grid
        return (image.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 1, 3, 4)
                .reshape(g * g, PATCH * PATCH * 3))

    def __call__(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        if image.shape != (self.image_size, self.image_size, 3):
            raise ValueError(f"expected a {self.image_size}x{self.image_size} raster, got {image.shape}")
        return self.patches(image) @ self.weight + self.bias


class Backbones:
    """Both frozen backbones for one root seed."""

    def __init__(self, seed, lo_channels=96, hi_channels=48):
        self.seed = seed
        self.lo = PatchBackbone(LO_SIZE, lo_channels, seed, "lo")
        self.hi = PatchBackbone(HI_SIZE, hi_channels, seed, "hi")

    def encode_lo(self, raster_lo):
        return GridFeatures(self.lo(raster_lo), "lo", (self.lo.grid, self.lo.grid))

    def encode_hi(self, raster_hi):
        return GridFeatures(self.hi(raster_hi), "hi", (self.hi.grid, self.hi.grid))

    def arrays(self):
        return {"lo.weight": self.lo.weight, "lo.bias": self.lo.bias,
                "hi.weight": self.hi.weight, "hi.bias": self.hi.bias}


def _overlap_1d(lo, hi, n):
    edges = np.arange(n + 1) / n
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)


def pool_box(grid_tokens, grid, box):
    """Overlap-area weighted mean of grid tokens under ``box`` (center format)."""
    x1, y1, x2, y2 = box[0] - box[2] / 2, box[1] - box[3] / 2, box[0] + box[2] / 2, box[1] + box[3] / 2
    wts = np.outer(_overlap_1d(y1, y2, grid), _overlap_1d(x1, x2, grid)).reshape(-1)
    return wts @ grid_tokens / wts.sum()


def _jitter(rng, box, frac=0.05):
    """Perturb each coordinate by at most ``frac`` of the box extent."""
    x, y, w, h = box
    x += rng.uniform(-frac, frac) * w
    y += rng.uniform(-frac, frac) * h
    w *= 1 + rng.uniform(-frac, frac)
    h *= 1 + rng.uniform(-frac, frac)
    x1, y1 = max(x - w / 2, 0.0), max(y - h / 2, 0.0)
    x2, y2 = min(x + w / 2, 1.0), min(y + h / 2, 1.0)
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def _random_box(rng):
    area = np.exp(rng.uniform(np.log(0.002), np.log(0.2)))
    r = rng.uniform(0.5, 2.0)
    w, h = min(np.sqrt(area * r), 0.95), min(np.sqrt(area / r), 0.95)
    return np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])


def detect_regions(grid, gt_box=None, seed=0, object_boxes=(), max_proposals=MAX_PROPOSALS):
    """Proposal sampler standing in for a frozen detector.

    ``grid`` is the lo-path :class:`GridFeatures` (pooling source).
    Jittered copies of ``gt_box`` and of every ``object_boxes`` entry are
    always proposed; random boxes fill the rest. The count is clamped to
    [10, ``max_proposals``] and proposals come out sorted by score.
    """
    rng = stream(seed, "detector")
    max_proposals = int(np.clip(max_proposals, MIN_PROPOSALS, MAX_PROPOSALS))
    found = []
    if gt_box is not None:
        found.append(np.asarray(gt_box.as_array() if isinstance(gt_box, NormBox) else gt_box, float))
    found.extend(np.asarray(b, float) for b in object_boxes)
    count = int(np.clip(rng.poisson(30), MIN_PROPOSALS, max_proposals))
    count = max(count, min(len(found), max_proposals))
    boxes, scores = [], []
    for b in found[:count]:
        boxes.append(_jitter(rng, b))
        scores.append(rng.uniform(0.6, 1.0))
    while len(boxes) < count:
        boxes.append(_random_box(rng))
        scores.append(rng.uniform(0.0, 0.7))
    boxes, scores = np.array(boxes), np.array(scores)
    order = np.argsort(-scores, kind="stable")
    boxes, scores = boxes[order], scores[order]
    rows, _ = grid.spatial
    pooled = np.stack([pool_box(grid.tokens, rows, b) for b in boxes])
    return RegionFeatures(np.concatenate([pooled, boxes], axis=1), boxes, scores)


class QueryFormer(nn.Module):
    """Learned queries cross-attending to a variable-length token set."""

    def __init__(self, n_queries, d, heads, rng):
        self.queries = nn.Parameter(nn.uniform_init(rng, d, (n_queries, d)))
        self.ln_q = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, heads, rng)
        self.ln_ffn = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, rng)
        self.ln_out = nn.LayerNorm(d)

    def forward(self, tokens, mask=None):
        """``tokens`` (B, N, d) -> (B, Q, d); ``mask`` hides padded keys."""
        if tokens.shape[-2] < 1:
            raise ValueError("query former needs at least one input token")
        q = self.queries
        if tokens.ndim == 3:
            q = T.broadcast_to(q, (tokens.shape[0],) + q.shape)
        h = q + self.attn(self.ln_q(q), self.ln_kv(tokens), mask)
        h = h + self.ffn(self.ln_ffn(h))
        return self.ln_out(h)


class VisualEncoder(nn.Module):
    """Trainable projections and query formers over frozen features.

    Paths are built only when enabled: ``use_lo`` drives the lo grid and
    region paths, ``use_hi`` the hi grid path.
    """

    def __init__(self, rng, d=64, n_queries=8, heads=8, lo_channels=96, hi_channels=48,
                 lo_tokens=49, hi_tokens=144, use_lo=True, use_hi=True):
        self.lo_proj = self.lo_pos = self.qf_lo = None
        self.reg_proj = self.qf_reg = None
        self.hi_proj = self.hi_pos = self.qf_hi = None
        # frozen features are whitened with training-split statistics
        self.lo_std = nn.Whiten(lo_channels)
        self.reg_std = nn.Whiten(lo_channels + 4)
        self.hi_std = nn.Whiten(hi_channels)
        if use_lo:
            self.lo_proj = nn.Linear(lo_channels, d, rng)
            self.lo_pos = nn.Parameter(rng.normal(scale=0.02, size=(lo_tokens, d)))
            self.qf_lo = QueryFormer(n_queries, d, heads, rng)
            self.reg_proj = nn.Linear(lo_channels + 4, d, rng)
            self.qf_reg = QueryFormer(n_queries, d, heads, rng)
        if use_hi:
            self.hi_proj = nn.Linear(hi_channels, d, rng)
            self.hi_pos = nn.Parameter(rng.normal(scale=0.02, size=(hi_tokens, d)))
            self.qf_hi = QueryFormer(n_queries, d, heads, rng)

    def forward(self, lo=None, hi=None, regions=None, region_lengths=None):
        """Arrays (B, N, channels) in; dict of (B, Q, d) Tensors out."""
        out = {"L_g": None, "H_g": None, "L_r": None}
        if self.qf_lo is not None:
            out["L_g"] = self.qf_lo(self.lo_proj(self.lo_std(lo)) + self.lo_pos)
            mask = None
            if region_lengths is not None:
                mask = nn.key_padding_mask(region_lengths, regions.shape[1])
            out["L_r"] = self.qf_reg(self.reg_proj(self.reg_std(regions)), mask)
        if self.qf_hi is not None:
            out["H_g"] = self.qf_hi(self.hi_proj(self.hi_std(hi)) + self.hi_pos)
        return out

    def fit_feature_stats(self, lo, hi, regions):
        """Fit the input whitening; ``regions`` is a list of (k, c) arrays."""
        self.lo_std.fit(lo)
        self.hi_std.fit(hi)
        self.reg_std.fit(np.concatenate(regions))
