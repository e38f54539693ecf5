"""Gradient-check registry: every primitive plus both end-to-end losses.

Shared by the test suite and the ``grad-check`` command.
"""

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .nn import Parameter


def param(rng, *shape, scale=1.0):
    return Parameter(rng.normal(size=shape) * scale)


def primitive_cases(rng):
    """(name, f, inputs) for every differentiable primitive at small shapes."""
    n, m = rng.integers(1, 6, size=2)
    a, b = param(rng, n, m), param(rng, n, m)
    pos = Parameter(rng.uniform(0.5, 2.0, size=(n, m)))
    w = param(rng, m, 3)
    row = param(rng, m)
    gain, bias = param(rng, m), param(rng, m)
    ids = rng.integers(0, 5, size=(n, 2))
    emb = param(rng, 5, m)
    logits = param(rng, n, 4)
    targets = rng.integers(0, 4, size=n)
    r = rng.normal(size=(n, m))
    stack, stack2 = param(rng, 2, n, m), param(rng, 2, n, m)
    stack_r = rng.normal(size=(2, n, m))
    a4, b4, c4 = param(rng, n, 4), param(rng, n, 4), param(rng, n, 4)
    r4 = rng.normal(size=(n, 4))
    causal = T.causal_mask(n)
    far = Parameter(a.data + np.sign(a.data - b.data) * 0.1)  # keep max/min away from ties
    return [
        ("add", lambda x: ((x[0] + x[1]) * r).sum(), [a, b]),
        ("broadcast_add", lambda x: ((x[0] + x[1]) * r).sum(), [a, row]),
        ("sub", lambda x: ((x[0] - x[1]) * r).sum(), [a, b]),
        ("mul", lambda x: (x[0] * x[1]).sum(), [a, b]),
        ("div", lambda x: (x[0] / x[1]).sum(), [a, pos]),
        ("pow", lambda x: (x[0] ** 3).sum(), [a]),
        ("exp", lambda x: (T.exp(x[0]) * r).sum(), [a]),
        ("log", lambda x: (T.log(x[0]) * r).sum(), [pos]),
        ("sqrt", lambda x: (T.sqrt(x[0]) * r).sum(), [pos]),
        ("tanh", lambda x: (T.tanh(x[0]) * r).sum(), [a]),
        ("sigmoid", lambda x: (T.sigmoid(x[0]) * r).sum(), [a]),
        ("gelu", lambda x: (T.gelu(x[0]) * r).sum(), [a]),
        ("relu", lambda x: (T.relu(x[0] + 0.0) * r).sum(), [pos]),
        ("abs", lambda x: (T.absolute(x[0]) * r).sum(), [pos]),
        ("maximum", lambda x: (T.maximum(x[0], x[1]) * r).sum(), [far, b]),
        ("minimum", lambda x: (T.minimum(x[0], x[1]) * r).sum(), [far, b]),
        ("where", lambda x: (T.where(r > 0, x[0], x[1]) * r).sum(), [a, b]),
        ("matmul", lambda x: ((x[0] @ x[1]) ** 2).sum(), [a, w]),
        ("matmul_stacked", lambda x: ((x[0] @ x[1]) ** 2).sum(), [stack, w]),
        ("matmul_batched", lambda x: ((x[0] @ x[1].swapaxes(-1, -2)) ** 2).sum(), [stack, stack2]),
        ("broadcast_to", lambda x: (T.broadcast_to(x[0], (2, n, m)) * stack_r).sum(), [row]),
        ("sum_axis", lambda x: (x[0].sum(axis=0) ** 2).sum(), [a]),
        ("mean", lambda x: (x[0].mean(axis=1, keepdims=True) * x[0]).sum(), [a]),
        ("reshape", lambda x: (x[0].reshape(-1) ** 2 * r.reshape(-1)).sum(), [a]),
        ("transpose", lambda x: ((x[0].T @ x[1]) * 0.5).sum(), [a, b]),
        ("getitem", lambda x: (x[0][:, :1] ** 2).sum() + (x[0][[0, 0]] * 3).sum(), [a]),
        ("concat", lambda x: (T.concat([x[0], x[1]], axis=1) ** 2).sum(), [a, b]),
        ("softmax", lambda x: (T.softmax(x[0], axis=-1) * r).sum(), [a]),
        ("log_softmax", lambda x: (T.log_softmax(x[0], axis=-1) * r).sum(), [a]),
        ("layer_norm", lambda x: (T.layer_norm(x[0], x[1], x[2]) * r).sum(), [a, gain, bias]),
        ("embedding", lambda x: (T.embedding(x[0], ids) ** 2).sum(), [emb]),
        ("cross_entropy", lambda x: T.cross_entropy(x[0], targets), [logits]),
        ("attention", lambda x: (T.multi_head_attention(x[0], x[1], x[1], 1) * r).sum(), [a, b]),
        ("attention_masked", lambda x: (T.multi_head_attention(x[0], x[1], x[2], 2, causal) * r4).sum(),
         [a4, b4, c4]),
    ]


def toy_config(seed):
    from .config import RunConfig

    return RunConfig(seed=seed, n_scenes=1, c=8, d_lm=16, q=2, heads=2, lm_blocks=2, reg_layers=2,
                     lo_channels=6, hi_channels=4)


def end_to_end_cases(seed):
    """Stage-1 caption cross-entropy and the box loss on one toy scene.

    The fusion gate and adapter gates are set to random non-zero values so
    every path (grid, region, adapter prefix) carries gradient.
    """
    from .encoder import Backbones
    from .regressor import RegressionModule, box_loss
    from .rng import stream
    from .scenes import generate
    from .training import CaptionModel, Stage1, TextFeaturizer, extract_features, stage1_loss, train_tokenizer

    cfg = toy_config(seed)
    recs = generate(seed, 1)
    feats = extract_features(recs, Backbones(seed, cfg.lo_channels, cfg.hi_channels))
    tok = train_tokenizer(recs)
    s1 = Stage1(CaptionModel(cfg, tok.vocab_size), tok)
    rng = stream(seed, "grad-check")
    for name, p in s1.model.named_parameters():
        if name.endswith(".w") or name.endswith(".gate"):
            p.data = rng.uniform(0.2, 1.0, size=p.shape)
    ids = [s1.caption_ids(recs[0].caption_text)]
    reg = RegressionModule(rng, d=cfg.c, heads=cfg.heads, layers=cfg.reg_layers, d_text=cfg.d_lm,
                           lo_channels=cfg.lo_channels, hi_channels=cfg.hi_channels)
    text, lengths = TextFeaturizer(s1)([recs[0].caption_text])
    gt = recs[0].box.as_array()[None]
    lo = feats.lo[:1]
    return [
        ("stage1_cross_entropy", lambda xs: stage1_loss(s1, feats, [0], ids), s1.model.parameters()),
        ("regression_loss", lambda xs: box_loss(gt, reg(text, lengths, lo=lo)), reg.parameters()),
    ]


def run_grad_checks(seeds, end_to_end=True, max_coords=2):
    """Worst relative error per case name over ``seeds``."""
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = [(n, f, x, None) for n, f, x in primitive_cases(rng)]
        if end_to_end:
            cases += [(n, f, x, max_coords) for n, f, x in end_to_end_cases(seed)]
        for name, f, inputs, coords in cases:
            err = grad_check(f, inputs, max_coords=coords, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
