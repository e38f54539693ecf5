"""Two-stage training, decoding and evaluation.

Stage 1 trains the visual encoder heads, the fusion block and the caption
LM on token cross-entropy. Stage 2 keeps all of that fixed and trains the
box regressor on smooth-L1 + GIoU. Frozen backbone and detector outputs
never change, so they are computed once per scene and cached.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kernels, metrics
from . import tensor as T
from .encoder import Backbones, VisualEncoder, detect_regions
from .fusion import ConcatFusion, GateFusion
from .lm import CaptionLM, greedy_ids, teacher_forcing_batch
from .nn import Module
from .optim import Adam, constant_lr, halving_lr
from .regressor import RegressionModule, box_loss
from .rng import stream, subseed
from .scenes import PROMPT, split_clauses
from .tokenizer import EOS, PAD, Tokenizer


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# frozen features
# ---------------------------------------------------------------------------


@dataclass
class SceneFeatures:
    lo: np.ndarray  # (n, 49, lo_channels)
    hi: np.ndarray  # (n, 144, hi_channels)
    regions: list  # per scene (k, lo_channels + 4)

    def __len__(self):
        return len(self.regions)

    def batch(self, idx):
        idx = np.asarray(idx)
        regs = [self.regions[i] for i in idx]
        k = max(len(r) for r in regs)
        padded = np.zeros((len(regs), k, regs[0].shape[1]))
        for j, r in enumerate(regs):
            padded[j, :len(r)] = r
        return {"lo": self.lo[idx], "hi": self.hi[idx], "regions": padded,
                "region_lengths": np.array([len(r) for r in regs])}


def extract_features(records, backbones):
    """Backbone grids and detector proposals for every scene.

    The detector stand-in proposes every drawn object (risk object and
    distractors alike) plus random boxes; it is not told which one is risky.
    """
    lo, hi, regions = [], [], []
    for rec in records:
        g_lo = backbones.encode_lo(rec.image_lo())
        g_hi = backbones.encode_hi(rec.image_hi())
        objects = [rec.box.as_array()] + [np.asarray(b) for b in rec.object_attrs.get("distractors", [])]
        regs = detect_regions(g_lo, seed=subseed(backbones.seed, f"detector/{rec.id}"), object_boxes=objects)
        lo.append(g_lo.tokens)
        hi.append(g_hi.tokens)
        regions.append(regs.features)
    return SceneFeatures(np.stack(lo), np.stack(hi), regions)


# ---------------------------------------------------------------------------
# stage 1 model
# ---------------------------------------------------------------------------


class CaptionModel(Module):
    """Visual encoder heads + fusion + caption LM (everything stage 1 trains)."""

    def __init__(self, cfg, vocab_size):
        self.encoder = VisualEncoder(stream(cfg.seed, "init/encoder"), d=cfg.c, n_queries=cfg.q, heads=cfg.heads,
                                     lo_channels=cfg.lo_channels, hi_channels=cfg.hi_channels,
                                     use_lo=cfg.use_lo, use_hi=cfg.use_hi)
        frng = stream(cfg.seed, "init/fusion")
        if cfg.use_gate and cfg.use_lo:
            self.fusion = GateFusion(cfg.c, cfg.d_lm, cfg.heads, cfg.q, frng, use_hi=cfg.use_hi)
        else:
            n_streams = 2 * int(cfg.use_lo) + int(cfg.use_hi)
            self.fusion = ConcatFusion(cfg.c, cfg.d_lm, n_streams, cfg.q, frng)
        self.lm = CaptionLM(vocab_size, stream(cfg.seed, "init/lm"), d=cfg.d_lm, heads=cfg.heads,
                            blocks=cfg.lm_blocks, n_prefix=cfg.q, context=cfg.context)

    def fused(self, batch):
        return self.fusion(**self.encoder(**batch))

    def loss(self, batch, inputs, targets, mask):
        return self.lm.loss(inputs, targets, mask, self.fused(batch).tokens)


@dataclass
class Stage1:
    model: CaptionModel
    tokenizer: Tokenizer
    history: list = field(default_factory=list)

    @property
    def prompt_ids(self):
        return self.tokenizer.encode(PROMPT)[:-1]  # BOS + prompt, no EOS

    def caption_ids(self, text):
        return self.tokenizer.encode(text, specials=False)


def train_tokenizer(records):
    return Tokenizer.train([PROMPT] + [r.caption_text for r in records], min_frequency=1)


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _check_finite(loss, stage, epoch, step, lr):
    if not math.isfinite(loss):
        raise TrainingError(f"{stage}: non-finite loss {loss} at epoch {epoch} step {step} (lr {lr:g})")


def stage1_loss(stage1, feats, idx, caption_ids):
    inputs, targets, mask = teacher_forcing_batch(stage1.prompt_ids, [caption_ids[i] for i in idx])
    return stage1.model.loss(feats.batch(idx), inputs, targets, mask)


def train_stage1(train, val, cfg, train_feats, val_feats, log=print, tokenizer=None):
    """Fit the caption path. Returns a :class:`Stage1` with per-epoch history."""
    if not train:
        raise ValueError("stage 1 needs at least one training scene")
    tokenizer = tokenizer or train_tokenizer(train)
    model = CaptionModel(cfg, tokenizer.vocab_size)
    model.encoder.fit_feature_stats(train_feats.lo, train_feats.hi, train_feats.regions)
    s1 = Stage1(model, tokenizer)
    tr_ids = [s1.caption_ids(r.caption_text) for r in train]
    va_ids = [s1.caption_ids(r.caption_text) for r in val]
    opt = Adam(model.parameters(), cfg.lr1, clip_norm=cfg.clip_norm)
    for epoch in range(1, cfg.epochs1 + 1):
        opt.lr = halving_lr(cfg.lr1, epoch, cfg.halve_every)
        t0, total, count = time.perf_counter(), 0.0, 0
        for step, idx in enumerate(_batches(len(train), cfg.batch1, stream(cfg.seed, f"stage1/epoch/{epoch}"))):
            opt.zero_grad()
            loss = stage1_loss(s1, train_feats, idx, tr_ids)
            _check_finite(loss.item(), "stage 1", epoch, step, opt.lr)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        val_loss = caption_loss(s1, val_feats, va_ids, cfg.batch1) if val else None
        s1.history.append({"epoch": epoch, "lr": opt.lr, "train_loss": total / count, "val_loss": val_loss})
        log(f"stage1 epoch {epoch:2d} lr {opt.lr:.3g} train {total / count:.4f} "
            f"val {val_loss if val_loss is None else round(val_loss, 4)} ({time.perf_counter() - t0:.1f}s)")
    return s1


def caption_loss(s1, feats, ids, batch=16):
    total = 0.0
    with T.no_grad():
        for i in range(0, len(ids), batch):
            idx = np.arange(i, min(i + batch, len(ids)))
            total += stage1_loss(s1, feats, idx, ids).item() * len(idx)
    return total / len(ids)


def decode_captions(s1, feats, max_len=64, batch=32):
    """Greedy captions (strings) for every scene in ``feats``."""
    out = []
    with T.no_grad():
        for i in range(0, len(feats), batch):
            idx = np.arange(i, min(i + batch, len(feats)))
            visual = s1.model.fused(feats.batch(idx)).tokens
            out.extend(s1.tokenizer.decode(ids) for ids in greedy_ids(s1.model.lm, s1.prompt_ids, visual, max_len))
    return out


def edit_distance(a, b):
    """Levenshtein distance between two sequences."""
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
    return row[-1]


def caption_accuracy(s1, predictions, records):
    """Percent scores of greedy captions against their references.

    ``token_accuracy`` is word accuracy over tokenizer ids,
    1 - edit_distance / reference length (floored at 0), averaged over
    records. ``positional_token_accuracy`` matches ids position by position
    over the longer sequence; one inserted word shifts everything after it,
    so it is reported for reference only.
    """
    scen = exact = pos_hits = pos_total = 0
    word_acc = 0.0
    for pred, rec in zip(predictions, records):
        clauses = split_clauses(pred)
        scen += bool(clauses) and clauses[0] == rec.caption[0]
        exact += pred == rec.caption_text
        p, g = s1.caption_ids(pred), s1.caption_ids(rec.caption_text)
        word_acc += max(0.0, 1.0 - edit_distance(p, g) / max(len(g), 1))
        pos_hits += sum(x == y for x, y in zip(p, g))
        pos_total += max(len(p), len(g))
    n = max(len(records), 1)
    return {"scenario_clause_accuracy": 100.0 * scen / n, "token_accuracy": 100.0 * word_acc / n,
            "positional_token_accuracy": 100.0 * pos_hits / max(pos_total, 1),
            "exact_caption_accuracy": 100.0 * exact / n}


def stage1_arrays(s1):
    return {k: v.copy() for k, v in s1.model.state_dict().items()}


def save_stage1(path, s1, cfg, backbones):
    meta = {"stage": 1, "history": s1.history, "config_hash": cfg.hash(), "seed": cfg.seed,
            "backbone_digest": checkpoint.array_digest(backbones.arrays())}
    return checkpoint.save(path, s1.model.state_dict(), cfg.to_dict(), s1.tokenizer.state(), meta)


def load_stage1(path, cfg=None):
    from .config import RunConfig

    arrays, header = checkpoint.load(path)
    cfg = cfg or RunConfig.from_dict(header["config"])
    tok = Tokenizer.from_state(header["tokenizer"])
    s1 = Stage1(CaptionModel(cfg, tok.vocab_size), tok, header["metadata"].get("history", []))
    s1.model.load_state_dict(arrays)
    return s1


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


class TextFeaturizer:
    """Caption token vectors for the regressor, computed from the frozen LM.

    ``embedding`` looks up the LM's input token embeddings; ``hidden`` takes
    the LM's final hidden states over [prompt; caption] at the caption
    positions. An EOS token always closes the caption so no sequence is empty.
    """

    def __init__(self, s1, source="embedding"):
        self.s1 = s1
        self.source = source
        self.emb = s1.model.lm.tok_emb.data.copy()  # plain array: never part of a stage-2 graph

    def __call__(self, captions, feats=None, idx=None):
        ids = [self.s1.caption_ids(c)[:self.s1.model.lm.context - len(self.s1.prompt_ids) - 1] + [EOS]
               for c in captions]
        n = max(len(i) for i in ids)
        lengths = np.array([len(i) for i in ids])
        if self.source == "embedding":
            padded = np.full((len(ids), n), PAD, dtype=np.int64)
            for j, i in enumerate(ids):
                padded[j, :len(i)] = i
            out = self.emb[padded]
        else:
            prompt = list(self.s1.prompt_ids)
            seqs = np.full((len(ids), len(prompt) + n), PAD, dtype=np.int64)
            for j, i in enumerate(ids):
                seqs[j, :len(prompt) + len(i)] = prompt + i
            with T.no_grad():
                visual = self.s1.model.fused(feats.batch(idx)).tokens
                h = self.s1.model.lm.hidden(seqs, visual).data
            out = h[:, len(prompt):]
        out = out * (np.arange(n)[None, :, None] < lengths[:, None, None])
        return out, lengths


def _regression_inputs(cfg, feats, idx):
    b = feats.batch(idx)
    return {"lo": b["lo"], "hi": b["hi"], "regions": b["regions"],
            "region_lengths": b["region_lengths"] if cfg.regression_input == "detector" else None}


def predict_boxes(regressor, cfg, feats, text, lengths, idx):
    return regressor(text, lengths, **_regression_inputs(cfg, feats, idx))


@dataclass
class Stage2:
    regressor: RegressionModule
    history: list = field(default_factory=list)


def train_stage2(train, val, s1, cfg, train_feats, val_feats, log=print, val_captions=None):
    """Fit the box regressor with every stage-1 parameter held fixed.

    Training captions are ground truth unless ``cfg.stage2_captions`` is
    ``predicted``; validation uses ``val_captions`` when given (e.g. greedy
    decodes) and ground truth otherwise.
    """
    before = checkpoint.array_digest(stage1_arrays(s1))
    reg = RegressionModule(stream(cfg.seed, "init/regressor"), d=cfg.c, heads=cfg.heads, layers=cfg.reg_layers,
                           d_text=cfg.d_lm, visual_source=cfg.regression_input,
                           lo_channels=cfg.lo_channels, hi_channels=cfg.hi_channels,
                           max_len=1 + 144 + 48 + 100 + cfg.context)
    reg.fit_feature_stats(train_feats.lo, train_feats.hi, train_feats.regions)
    feat = TextFeaturizer(s1, cfg.text_source)
    if cfg.stage2_captions == "predicted":
        tr_caps = decode_captions(s1, train_feats, cfg.max_decode)
    else:
        tr_caps = [r.caption_text for r in train]
    va_caps = val_captions or [r.caption_text for r in val]
    tr_box = np.stack([r.box.as_array() for r in train])
    opt = Adam(reg.parameters(), cfg.lr2)
    out = Stage2(reg)
    for epoch in range(1, cfg.epochs2 + 1):
        opt.lr = constant_lr(cfg.lr2, epoch)
        t0, total = time.perf_counter(), 0.0
        for step, idx in enumerate(_batches(len(train), cfg.batch2, stream(cfg.seed, f"stage2/epoch/{epoch}"))):
            text, lengths = feat([tr_caps[i] for i in idx], train_feats, idx)
            opt.zero_grad()
            loss = box_loss(tr_box[idx], predict_boxes(reg, cfg, train_feats, text, lengths, idx))
            _check_finite(loss.item(), "stage 2", epoch, step, opt.lr)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        val_loss = None
        if val:
            pred = infer_boxes(reg, s1, cfg, val_feats, va_caps)
            with T.no_grad():
                val_loss = box_loss(np.stack([r.box.as_array() for r in val]), pred).item()
        out.history.append({"epoch": epoch, "lr": opt.lr, "train_loss": total / len(train), "val_loss": val_loss})
        log(f"stage2 epoch {epoch:2d} lr {opt.lr:.3g} train {total / len(train):.4f} "
            f"val {val_loss if val_loss is None else round(val_loss, 4)} ({time.perf_counter() - t0:.1f}s)")
    if checkpoint.array_digest(stage1_arrays(s1)) != before:
        raise TrainingError("stage 2 modified stage-1 parameters")
    return out


def infer_boxes(reg, s1, cfg, feats, captions, batch=32):
    feat = TextFeaturizer(s1, cfg.text_source)
    out = []
    with T.no_grad():
        for i in range(0, len(captions), batch):
            idx = np.arange(i, min(i + batch, len(captions)))
            text, lengths = feat([captions[j] for j in idx], feats, idx)
            out.append(predict_boxes(reg, cfg, feats, text, lengths, idx).data)
    return np.concatenate(out)


def save_stage2(path, s2, cfg, stage1_hash):
    meta = {"stage": 2, "history": s2.history, "config_hash": cfg.hash(), "seed": cfg.seed,
            "stage1_sha256": stage1_hash}
    return checkpoint.save(path, s2.regressor.state_dict(), cfg.to_dict(), None, meta)


def load_stage2(path, cfg=None):
    from .config import RunConfig

    arrays, header = checkpoint.load(path)
    cfg = cfg or RunConfig.from_dict(header["config"])
    reg = RegressionModule(stream(cfg.seed, "init/regressor"), d=cfg.c, heads=cfg.heads, layers=cfg.reg_layers,
                           d_text=cfg.d_lm, visual_source=cfg.regression_input,
                           lo_channels=cfg.lo_channels, hi_channels=cfg.hi_channels,
                           max_len=1 + 144 + 48 + 100 + cfg.context)
    reg.load_state_dict(arrays)
    return Stage2(reg, header["metadata"].get("history", [])), header


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(s1, s2, cfg, records, feats):
    """Decode captions, regress boxes from them, and score everything."""
    captions = decode_captions(s1, feats, cfg.max_decode)
    boxes = infer_boxes(s2.regressor, s1, cfg, feats, captions)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "kernel_backend": kernels.BACKEND,
            **caption_accuracy(s1, captions, records),
            "n_test": len(records)}
    report = metrics.evaluate(captions, [r.caption_text for r in records],
                              np.stack([r.box.as_array() for r in records]), boxes,
                              small=cfg.small_area, large=cfg.large_area, metadata=meta)
    return report, captions, boxes
