"""Toy decoder-only caption model with adapter-injected visual tokens.

Block 0 is a plain causal transformer block over the text. Every later
block owns an adapter prefix (Q learnable vectors). The prefix is summed
with the fused visual tokens, projected with the block's own key/value
weights, and attended with a separate softmax; the result enters the
block output through a per-head gate initialised at zero.
"""

import numpy as np

from . import nn
from . import tensor as T
from .tokenizer import BOS, EOS, PAD


class DecoderBlock(nn.Module):
    """Pre-norm causal block. ``cache`` (a dict) keeps keys/values for
    incremental decoding; pass the same dict on every call."""

    def __init__(self, d, heads, rng):
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, heads, rng)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, rng)
        self.heads = heads

    def _self_attention(self, h, mask, cache):
        a = self.attn
        q, k, v = a.wq(h), a.wk(h), a.wv(h)
        if cache is not None:
            if "k" in cache:
                k = T.concat([cache["k"], k], axis=-2)
                v = T.concat([cache["v"], v], axis=-2)
            cache["k"], cache["v"] = k, v
        return q, T.multi_head_attention(q, k, v, self.heads, mask)

    def forward(self, x, visual=None, mask=None, cache=None):
        h = self.ln1(x)
        _, mixed = self._self_attention(h, mask, cache)
        x = x + self.attn.wo(mixed)
        return x + self.ffn(self.ln2(x))


class AdapterLayer(DecoderBlock):
    def __init__(self, d, heads, n_prefix, rng):
        super().__init__(d, heads, rng)
        self.prefix = nn.Parameter(rng.normal(scale=0.02, size=(n_prefix, d)))
        # the toy LM trains from scratch, so there is no pretrained body for a
        # zero-init gate to protect; starting open lets visual gradient flow at once
        self.gate = nn.Parameter(np.ones(heads))
        self._spread = np.ones((1, d // heads))

    def forward(self, x, visual=None, mask=None, cache=None):
        a = self.attn
        h = self.ln1(x)
        q, mixed = self._self_attention(h, mask, cache)
        if visual is not None:
            if cache is not None and "pk" in cache:
                pk, pv = cache["pk"], cache["pv"]
            else:
                p = self.prefix + visual
                pk, pv = a.wk(p), a.wv(p)
                if cache is not None:
                    cache["pk"], cache["pv"] = pk, pv
            pref = T.multi_head_attention(q, pk, pv, self.heads)
            per_channel = (self.gate.reshape(self.heads, 1) * self._spread).reshape(-1)
            mixed = mixed + pref * per_channel
        x = x + a.wo(mixed)
        return x + self.ffn(self.ln2(x))


class CaptionLM(nn.Module):
    def __init__(self, vocab_size, rng, d=128, heads=8, blocks=4, n_prefix=8, context=128):
        if blocks < 1:
            raise ValueError("need at least one block")
        self.tok_emb = nn.Parameter(rng.normal(scale=0.1, size=(vocab_size, d)))
        self.pos_emb = nn.Parameter(rng.normal(scale=0.02, size=(context, d)))
        self.blocks = [DecoderBlock(d, heads, rng)]
        self.blocks += [AdapterLayer(d, heads, n_prefix, rng) for _ in range(blocks - 1)]
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab_size, rng)
        self.context = context
        self.d = d

    def hidden(self, ids, visual=None, caches=None):
        """Final-layer states (B, N, d) for token ids (B, N).

        With ``caches`` (one dict per block) the ids continue a sequence
        whose earlier keys/values are already cached.
        """
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        start = 0 if not caches or "k" not in caches[0] else caches[0]["k"].shape[-2]
        n = ids.shape[1]
        if start + n > self.context:
            raise ValueError(f"sequence length {start + n} exceeds context {self.context}")
        if visual is not None and not isinstance(visual, T.Tensor):
            visual = T.Tensor(visual)
        x = T.embedding(self.tok_emb, ids) + self.pos_emb[start:start + n]
        mask = np.triu(np.full((n, start + n), T.NEG_INF), k=start + 1)
        for i, blk in enumerate(self.blocks):
            x = blk(x, visual, mask, None if caches is None else caches[i])
        return self.ln_f(x)

    def forward(self, ids, visual=None):
        return self.head(self.hidden(ids, visual))

    def loss(self, ids, targets, mask, visual=None):
        return T.cross_entropy(self.forward(ids, visual), targets, mask)


def teacher_forcing_batch(prompt_ids, caption_ids_list):
    """Pack [BOS prompt caption EOS] rows; loss only on caption + EOS.

    ``prompt_ids`` starts with BOS and has no EOS; each caption list has no
    specials. Returns (inputs, targets, mask) arrays of shape (B, N).
    """
    seqs = [list(prompt_ids) + list(c) + [EOS] for c in caption_ids_list]
    n = max(len(s) for s in seqs) - 1
    b = len(seqs)
    inputs = np.full((b, n), PAD, dtype=np.int64)
    targets = np.full((b, n), PAD, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    start = len(prompt_ids) - 1
    for i, s in enumerate(seqs):
        inputs[i, :len(s) - 1] = s[:-1]
        targets[i, :len(s) - 1] = s[1:]
        mask[i, start:len(s) - 1] = True
    return inputs, targets, mask


def greedy_ids(lm, prompt_ids, visual, max_len):
    """Argmax decoding for a batch sharing one prompt; returns id lists without EOS.

    ``visual`` is a (B, Q, d) array or Tensor, or None for text-only.
    Ties go to the lowest id (``np.argmax`` keeps the first maximum).
    """
    prompt_ids = list(prompt_ids)
    if prompt_ids[0] != BOS:
        prompt_ids = [BOS] + prompt_ids
    b = 1 if visual is None else visual.shape[0]
    max_len = min(max_len, lm.context - len(prompt_ids))
    seq = np.tile(np.asarray(prompt_ids, dtype=np.int64), (b, 1))
    done = np.zeros(b, dtype=bool)
    out = [[] for _ in range(b)]
    caches = [{} for _ in lm.blocks]
    with T.no_grad():
        step_ids = seq
        for _ in range(max_len):
            h = lm.hidden(step_ids, visual, caches)
            logits = lm.head(h[:, -1, :]).data
            nxt = np.argmax(logits, axis=-1)
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            step_ids = np.where(done, EOS, nxt)[:, None]
    return out
