import numpy as np
import pytest

from riskcap import tensor as T
from riskcap.checks import toy_config
from riskcap.encoder import Backbones
from riskcap.gradcheck import grad_check
from riskcap.lm import CaptionLM, greedy_ids, teacher_forcing_batch
from riskcap.nn import Parameter
from riskcap.scenes import generate
from riskcap.tokenizer import BOS, EOS
from riskcap import training as tr


def lm(seed=0, vocab=20, blocks=3):
    return CaptionLM(vocab, np.random.default_rng(seed), d=16, heads=2, blocks=blocks, n_prefix=3, context=32)


def ids(seed, b=2, n=7, vocab=20):
    return np.random.default_rng(seed).integers(4, vocab, size=(b, n))


def test_first_block_has_no_adapter():
    m = lm()
    names = [n for n, _ in m.named_parameters()]
    assert not any(n.startswith("blocks.0.prefix") for n in names)
    assert "blocks.1.prefix" in names and "blocks.2.gate" in names


def test_zero_visual_and_adapters_reduce_to_text_only():
    m = lm()
    for blk in m.blocks[1:]:
        blk.prefix.data[:] = 0.0
        blk.gate.data[:] = 0.0
    x = ids(0)
    text_only = m(x).data
    with_zero_visual = m(x, np.zeros((2, 3, 16))).data
    assert np.allclose(text_only, with_zero_visual, atol=1e-12)


def test_causality():
    m = lm()
    for blk in m.blocks[1:]:
        blk.gate.data[:] = 0.5
    vis = np.random.default_rng(1).normal(size=(2, 3, 16))
    x = ids(2)
    base = m(x, vis).data
    for t in range(1, x.shape[1]):
        y = x.copy()
        y[:, t] = (y[:, t] + 1) % 20
        out = m(y, vis).data
        assert np.array_equal(out[:, :t], base[:, :t])


def test_loss_gradient_wrt_visual_tokens():
    m = lm()
    for blk in m.blocks[1:]:
        blk.gate.data[:] = np.random.default_rng(3).uniform(0.2, 1.0, size=2)
    vis = Parameter(np.random.default_rng(4).normal(size=(2, 3, 16)))
    x = ids(5, n=8)
    mask = np.ones_like(x[:, 1:], dtype=bool)
    assert grad_check(lambda xs: m.loss(x[:, :-1], x[:, 1:], mask, xs[0]), [vis]) < 1e-4


def test_context_overflow_rejected():
    with pytest.raises(ValueError):
        lm()(ids(0, n=33))


def test_teacher_forcing_masks_prompt():
    inputs, targets, mask = teacher_forcing_batch([BOS, 5, 6], [[7, 8], [9]])
    assert inputs.tolist() == [[BOS, 5, 6, 7, 8], [BOS, 5, 6, 9, 0]]
    assert targets.tolist() == [[5, 6, 7, 8, EOS], [5, 6, 9, EOS, 0]]
    assert mask.tolist() == [[False, False, True, True, True], [False, False, True, True, False]]


def _greedy_uncached(m, prompt, vis, max_len):
    seq = [list(prompt) for _ in range(vis.shape[0])]
    out = [[] for _ in seq]
    done = [False] * len(seq)
    for _ in range(max_len):
        logits = m(np.array(seq), vis).data[:, -1]
        for i, k in enumerate(np.argmax(logits, axis=-1)):
            if not done[i]:
                if k == EOS:
                    done[i] = True
                else:
                    out[i].append(int(k))
            seq[i].append(EOS if done[i] else int(k))
        if all(done):
            break
    return out


def test_cached_decoding_matches_full_recompute():
    m = lm(blocks=3, vocab=12)
    for blk in m.blocks[1:]:
        blk.gate.data[:] = 0.7
    vis = np.random.default_rng(6).normal(size=(3, 3, 16))
    prompt = [BOS, 5, 6, 7]
    assert greedy_ids(m, prompt, vis, 12) == _greedy_uncached(m, prompt, vis, 12)


def test_greedy_is_deterministic_and_bounded():
    m = lm()
    vis = np.random.default_rng(7).normal(size=(2, 3, 16))
    a = greedy_ids(m, [BOS, 5], vis, 10)
    assert a == greedy_ids(m, [BOS, 5], vis, 10)
    assert all(len(x) <= 1 for x in greedy_ids(m, [BOS, 5], vis, 1))


@pytest.fixture(scope="module")
def overfit():
    """Toy caption model trained on one scene."""
    cfg = toy_config(0).replace(c=16, d_lm=32, epochs1=400, lr1=2e-3, halve_every=1000, batch1=1)
    recs = generate(0, 1)
    feats = tr.extract_features(recs, Backbones(0, cfg.lo_channels, cfg.hi_channels))
    s1 = tr.train_stage1(recs, [], cfg, feats, None, log=lambda m: None)
    return s1, recs, feats


def test_overfit_one_record_loss(overfit):
    s1, _, _ = overfit
    assert len(s1.history) <= 500
    assert s1.history[-1]["train_loss"] < 0.01


def test_overfit_one_record_decodes_caption(overfit):
    s1, recs, feats = overfit
    assert tr.decode_captions(s1, feats) == [recs[0].caption_text]


def test_edit_distance_hand_cases():
    assert tr.edit_distance("kitten", "sitting") == 3
    assert tr.edit_distance("", "abc") == 3
    assert tr.edit_distance([1, 2, 3], [1, 2, 3]) == 0


def test_caption_accuracy_definitions(overfit):
    s1, recs, _ = overfit
    ref = recs[0].caption_text
    acc = tr.caption_accuracy(s1, [ref], recs)
    assert acc == {"scenario_clause_accuracy": 100.0, "token_accuracy": 100.0,
                   "positional_token_accuracy": 100.0, "exact_caption_accuracy": 100.0}
    words = ref.split(" ")
    shifted = " ".join(words[:1] + ["ego"] + words[1:])  # one inserted word early on
    acc = tr.caption_accuracy(s1, [shifted], recs)
    n_ref = len(s1.caption_ids(ref))
    extra = len(s1.caption_ids(shifted)) - n_ref
    assert acc["token_accuracy"] == pytest.approx(100.0 * (1 - extra / n_ref))
    assert acc["positional_token_accuracy"] < acc["token_accuracy"]
    assert acc["scenario_clause_accuracy"] == 0.0 and acc["exact_caption_accuracy"] == 0.0
