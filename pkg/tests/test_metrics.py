import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from riskcap import metrics as M

VOCAB = ["the", "car", "cars", "stop", "stops", "stopping", "red", "truck", "left", "on", "a", "road", "turn",
         "turning", "slow", "down"]


def corpus(seed, n=50, multi_ref=False):
    """Reference/candidate pairs where candidates are edited references."""
    rng = np.random.default_rng(seed)
    cands, refs = [], []
    for _ in range(n):
        ref = list(rng.choice(VOCAB, size=rng.integers(3, 8)))
        cand = list(ref)
        for _ in range(rng.integers(0, 3)):
            op = rng.integers(3)
            i = rng.integers(len(cand))
            if op == 0 and len(cand) > 1:
                del cand[i]
            elif op == 1:
                cand[i] = rng.choice(VOCAB)
            else:
                j = rng.integers(len(cand))
                cand[i], cand[j] = cand[j], cand[i]
        cands.append(" ".join(cand))
        if multi_ref:
            alt = list(rng.choice(VOCAB, size=rng.integers(3, 7)))
            refs.append([" ".join(ref), " ".join(alt)])
        else:
            refs.append(" ".join(ref))
    return cands, refs


def boxes(seed, n):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        area = 10 ** rng.uniform(-2.7, -0.5)
        r = rng.uniform(0.5, 2)
        w, h = min(math.sqrt(area * r), 0.9), min(math.sqrt(area / r), 0.9)
        out.append([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])
    return np.array(out)


# -- hand examples ----------------------------------------------------------


def test_bleu_identical_is_100():
    assert M.bleu(["the car stops now"], ["the car stops now"], 4) == pytest.approx(100.0)


def test_bleu1_brevity_penalty_example():
    assert M.bleu(["the car stops"], ["the car stops now"], 1) == pytest.approx(100 * math.exp(1 - 4 / 3), abs=1e-12)
    assert round(M.bleu(["the car stops"], ["the car stops now"], 1), 2) == 71.65


def test_bleu_disjoint_is_zero():
    assert M.bleu(["red truck"], ["green car"], 1) == 0.0


def test_bleu_rejects_empty_corpus():
    with pytest.raises(ValueError):
        M.bleu([], [], 4)


def test_meteor_single_word_identical_is_50():
    assert M.meteor(["car"], ["car"]) == pytest.approx(50.0, abs=1e-12)


def test_meteor_identical_sentence_formula():
    s = "the risk object is a red car"
    m = 7
    assert M.meteor([s], [s]) == pytest.approx(100 * (1 - 0.5 * (1 / m) ** 3), abs=1e-12)


def test_meteor_no_match_is_zero():
    assert M.meteor(["red truck"], ["green car"]) == 0.0


def test_meteor_stem_stage_matches_inflections():
    assert M.align(["cars", "stopping"], ["car", "stops"]) == (2, 1)


def test_meteor_chunk_minimisation_prefers_contiguous_alignment():
    # "the" can align to either occurrence; the contiguous choice gives one chunk
    assert M.align(["the", "car"], ["the", "red", "the", "car"]) == (2, 1)


def test_cider_perfect_unique_corpus_is_1000():
    cands = ["a red car stops", "the blue truck turns left"]
    assert M.cider(cands, cands) == pytest.approx(1000.0, abs=1e-9)


def test_cider_disjoint_is_zero():
    assert M.cider(["x y z", "u v w"], ["a b c", "d e f"]) == 0.0


def test_cider_rejects_single_document():
    with pytest.raises(ValueError):
        M.cider(["a b"], ["a b"])


def test_iou_examples():
    assert M.iou([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]) == pytest.approx(1.0)
    assert M.iou([0.5, 0.5, 0.4, 0.4], [0.5, 0.5, 0.2, 0.2]) == pytest.approx(0.25, abs=1e-12)
    assert M.iou([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]) == 0.0


def test_acc_is_strict():
    gt = np.array([[0.5, 0.5, 0.4, 0.4]])
    # nested box with exactly half the area: IoU == 0.5 is not counted
    pred = np.array([[0.5, 0.5, 0.4, 0.2]])
    assert M.iou(gt, pred) == pytest.approx(0.5)
    assert M.acc_at(gt, pred, 0.5) == 0.0
    assert M.acc_at(gt, gt, 0.5) == 100.0


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        M.iou([0.5, 0.5, 0.0, 0.1], [0.5, 0.5, 0.1, 0.1])


def test_buckets_only_large_when_all_large():
    gt = np.tile([0.5, 0.5, 0.5, 0.5], (4, 1))
    means, counts = M.size_bucketed_iou(gt, gt)
    assert means == {"small": None, "medium": None, "large": pytest.approx(100.0)}
    assert counts == {"small": 0, "medium": 0, "large": 4}


def test_buckets_one_each_identical():
    gt = np.array([[0.5, 0.5, 0.05, 0.05], [0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.5, 0.5]])
    means, _ = M.size_bucketed_iou(gt, gt)
    assert all(v == pytest.approx(100.0) for v in means.values())


# -- oracle equivalence -----------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
@pytest.mark.parametrize("multi", [False, True])
def test_caption_metrics_match_oracles(seed, multi):
    cands, refs = corpus(seed, 50, multi)
    assert M.bleu(cands, refs, 1) == pytest.approx(oracles.bleu(cands, refs, 1), abs=1e-9)
    assert M.bleu(cands, refs, 4) == pytest.approx(oracles.bleu(cands, refs, 4), abs=1e-9)
    assert M.meteor(cands, refs) == pytest.approx(oracles.meteor(cands, refs), abs=1e-9)
    assert M.cider(cands, refs) == pytest.approx(oracles.cider(cands, refs), abs=1e-9)


def test_cider_three_pair_toy_corpus():
    cands = ["the car stops", "a red truck turns", "the truck stops"]
    refs = ["the car stops now", "a red truck turns left", "a truck stops"]
    assert M.cider(cands, refs) == pytest.approx(oracles.cider(cands, refs), abs=1e-9)


def test_box_metrics_match_oracles():
    gt, pred = boxes(0, 300), boxes(1, 300)
    # make about half of the predictions overlap their targets
    pred[::2] = gt[::2] + np.random.default_rng(2).normal(scale=0.01, size=(150, 4)) * [1, 1, 0, 0]
    ious = [oracles.iou(g, p) for g, p in zip(gt, pred)]
    assert M.miou(gt, pred) == pytest.approx(100 * np.mean(ious), abs=1e-9)
    assert M.acc_at(gt, pred) == pytest.approx(100 * np.mean([v > 0.5 for v in ious]), abs=1e-9)
    means, counts = M.size_bucketed_iou(gt, pred)
    ref = oracles.bucket_means(gt, pred)
    for k in means:
        assert means[k] == pytest.approx(ref[k], abs=1e-9)
    assert sum(counts.values()) == 300


# -- properties -------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_caption_metrics_permutation_invariant(seed):
    cands, refs = corpus(seed, 8)
    perm = np.random.default_rng(seed).permutation(8)
    pc, pr = [cands[i] for i in perm], [refs[i] for i in perm]
    assert M.bleu(cands, refs, 4) == pytest.approx(M.bleu(pc, pr, 4), abs=1e-9)
    assert M.meteor(cands, refs) == pytest.approx(M.meteor(pc, pr), abs=1e-9)
    assert M.cider(cands, refs) == pytest.approx(M.cider(pc, pr), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric(seed):
    a, b = boxes(seed, 1)[0], boxes(seed + 1, 1)[0]
    assert M.iou(a, b) == pytest.approx(M.iou(b, a), abs=1e-15)


def test_metrics_repeatable_bitwise():
    cands, refs = corpus(3, 20)
    assert M.cider(cands, refs) == M.cider(cands, refs)
    assert M.meteor(cands, refs) == M.meteor(cands, refs)


# -- report -----------------------------------------------------------------


def test_report_layout_and_metadata():
    cands, refs = corpus(4, 10)
    gt = boxes(5, 10)
    rep = M.evaluate(cands, refs, gt, gt, metadata={"seed": 3})
    assert rep.avg == pytest.approx((rep.b4 + rep.miou) / 2)
    d = json.loads(rep.to_json())
    assert d["metadata"]["seed"] == 3
    assert "not reproducible" in d["metadata"]["reference_results_not_reproducible"]
    assert d["metadata"]["size_buckets"] == {"small_below": 0.01, "large_from": 0.1}
    assert sum(v for k, v in d["counts"].items() if k != "total") == d["counts"]["total"]
    table = M.format_table([("full", rep, None), ("broken", None, "boom")])
    header = table.splitlines()[0]
    for col in ("B1", "B4", "M", "C", "mIoU", "Acc(IoU>0.5)", "AVG"):
        assert col in header
    assert "failed: boom" in table
