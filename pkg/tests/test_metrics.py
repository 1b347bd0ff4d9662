import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvqa import oracles
from qvqa.data import corpus_vocab, make_samples
from qvqa.metrics import (
    bleu,
    corpus_bleu,
    evaluate,
    lcs_length,
    nodule_pr,
    retrieval_accuracy,
    rouge_l,
)
from qvqa.model import QVQAModel
from qvqa.trainer import encode_sample

from .conftest import tiny_model_config

words = st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=12)
NODULE = "a hypoechoic nodule of [size] units is seen in the upper-inner region."
CLEAR = "no obvious nodule is seen."


# BLEU ---------------------------------------------------------------------------


def test_bleu_identity_is_one():
    s = "the isthmus is normal and no obvious nodule is seen".split()
    for n in range(1, 5):
        assert bleu(s, s, n) == pytest.approx(1.0)


def test_bleu_zero_without_four_gram_overlap():
    assert bleu("a b c d e".split(), "a b c x d e".split(), 4) == 0.0
    assert bleu("a b c d e".split(), "a b c x d e".split(), 3) > 0.0


def test_bleu_clipped_unigram_precision():
    cand, ref = "a b b c".split(), "a b c d".split()
    assert bleu(cand, ref, 1) == pytest.approx(0.75)
    assert oracles.bleu(cand, ref, 1) == pytest.approx(0.75)


def test_bleu_brevity_penalty():
    assert bleu(["a", "b"], "a b c d".split(), 1) == pytest.approx(math.exp(1 - 4 / 2))


def test_bleu_empty_candidate_scores_zero_and_bad_inputs_raise():
    assert bleu([], ["a"]) == 0.0
    with pytest.raises(ValueError):
        bleu(["a"], [])
    with pytest.raises(ValueError):
        bleu(["a"], ["a"], max_n=5)
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])


@given(words, words, st.integers(1, 4))
def test_bleu_matches_counting_oracle(cand, ref, n):
    assert bleu(cand, ref, n) == pytest.approx(oracles.bleu(cand, ref, n), abs=1e-12)


@given(words, words, st.permutations(list("abcdef")))
def test_bleu_invariant_to_renaming_tokens(cand, ref, perm):
    table = dict(zip("abcdef", (p * 2 for p in perm)))
    rename = lambda seq: [table[x] for x in seq]  # noqa: E731
    assert bleu(rename(cand), rename(ref)) == pytest.approx(bleu(cand, ref))
    assert rouge_l(rename(cand), rename(ref)) == pytest.approx(rouge_l(cand, ref))


def test_smoothed_bleu_is_positive():
    assert bleu("a b".split(), "a b c d".split(), 4, smooth=True) > 0.0


# ROUGE-L --------------------------------------------------------------------------


def test_rouge_identity_and_disjoint():
    s = "a b c".split()
    assert rouge_l(s, s) == pytest.approx(1.0)
    assert rouge_l(s, "x y".split()) == 0.0
    with pytest.raises(ValueError):
        rouge_l([], s)


@given(st.lists(st.sampled_from("abc"), max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
def test_lcs_matches_exhaustive_enumeration(a, b):
    assert lcs_length(a, b) == oracles.lcs_exhaustive(a, b)


@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
       st.lists(st.sampled_from("abcd"), min_size=1, max_size=8))
def test_rouge_matches_oracle_and_is_symmetric_at_beta_one(a, b):
    assert rouge_l(a, b) == pytest.approx(oracles.rouge_l(a, b), abs=1e-12)
    assert rouge_l(a, b, beta=1.0) == pytest.approx(rouge_l(b, a, beta=1.0), abs=1e-12)


# retrieval --------------------------------------------------------------------------


def test_retrieval_perfect_on_orthonormal_pairs():
    eye = np.eye(6)
    assert retrieval_accuracy(eye, eye, 1, "cos") == 1.0
    assert retrieval_accuracy(np.repeat(eye[:, None, :], 3, axis=1), eye, 1, "sq") == 1.0


def test_retrieval_at_chance_for_random_features():
    rng = np.random.default_rng(0)
    n = 400
    acc = retrieval_accuracy(rng.standard_normal((n, 32)), rng.standard_normal((n, 32)), 1)
    p = 1 / n
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1e-12


def test_retrieval_k_equal_n_always_hits(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((7, 5))
    assert retrieval_accuracy(a, b, k=7) == 1.0


def test_retrieval_ties_are_misses():
    same = np.ones((4, 3))
    assert retrieval_accuracy(same, same) == 0.0
    with pytest.raises(ValueError):
        retrieval_accuracy(np.ones((1, 3)), np.ones((1, 3)))


# nodule detection ---------------------------------------------------------------------


def test_nodule_pr_on_copied_references():
    labels = [True, False, True, False]
    reports = [NODULE if y else CLEAR for y in labels]
    pr = nodule_pr(reports, labels)
    assert pr["precision"] == 1.0 and pr["recall"] == 1.0


def test_nodule_pr_all_negative_predictions():
    pr = nodule_pr([CLEAR] * 3, [True, False, True])
    assert pr["recall"] == 0.0 and pr["precision"] is None and pr["predicted_positive"] == 0


def test_nodule_pr_hand_set():
    pred = [1, 1, 0, 0, 1, 0, 1, 0, 0, 1]
    labels = [1, 0, 1, 0, 1, 0, 1, 1, 0, 0]
    pr = nodule_pr([NODULE if p else CLEAR for p in pred], labels)
    # tp=3 (0,4,6) fp=2 (1,9) fn=2 (2,7)
    assert (pr["tp"], pr["fp"], pr["fn"]) == (3, 2, 2)
    assert pr["precision"] == pytest.approx(0.6) and pr["recall"] == pytest.approx(0.6)
    assert (pr["precision"], pr["recall"]) == oracles.precision_recall(pred, labels)


def test_nodule_pr_rejects_bad_inputs():
    with pytest.raises(ValueError):
        nodule_pr([CLEAR], [False])
    with pytest.raises(ValueError):
        nodule_pr([CLEAR, CLEAR], [True])


# evaluate ---------------------------------------------------------------------------------


def test_evaluate_payload_shape():
    samples = make_samples(6, 4)
    vocab = corpus_vocab(samples)
    enc = [encode_sample(s, vocab) for s in samples]
    out = evaluate(QVQAModel(tiny_model_config(len(vocab), max_gen_len=12)), enc, vocab)
    agg = out["aggregates"]
    assert {"BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L", "nodule_precision", "nodule_recall",
            "retrieval_top1", "retrieval_top1_q", "n"} <= set(agg)
    assert agg["n"] == len(out["records"]) == 4
    for rec in out["records"]:
        assert {"id", "reference", "generated", "scores", "nodule_present"} <= set(rec)
        assert all(0.0 <= v <= 1.0 for v in rec["scores"].values())
    with pytest.raises(ValueError):
        evaluate(None, [], vocab)
