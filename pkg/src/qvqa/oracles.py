"""Slow scalar reference implementations used to cross-check the fast paths.

Nothing here touches the tensor engine: plain python floats, ``math`` and
explicit loops, written straight from the loss and metric definitions.
"""
from __future__ import annotations

import itertools
import math


def _cos(a, b, eps=1e-8):
    na = math.sqrt(sum(x * x for x in a)) + eps
    nb = math.sqrt(sum(x * x for x in b)) + eps
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def sq_similarity(Q, t):
    return max(_cos(row, t) for row in Q)


def _log_softmax_at(values, i):
    mx = max(values)
    lse = mx + math.log(sum(math.exp(v - mx) for v in values))
    return values[i] - lse


def _infonce(sim, feats_a, feats_b, buf_a, buf_b, tau):
    """-1/(2B) sum_i [log p(b_i | a_i) + log p(a_i | b_i)] over batch+buffer candidates."""
    B = len(feats_a)
    cand_a = list(feats_a) + list(buf_a)
    cand_b = list(feats_b) + list(buf_b)
    total = 0.0
    for i in range(B):
        row = [sim(feats_a[i], b) / tau for b in cand_b]
        col = [sim(a, feats_b[i]) / tau for a in cand_a]
        total += _log_softmax_at(row, i) + _log_softmax_at(col, i)
    return -total / (2 * B)


def qcl_loss(Q, Tg, buf_Q=(), buf_T=(), tau=0.07):
    """Q: list of m-row token lists; Tg: list of text vectors."""
    return _infonce(sq_similarity, Q, Tg, buf_Q, buf_T, tau)


def cl_loss(V, Tg, buf_V=(), buf_T=(), tau=0.07):
    return _infonce(_cos, V, Tg, buf_V, buf_T, tau)


def lm_loss(logits, targets, mask):
    vals = [-_log_softmax_at(list(row), t) for row, t, keep in zip(logits, targets, mask) if keep]
    return sum(vals) / len(vals)


def ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def clipped_precision(candidate, reference, n):
    """(clipped matches, candidate n-gram count) by direct counting."""
    cand = ngrams(candidate, n)
    matches = 0
    for g in set(cand):
        matches += min(cand.count(g), ngrams(reference, n).count(g))
    return matches, len(cand)


def bleu(candidate, reference, max_n=4):
    if not candidate:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        num, den = clipped_precision(candidate, reference, n)
        if num == 0 or den == 0:
            return 0.0
        logs += math.log(num / den) / max_n
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(logs)


def lcs_exhaustive(a, b):
    """Longest common subsequence by enumerating every subsequence of the shorter input."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(any(x == y for y in it) for x in sub)

    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            if is_subseq([short[i] for i in idx], long_):
                return k
    return 0


def rouge_l(candidate, reference, beta=1.2, lcs=None):
    lcs_len = lcs_exhaustive(candidate, reference) if lcs is None else lcs
    if lcs_len == 0:
        return 0.0
    p = lcs_len / len(candidate)
    r = lcs_len / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def precision_recall(predicted, labels):
    tp = sum(1 for p, y in zip(predicted, labels) if p and y)
    fp = sum(1 for p, y in zip(predicted, labels) if p and not y)
    fn = sum(1 for p, y in zip(predicted, labels) if not p and y)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall

