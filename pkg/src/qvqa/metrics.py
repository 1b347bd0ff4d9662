"""Report-quality, retrieval and nodule-detection metrics."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

from . import tensor as T
from .data.reports import NODULE_PHRASE
from .data.vocab import split_words
from .losses import cos_matrix, sq_matrix
from .tensor import kernels

ROUGE_BETA = 1.2
SMOOTH_EPS = 0.1


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate, reference, n):
    """(clipped n-gram matches, candidate n-gram total)."""
    cand = _ngram_counts(candidate, n)
    ref = _ngram_counts(reference, n)
    return sum(min(c, ref[g]) for g, c in cand.items()), sum(cand.values())


def brevity_penalty(c, r):
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu(candidate, reference, max_n=4, smooth=False):
    """Sentence BLEU with uniform weights.

    Without smoothing any zero n-gram precision gives 0. An empty candidate
    scores 0 by convention.
    """
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        num, den = modified_precision(candidate, reference, n)
        if num == 0 or den == 0:
            if not smooth:
                return 0.0
            num, den = SMOOTH_EPS, max(den, 1)
        log_p += math.log(num / den) / max_n
    return brevity_penalty(len(candidate), len(reference)) * math.exp(log_p)


def corpus_bleu(candidates, references, max_n=4, smooth=False):
    """Mean sentence BLEU over paired lists."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need equally many candidates and references (at least one)")
    return sum(bleu(c, r, max_n, smooth) for c, r in zip(candidates, references)) / len(candidates)


def _as_ids(a, b):
    table = {}
    return ([table.setdefault(x, len(table)) for x in a], [table.setdefault(x, len(table)) for x in b])


def lcs_length(a, b):
    ia, ib = _as_ids(list(a), list(b))
    return kernels.lcs_length(ia, ib)


def rouge_l(candidate, reference, beta=ROUGE_BETA):
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        raise ValueError("rouge_l needs non-empty candidate and reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def similarity_matrix(features, text, sim="cos"):
    """(n, n) scores between image-side features and text features; ``sim`` is 'cos' or 'sq'."""
    with T.no_grad():
        if sim == "cos":
            return cos_matrix(T.as_tensor(features), T.as_tensor(text)).data
        if sim == "sq":
            return sq_matrix(T.as_tensor(features), T.as_tensor(text)).data
    raise ValueError(f"sim must be 'cos' or 'sq', got {sim!r}")


def retrieval_accuracy(features, text, k=1, sim="cos"):
    """Image-to-text top-k accuracy for index-paired features.

    A distractor scoring equal to the true pair counts as ranked above it, so
    ties never produce hits.
    """
    n = np.shape(text)[0]
    if n < 2 or np.shape(features)[0] != n:
        raise ValueError("retrieval needs n >= 2 index-paired features")
    s = similarity_matrix(features, text, sim)
    diag = np.diag(s)
    above = (s >= diag[:, None]).sum(axis=1) - 1
    return float((above < k).mean())


def nodule_pr(generated_reports, labels):
    """Precision/recall of nodule mention versus the nodule_present labels.

    Precision is ``None`` when nothing was predicted positive.
    """
    labels = [bool(x) for x in labels]
    if not labels or len(generated_reports) != len(labels):
        raise ValueError("need one generated report per label")
    if not any(labels):
        raise ValueError("nodule_pr needs at least one positive label")
    pred = [NODULE_PHRASE in r for r in generated_reports]
    tp = sum(p and y for p, y in zip(pred, labels))
    fp = sum(p and not y for p, y in zip(pred, labels))
    fn = sum(y and not p for p, y in zip(pred, labels))
    precision = tp / (tp + fp) if tp + fp else None
    return {"precision": precision, "recall": tp / (tp + fn), "tp": tp, "fp": fp, "fn": fn,
            "predicted_positive": tp + fp}


def evaluate(model, samples, vocab, batch_size=32, max_len=None):
    """Generate reports for encoded samples and score them; returns the eval.json payload."""
    if not samples:
        raise ValueError("nothing to evaluate")
    records, feats_V, feats_Q, feats_T, texts = [], [], [], [], []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            enc = model.encode_images(np.stack([s.images for s in chunk]))
            Tg = model.encode_reports([s.report_ids for s in chunk])
            feats_V.append(enc["V_avg"].data)
            feats_Q.append(enc["Q_avg"].data)
            feats_T.append(Tg.data)
            outs = model.generator.generate(enc["Q_cat"], [s.coarse_question for s in chunk], max_len)
            for s, ids in zip(chunk, outs):
                gen_text = vocab.detokenize(ids)
                cand = split_words(gen_text)
                ref = split_words(s.reference)
                records.append({
                    "id": s.id,
                    "reference": ref,
                    "generated": cand,
                    "scores": {f"BLEU{n}": bleu(cand, ref, n) for n in range(1, 5)}
                    | {"ROUGE_L": rouge_l(cand, ref) if cand else 0.0},
                    "nodule_present": bool(s.nodule_present),
                })
                texts.append(gen_text)
    agg = {f"BLEU{n}": float(np.mean([r["scores"][f"BLEU{n}"] for r in records])) for n in range(1, 5)}
    agg["ROUGE_L"] = float(np.mean([r["scores"]["ROUGE_L"] for r in records]))
    labels = [r["nodule_present"] for r in records]
    if any(labels):
        pr = nodule_pr(texts, labels)
        agg["nodule_precision"], agg["nodule_recall"] = pr["precision"], pr["recall"]
        agg["nodule_predicted_positive"] = pr["predicted_positive"]
    else:
        agg["nodule_precision"] = agg["nodule_recall"] = None
        agg["nodule_predicted_positive"] = sum(NODULE_PHRASE in t for t in texts)
    V, Q, Tt = (np.concatenate(x) for x in (feats_V, feats_Q, feats_T))
    if len(records) >= 2:
        agg["retrieval_top1"] = retrieval_accuracy(V, Tt, 1, "cos")
        agg["retrieval_top1_q"] = retrieval_accuracy(Q, Tt, 1, "sq")
    else:
        agg["retrieval_top1"] = agg["retrieval_top1_q"] = None
    agg["n"] = len(records)
    return {"aggregates": agg, "records": records}
