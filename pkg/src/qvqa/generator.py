"""Decoder-only answer generator conditioned on quasi-textual prefix tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data.vocab import EOS, PAD
from .tensor.nn import Block, LayerNorm, Linear, Module, normal_param


@dataclass
class GeneratorConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    prefix_len: int = 16  # 2m: rows of Q_cat
    max_text_len: int = 80  # question + answer tokens
    max_gen_len: int = 48


class ContextOverflow(ValueError):
    pass


def prefix_causal_mask(prefix_len, text_len):
    """Prefix rows see only the prefix; text rows see the prefix plus earlier text."""
    n = prefix_len + text_len
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, :prefix_len] = True
    allowed[:prefix_len, prefix_len:] = False
    allowed[prefix_len:, prefix_len:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    return allowed


class Generator(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.tok = normal_param(rng, (cfg.vocab_size, d))
        self.text_pos = normal_param(rng, (cfg.max_text_len, d))
        self.prefix_pos = normal_param(rng, (cfg.prefix_len, d))
        self.blocks = [Block(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab_size, rng)

    def forward(self, Q_cat, ids):
        """Q_cat (N, 2m, d), right-padded text ids (N, S) -> logits (N, S, vocab)."""
        Q_cat = T.as_tensor(Q_cat)
        n, s = ids.shape
        if Q_cat.shape != (n, self.cfg.prefix_len, self.cfg.d_model):
            raise T.ShapeError(
                f"generator prefix: expected ({n}, {self.cfg.prefix_len}, {self.cfg.d_model}), got {Q_cat.shape}"
            )
        if s > self.cfg.max_text_len:
            raise ContextOverflow(
                f"text length {s} exceeds the context window of {self.cfg.max_text_len} "
                f"(prefix {self.cfg.prefix_len} + text {s})"
            )
        prefix = Q_cat + T.expand(self.prefix_pos, n)
        text = T.embedding(self.tok, ids) + T.expand(self.text_pos[:s], n)
        h = T.concat([prefix, text], axis=1)
        allowed = prefix_causal_mask(self.cfg.prefix_len, s)
        for block in self.blocks:
            h = block(h, allowed=allowed)
        h = self.ln_f(h[:, self.cfg.prefix_len:])
        return self.head(h)

    def score_batch(self, Q_cat, questions, answers):
        """Teacher-forced scoring of answers given questions.

        Returns (logits (N*S, vocab), targets (N*S,), mask (N*S,)) where the
        mask selects exactly the answer positions.
        """
        seqs, targets, masks = [], [], []
        for p, y in zip(questions, answers):
            if len(p) == 0 or len(y) == 0:
                raise ValueError("questions and answers must be non-empty")
            text = list(p) + list(y[:-1])
            if len(text) > self.cfg.max_text_len:
                raise ContextOverflow(
                    f"question {len(p)} + answer {len(y)} tokens exceed the context window "
                    f"of {self.cfg.max_text_len} text positions (prefix {self.cfg.prefix_len})"
                )
            tgt = [PAD] * (len(p) - 1) + list(y)
            seqs.append(text)
            targets.append(tgt)
            masks.append([False] * (len(p) - 1) + [True] * len(y))
        width = max(len(s) for s in seqs)
        n = len(seqs)
        ids = np.full((n, width), PAD, dtype=np.int64)
        tgt = np.full((n, width), PAD, dtype=np.int64)
        mask = np.zeros((n, width), dtype=bool)
        for i in range(n):
            k = len(seqs[i])
            ids[i, :k] = seqs[i]
            tgt[i, :k] = targets[i]
            mask[i, :k] = masks[i]
        logits = self.forward(Q_cat, ids)
        return T.reshape(logits, (n * width, self.cfg.vocab_size)), tgt.reshape(-1), mask.reshape(-1)

    def condition_and_score(self, Q_cat, question, answer):
        """Single sample: next-token logits (L_ans, vocab) at the answer positions."""
        Q_cat = T.as_tensor(Q_cat)
        logits, _, mask = self.score_batch(T.reshape(Q_cat, (1,) + Q_cat.shape), [question], [answer])
        return logits[np.flatnonzero(mask)]

    def generate(self, Q_cat, questions, max_len=None):
        """Greedy decoding until [EOS] or ``max_len`` tokens; returns token lists without [EOS]."""
        max_len = self.cfg.max_gen_len if max_len is None else max_len
        Q_cat = T.as_tensor(Q_cat)
        single = Q_cat.ndim == 2
        if single:
            Q_cat = T.reshape(Q_cat, (1,) + Q_cat.shape)
            questions = [questions]
        n = Q_cat.shape[0]
        outs = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        with T.no_grad():
            for _ in range(max_len):
                seqs = [list(questions[i]) + outs[i] for i in range(n)]
                width = max(len(s) for s in seqs)
                if width > self.cfg.max_text_len:
                    break
                ids = np.full((n, width), PAD, dtype=np.int64)
                for i, s in enumerate(seqs):
                    ids[i, : len(s)] = s
                logits = self.forward(Q_cat, ids).data
                for i in range(n):
                    if done[i]:
                        continue
                    nxt = int(np.argmax(logits[i, len(seqs[i]) - 1]))
                    if nxt == EOS:
                        done[i] = True
                    else:
                        outs[i].append(nxt)
                if done.all():
                    break
        return outs[0] if single else outs
