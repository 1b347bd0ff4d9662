"""Closed word-level vocabulary."""
from __future__ import annotations

import json
import re
from pathlib import Path

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[EOS]", "[size]")
PAD, CLS, SEP, EOS, SIZE = range(len(SPECIALS))

_TOKEN = re.compile(r"\[[A-Za-z]+\]|[A-Za-z0-9]+(?:-[A-Za-z0-9]+)*|[.,?]")
_PUNCT = {".", ",", "?"}


class UnknownTokenError(KeyError):
    pass


def split_words(text):
    tokens = _TOKEN.findall(text)
    leftover = _TOKEN.sub("", text).strip()
    if leftover:
        raise ValueError(f"untokenizable characters {leftover!r} in {text!r}")
    return tokens


def join_words(tokens):
    out = []
    for tok in tokens:
        if tok in _PUNCT and out:
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def tokenize(self, text):
        ids = []
        for w in split_words(text):
            if w not in self.stoi:
                raise UnknownTokenError(f"word {w!r} is not in the vocabulary")
            ids.append(self.stoi[w])
        return ids

    def detokenize(self, ids, strip_specials=True):
        words = []
        for i in ids:
            i = int(i)
            if strip_specials and i in (PAD, CLS, SEP, EOS):
                if i == EOS:
                    break
                continue
            words.append(self.itos[i])
        return join_words(words)

    def to_json(self):
        return {t: i for i, t in enumerate(self.itos)}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def from_json(cls, mapping):
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids must be contiguous from 0")
        return cls([t for t, _ in ordered])

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocab(corpus):
    """Specials first (fixed ids 0-4), then every corpus word in sorted order."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = set()
    for text in corpus:
        words.update(split_words(text))
    words -= set(SPECIALS)
    return Vocabulary(list(SPECIALS) + sorted(words))
