"""In-memory samples and the on-disk dataset layout.

A dataset directory holds ``dataset.jsonl`` (one scene per line),
``vocab.json`` and two QVT1 image files per scene named ``<id>_a.qvt`` and
``<id>_b.qvt``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor.io import load_tensor, save_tensor
from .reports import QAPair, derive_qa, render_report, template_corpus
from .vocab import Vocabulary, build_vocab
from .world import Scene, generate_world, render_images


@dataclass
class Sample:
    scene: Scene
    images: np.ndarray  # (2, H, W) float32
    report: str
    qa: list

    @property
    def id(self):
        return self.scene.id

    def pairs(self, granularity):
        return [p for p in self.qa if p.granularity == granularity]

    def to_record(self):
        return {
            "id": self.scene.id,
            "organ": self.scene.organ,
            "report": self.report,
            "labels": self.scene.labels(),
            "qa": [p.to_json() for p in self.qa],
            "images": [f"{self.scene.id}_a.qvt", f"{self.scene.id}_b.qvt"],
        }


def make_sample(scene, seed):
    report = render_report(scene)
    return Sample(scene, render_images(scene, seed), report, derive_qa(scene, report))


def make_samples(seed, count):
    return [make_sample(s, seed) for s in generate_world(seed, count)]


def corpus_vocab(samples):
    texts = list(template_corpus())
    for s in samples:
        texts.append(s.report)
        for p in s.qa:
            texts.extend((p.question, p.answer))
    return build_vocab(texts)


def write_dataset(out_dir, samples, vocab=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocab or corpus_vocab(samples)
    lines = []
    for s in samples:
        rec = s.to_record()
        save_tensor(out / rec["images"][0], s.images[0])
        save_tensor(out / rec["images"][1], s.images[1])
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "dataset.jsonl").write_text("\n".join(lines) + "\n")
    vocab.save(out / "vocab.json")
    return vocab


def read_dataset(data_dir):
    """Returns (samples, vocab)."""
    root = Path(data_dir)
    path = root / "dataset.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no dataset.jsonl in {root}")
    samples = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        scene = Scene.from_record(rec)
        images = np.stack([load_tensor(root / name) for name in rec["images"]])
        qa = [QAPair(q["granularity"], q["question"], q["answer"]) for q in rec["qa"]]
        samples.append(Sample(scene, images, rec["report"], qa))
    return samples, Vocabulary.load(root / "vocab.json")


def split_samples(samples, seed, ratios=(7, 1, 2)):
    """Deterministic train/val/test split in the given ratio."""
    if not samples:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(samples))
    n = len(samples)
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test
