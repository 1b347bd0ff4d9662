"""The full framework: encoders, QFT, generator and learnable temperatures."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoders import TextEncoder, TextEncoderConfig, VisualEncoder, VisualEncoderConfig
from .generator import Generator, GeneratorConfig
from .losses import TAU_INIT, TAU_MAX, TAU_MIN
from .qft import QFT, QFTConfig, fuse_pair
from .tensor.io import CheckpointError, load_checkpoint, save_checkpoint
from .tensor.nn import Module, Parameter


@dataclass
class ModelConfig:
    vocab_size: int
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    vis_layers: int = 2
    txt_layers: int = 2
    qft_layers: int = 3
    gen_layers: int = 2
    m: int = 8
    max_text_len: int = 96  # text-encoder window
    gen_text_len: int = 80  # generator window (question + answer)
    max_gen_len: int = 48
    pool: str = "mean"
    init_seed: int = 0

    def visual(self):
        return VisualEncoderConfig(self.image_size, self.patch_size, self.d_model, self.vis_layers, self.n_heads, self.pool)

    def text(self):
        return TextEncoderConfig(self.vocab_size, self.max_text_len, self.d_model, self.txt_layers, self.n_heads)

    def qft(self):
        return QFTConfig(self.m, self.d_model, self.qft_layers, self.n_heads)

    def generator(self):
        return GeneratorConfig(
            self.vocab_size, self.d_model, self.gen_layers, self.n_heads,
            prefix_len=2 * self.m, max_text_len=self.gen_text_len, max_gen_len=self.max_gen_len,
        )


class QVQAModel(Module):
    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        vcfg = cfg.visual()
        self.visual = VisualEncoder(vcfg, rng)
        self.text = TextEncoder(cfg.text(), rng)
        self.qft = QFT(cfg.qft(), vcfg.n_patches, rng)
        self.generator = Generator(cfg.generator(), rng)
        self.tau_q = Parameter(np.array(TAU_INIT))
        self.tau_c = Parameter(np.array(TAU_INIT))

    def clamp_temperatures(self):
        for p in (self.tau_q, self.tau_c):
            p.data = np.clip(p.data, TAU_MIN, TAU_MAX).astype(p.dtype)

    def encode_images(self, images):
        """images (B, 2, H, W) -> dict with V_avg, Q_avg, Q_cat and the per-view features."""
        images = np.asarray(images.data if isinstance(images, T.Tensor) else images)
        B = images.shape[0]
        if images.ndim != 4 or images.shape[1] != 2:
            raise T.ShapeError(f"expected image pairs (B, 2, H, W), got {images.shape}")
        H = images.shape[2]
        V, v = self.visual(T.Tensor(images.reshape(2 * B, H, images.shape[3]), dtype=T.get_default_dtype()))
        Q = self.qft(v)
        m, d = Q.shape[1], Q.shape[2]
        Q4 = T.reshape(Q, (B, 2, m, d))
        V3 = T.reshape(V, (B, 2, d))
        Q_avg, Q_cat, V_avg = fuse_pair(Q4[:, 0], Q4[:, 1], V3[:, 0], V3[:, 1])
        return {"V_avg": V_avg, "Q_avg": Q_avg, "Q_cat": Q_cat, "V": V, "v": v, "Q": Q}

    def encode_reports(self, report_ids):
        Tg, _ = self.text(report_ids)
        return Tg

    # persistence ------------------------------------------------------------
    def save(self, directory, extra=None):
        directory = Path(directory)
        save_checkpoint(directory, self.state_dict())
        meta = {"model": asdict(self.cfg)}
        if extra:
            meta.update(extra)
        (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text())
        model = cls(ModelConfig(**meta["model"]))
        state = load_checkpoint(directory)
        params = dict(model.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint {directory} lacks tensor(s): {', '.join(missing)}")
        unexpected = sorted(set(state) - set(params))
        if unexpected:
            raise CheckpointError(f"checkpoint {directory} has unknown tensor(s): {', '.join(unexpected)}")
        model.load_state_dict(state)
        return model
