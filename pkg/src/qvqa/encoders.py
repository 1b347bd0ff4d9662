"""Toy ViT-style visual encoder and bidirectional text encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data.vocab import CLS, PAD, SEP, SPECIALS
from .tensor.nn import Block, LayerNorm, Linear, Module, normal_param


@dataclass
class VisualEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    pool: str = "mean"  # "mean" over patch outputs, or "cls" for a learned summary token

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_patches < 4:
            raise ValueError(f"need at least 4 patches, got {self.n_patches}")
        if self.pool not in ("mean", "cls"):
            raise ValueError(f"pool must be 'mean' or 'cls', got {self.pool!r}")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TextEncoderConfig:
    vocab_size: int
    max_len: int = 96
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if self.vocab_size < len(SPECIALS):
            raise ValueError(f"vocab_size must cover the {len(SPECIALS)} reserved specials")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


def patchify(images, patch_size):
    """(N, H, W) or (H, W) images -> (N, P, patch_size**2) in raster order.

    Accepts numpy arrays or Tensors; Tensors stay differentiable.
    """
    single = np.ndim(images.data if isinstance(images, T.Tensor) else images) == 2
    x = T.as_tensor(images)
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise T.ShapeError(f"patchify: expected square (N, H, W) images, got {x.shape}")
    n, h, w = x.shape
    if h % patch_size:
        raise T.ShapeError(f"patchify: image side {h} not divisible by patch {patch_size}")
    g = h // patch_size
    x = T.reshape(x, (n, g, patch_size, g, patch_size))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    x = T.reshape(x, (n, g * g, patch_size * patch_size))
    return T.reshape(x, x.shape[1:]) if single else x


class VisualEncoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = Linear(cfg.patch_size ** 2, d, rng)
        self.pos = normal_param(rng, (cfg.n_patches, d))
        self.cls = normal_param(rng, (1, d)) if cfg.pool == "cls" else None
        self.blocks = [Block(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.use_positions = True

    def __call__(self, images):
        """images (N, H, W) -> (V (N, d), v (N, P, d))."""
        x = T.as_tensor(images)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (self.cfg.image_size, self.cfg.image_size):
            raise T.ShapeError(
                f"visual encoder expects {self.cfg.image_size}x{self.cfg.image_size} images, got {x.shape[1:]}"
            )
        n = x.shape[0]
        h = self.patch_embed(patchify(x, self.cfg.patch_size))
        if self.use_positions:
            h = h + T.expand(self.pos, n)
        if self.cls is not None:
            h = T.concat([T.expand(self.cls, n), h], axis=1)
        for block in self.blocks:
            h = block(h)
        h = self.ln_f(h)
        if self.cls is not None:
            V = h[:, 0]
            v = h[:, 1:]
        else:
            v = h
            V = T.mean(h, axis=1)
        return V, v


def pad_batch(sequences, pad=PAD):
    """Right-pad integer sequences; returns (ids (N, L), key mask (N, L))."""
    n = len(sequences)
    L = max(len(s) for s in sequences)
    ids = np.full((n, L), pad, dtype=np.int64)
    mask = np.zeros((n, L), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def wrap_report(ids):
    """[CLS] report [SEP] as fed to the text encoder."""
    return [CLS] + list(ids) + [SEP]


class TextEncoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.tok = normal_param(rng, (cfg.vocab_size, d))
        self.pos = normal_param(rng, (cfg.max_len, d))
        self.blocks = [Block(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)

    def __call__(self, tokens, mask=None):
        """tokens: list of id sequences or an (N, L) array (+ key mask).

        Returns (T (N, d) taken at the [CLS] position, t (N, L, d)).
        """
        if mask is None:
            if isinstance(tokens, np.ndarray) and tokens.ndim == 2:
                ids = tokens.astype(np.int64)
                mask = np.ones(ids.shape, dtype=bool)
            else:
                ids, mask = pad_batch(tokens)
        else:
            ids, mask = np.asarray(tokens, dtype=np.int64), np.asarray(mask, dtype=bool)
        n, L = ids.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        h = T.embedding(self.tok, ids) + T.expand(self.pos[:L], n)
        allowed = np.broadcast_to(mask[:, None, :], (n, L, L))
        for block in self.blocks:
            h = block(h, allowed=allowed)
        t = self.ln_f(h)
        return t[:, 0], t
