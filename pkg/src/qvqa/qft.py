"""Quasi-textual feature transformer and the two-view fusion rules."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor.nn import Block, LayerNorm, Module, normal_param


@dataclass
class QFTConfig:
    m: int = 8
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4

    def check(self, n_patches):
        if self.m < 2:
            raise ValueError(f"need at least 2 queries, got m={self.m}")
        if self.m >= n_patches:
            raise ValueError(f"bottleneck violated: m={self.m} must be < number of patches {n_patches}")


class QFT(Module):
    """m learned queries; each layer: unmasked self-attention over the
    queries, cross-attention into the patch features, then the MLP."""

    def __init__(self, cfg, n_patches, rng):
        cfg.check(n_patches)
        self.cfg = cfg
        self.queries = normal_param(rng, (cfg.m, cfg.d_model))
        self.blocks = [Block(cfg.d_model, cfg.n_heads, rng, cross=True) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)

    def __call__(self, v):
        """v (N, P, d) patch features -> Q (N, m, d)."""
        v = T.as_tensor(v)
        if v.ndim == 2:
            return T.reshape(self(T.reshape(v, (1,) + v.shape)), (self.cfg.m, self.cfg.d_model))
        if v.ndim != 3 or v.shape[2] != self.cfg.d_model:
            raise T.ShapeError(f"QFT expects patch features (N, P, {self.cfg.d_model}), got {v.shape}")
        x = T.expand(self.queries, v.shape[0])
        for block in self.blocks:
            x = block(x, memory=v)
        return self.ln_f(x)


def fuse_pair(Q_a, Q_b, V_a, V_b):
    """Average Q and V of the two views; stack the Q rows (view a first) for generation."""
    Q_a, Q_b, V_a, V_b = (T.as_tensor(x) for x in (Q_a, Q_b, V_a, V_b))
    Q_avg = T.scale(Q_a + Q_b, 0.5)
    V_avg = T.scale(V_a + V_b, 0.5)
    Q_cat = T.concat([Q_a, Q_b], axis=-2)
    return Q_avg, Q_cat, V_avg
