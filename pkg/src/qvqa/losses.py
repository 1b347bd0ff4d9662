"""Training objectives: max-token similarity, buffered InfoNCE, LM losses.

Notation follows the model: ``Q`` quasi-textual tokens (B, m, d), ``V``
global visual (B, d), ``T`` global text (B, d).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TAU_MIN, TAU_MAX = 0.01, 1.0
TAU_INIT = 0.07

PRESETS = {
    "report_gen": (9.0, 1.0, 3.0),
    "visual": (1.0, 3.0, 9.0),
}


@dataclass
class LossWeights:
    lam: float = 1.0  # weight on the visual-text contrastive term
    lam_c: float = 9.0
    lam_m: float = 1.0
    lam_f: float = 3.0

    def __post_init__(self):
        for name in ("lam", "lam_c", "lam_m", "lam_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def preset(cls, name, lam=1.0):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        c, m, f = PRESETS[name]
        return cls(lam=lam, lam_c=c, lam_m=m, lam_f=f)


def clamp_tau(value):
    return float(np.clip(value, TAU_MIN, TAU_MAX))


class NegativeBuffers:
    """Three FIFO stores of detached features from the most recent batches."""

    def __init__(self, capacity, d_model, m):
        if capacity < 0:
            raise ValueError("buffer capacity must be >= 0")
        self.capacity = capacity
        self.T = np.zeros((0, d_model), dtype=np.float32)
        self.V = np.zeros((0, d_model), dtype=np.float32)
        self.Q = np.zeros((0, m, d_model), dtype=np.float32)

    def __len__(self):
        return self.T.shape[0]

    def _keep(self, old, new):
        arr = np.concatenate([old, new.astype(old.dtype)], axis=0)
        return arr[arr.shape[0] - min(arr.shape[0], self.capacity):].copy()

    def push(self, T_batch, V_batch, Q_batch):
        """Append a batch (oldest entries are evicted beyond capacity)."""
        t, v, q = (np.array(_data(x), copy=True) for x in (T_batch, V_batch, Q_batch))
        if not (t.shape[0] == v.shape[0] == q.shape[0]):
            raise T.ShapeError(f"buffer push: batch sizes differ {t.shape}, {v.shape}, {q.shape}")
        if self.T.dtype != t.dtype:
            self.T, self.V, self.Q = (a.astype(t.dtype) for a in (self.T, self.V, self.Q))
        self.T = self._keep(self.T, t)
        self.V = self._keep(self.V, v)
        self.Q = self._keep(self.Q, q)
        return self

    def clear(self):
        self.T, self.V, self.Q = self.T[:0], self.V[:0], self.Q[:0]


def buffer_push(buffers, T_batch, V_batch, Q_batch):
    return buffers.push(T_batch, V_batch, Q_batch)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _with_negatives(batch, stored):
    if stored is None or stored.shape[0] == 0:
        return batch
    return T.concat([batch, Tensor(stored.astype(batch.dtype))], axis=0)


def sq_matrix(Q, Tg):
    """Pairwise s_q: out[j, k] = max_l cos(Q[j, l], Tg[k]); Q (J, m, d), Tg (K, d)."""
    J, m, d = Q.shape
    if Tg.ndim != 2 or Tg.shape[1] != d:
        raise T.ShapeError(f"s_q: tokens {Q.shape} vs text features {Tg.shape}")
    qn = T.reshape(T.l2_normalize(Q), (J * m, d))
    tn = T.transpose(T.l2_normalize(Tg))
    sims = T.reshape(T.matmul(qn, tn), (J, m, Tg.shape[0]))
    return T.amax(sims, axis=1)


def cos_matrix(A, B):
    """Pairwise cosine similarity, out[j, k] = cos(A[j], B[k])."""
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise T.ShapeError(f"cosine matrix: {A.shape} vs {B.shape}")
    return T.matmul(T.l2_normalize(A), T.transpose(T.l2_normalize(B)))


def sq_similarity(Q, Tg):
    """s_q for one sample: best cosine between any of the m rows of Q and Tg."""
    Q, Tg = T.as_tensor(Q), T.as_tensor(Tg)
    return T.reshape(sq_matrix(T.reshape(Q, (1,) + Q.shape), T.reshape(Tg, (1, -1))), ())


def _symmetric_infonce(sims, batch, tau):
    """sims[j, k] over all (B + n) candidates on both axes; positives on the diagonal."""
    target = np.arange(batch)
    logits = T.div(sims, tau) if isinstance(tau, Tensor) else T.scale(sims, 1.0 / tau)
    to_text = logits[:batch, :]
    to_image = T.transpose(logits[:, :batch])
    return T.scale(T.add(T.cross_entropy(to_text, target), T.cross_entropy(to_image, target)), 0.5)


def qcl_loss(Q_batch, T_batch, buffers=None, tau_q=TAU_INIT):
    """Symmetric InfoNCE between quasi-textual tokens and text under s_q.

    Denominators run over the B in-batch candidates plus every buffered
    one, the positive included.
    """
    Q_batch, T_batch = T.as_tensor(Q_batch), T.as_tensor(T_batch)
    B = Q_batch.shape[0]
    if B == 0:
        raise ValueError("qcl_loss: empty batch")
    if T_batch.shape[0] != B:
        raise T.ShapeError(f"qcl_loss: {Q_batch.shape} tokens vs {T_batch.shape} text")
    Q_all = _with_negatives(Q_batch, None if buffers is None else buffers.Q)
    T_all = _with_negatives(T_batch, None if buffers is None else buffers.T)
    return _symmetric_infonce(sq_matrix(Q_all, T_all), B, tau_q)


def cl_loss(V_batch, T_batch, buffers=None, tau_c=TAU_INIT):
    """Symmetric InfoNCE between global visual and text features (cosine)."""
    V_batch, T_batch = T.as_tensor(V_batch), T.as_tensor(T_batch)
    B = V_batch.shape[0]
    if B == 0:
        raise ValueError("cl_loss: empty batch")
    if T_batch.shape != V_batch.shape:
        raise T.ShapeError(f"cl_loss: {V_batch.shape} visual vs {T_batch.shape} text")
    V_all = _with_negatives(V_batch, None if buffers is None else buffers.V)
    T_all = _with_negatives(T_batch, None if buffers is None else buffers.T)
    return _symmetric_infonce(cos_matrix(V_all, T_all), B, tau_c)


def lm_loss(logits, targets, mask):
    """Mean next-token cross-entropy over the unmasked (answer) positions."""
    logits = T.as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("lm_loss: no answer positions selected")
    if logits.ndim == 3:
        logits = T.reshape(logits, (-1, logits.shape[-1]))
    return T.cross_entropy(logits, np.asarray(targets).reshape(-1), mask.reshape(-1))


def combine_lm(l_clm, l_mlm, l_flm, weights):
    """lam_c * coarse + lam_m * medium + lam_f * fine; zero weights drop a term."""
    if isinstance(weights, LossWeights):
        weights = (weights.lam_c, weights.lam_m, weights.lam_f)
    total = None
    for loss, w in zip((l_clm, l_mlm, l_flm), weights):
        if w < 0:
            raise ValueError(f"LM weights must be non-negative, got {weights}")
        if w == 0 or loss is None:
            continue
        term = T.scale(loss, w) if isinstance(loss, Tensor) else w * loss
        total = term if total is None else total + term
    return 0.0 if total is None else total


def total_loss(L_cl, L_qcl, L_lm, lam):
    """lam * L_cl + L_qcl + L_lm."""
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    parts = []
    if L_cl is not None and lam != 0:
        parts.append(T.scale(L_cl, lam) if isinstance(L_cl, Tensor) else lam * L_cl)
    for p in (L_qcl, L_lm):
        if p is not None:
            parts.append(p)
    if not parts:
        return 0.0
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
