"""Pre-training loop, optimiser/schedule and the linear-probe downstream task."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data.reports import GRANULARITIES
from .data.vocab import EOS, SEP
from .encoders import wrap_report
from .losses import LossWeights, NegativeBuffers, cl_loss, combine_lm, lm_loss, qcl_loss, total_loss
from .model import ModelConfig, QVQAModel
from .tensor.nn import Linear

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "L_total", "L_cl", "L_qcl", "l_clm", "l_mlm", "l_flm", "lr")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 25
    buffer_size: int = 100
    lr: float = 2e-5
    weight_decay: float = 0.05
    warmup_fraction: float = 0.4
    init_lr: float = 1e-8
    epochs: int = 50
    early_stop_patience: int | None = 5
    seed: int = 0
    preset: str = "report_gen"
    lam: float = 1.0
    use_cl: bool = True
    use_qcl: bool = True
    granularities: tuple = GRANULARITIES
    max_steps: int | None = None
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0  # global gradient-norm ceiling; None disables
    weights_override: tuple | None = None  # explicit (lam_c, lam_m, lam_f)

    def __post_init__(self):
        errors = []
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.buffer_size < 0:
            errors.append(f"buffer_size must be >= 0 (got {self.buffer_size})")
        if not 0 <= self.warmup_fraction < 1:
            errors.append(f"warmup_fraction must lie in [0, 1) (got {self.warmup_fraction})")
        if self.preset not in ("report_gen", "visual"):
            errors.append(f"preset must be 'report_gen' or 'visual' (got {self.preset!r})")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errors.append(f"grad_clip must be positive or null (got {self.grad_clip})")
        if self.lr < 0:
            errors.append(f"lr must be >= 0 (got {self.lr})")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1 (got {self.epochs})")
        bad = [g for g in self.granularities if g not in GRANULARITIES]
        if bad:
            errors.append(f"unknown granularities {bad}")
        if errors:
            raise ValueError("invalid training config: " + "; ".join(errors))
        self.granularities = tuple(self.granularities)

    def loss_weights(self):
        w = LossWeights.preset(self.preset, lam=self.lam)
        if self.weights_override is not None:
            w.lam_c, w.lam_m, w.lam_f = self.weights_override
        return w


# optimisation ----------------------------------------------------------------


def lr_at(step, total_steps, peak, warmup_fraction=0.4, floor=1e-8):
    """Linear warmup from ``floor`` to ``peak``, then cosine annealing back to ``floor``."""
    warm = int(round(warmup_fraction * total_steps))
    if warm > 0 and step <= warm:
        return floor + (peak - floor) * step / warm
    span = max(total_steps - warm, 1)
    progress = min(max(step - warm, 0) / span, 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.ndim >= 2 and self.weight_decay:
                p.data *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


# data ------------------------------------------------------------------------


@dataclass
class EncodedSample:
    id: str
    images: np.ndarray
    report_ids: list
    qa: dict  # granularity -> [(question ids, answer ids), ...]
    nodule_present: bool
    reference: str = ""  # coarse answer text ([size]-masked report)
    organ: str = ""
    coarse_question: list = field(default_factory=list)


def encode_sample(sample, vocab):
    qa = {g: [] for g in GRANULARITIES}
    for p in sample.qa:
        qa[p.granularity].append((vocab.tokenize(p.question) + [SEP], vocab.tokenize(p.answer) + [EOS]))
    coarse = sample.pairs("coarse")[0]
    return EncodedSample(
        id=sample.id,
        images=sample.images,
        report_ids=wrap_report(vocab.tokenize(sample.report)),
        qa=qa,
        nodule_present=sample.scene.nodule_present,
        reference=coarse.answer,
        organ=sample.scene.organ,
        coarse_question=qa["coarse"][0][0],
    )


def sample_qa(qa, rng):
    """One (question, answer) pair per granularity, uniform within each."""
    out = []
    for g in GRANULARITIES:
        pairs = qa.get(g) or []
        if not pairs:
            raise ValueError(f"sample has no {g} QA pair")
        out.append(pairs[int(rng.integers(len(pairs)))])
    return tuple(out)


# losses ----------------------------------------------------------------------


def compute_losses(model, batch, triples, buffers, weights, cfg):
    """Forward pass for one batch; returns a dict of loss Tensors (None when disabled)."""
    images = np.stack([s.images for s in batch])
    enc = model.encode_images(images)
    Tg = model.encode_reports([s.report_ids for s in batch])
    out = {"L_cl": None, "L_qcl": None, "l_clm": None, "l_mlm": None, "l_flm": None}
    if cfg.use_cl and weights.lam > 0:
        out["L_cl"] = cl_loss(enc["V_avg"], Tg, buffers, model.tau_c)
    if cfg.use_qcl:
        out["L_qcl"] = qcl_loss(enc["Q_avg"], Tg, buffers, model.tau_q)
    lm_weights = (weights.lam_c, weights.lam_m, weights.lam_f)
    for k, (name, g) in enumerate(zip(("l_clm", "l_mlm", "l_flm"), GRANULARITIES)):
        if lm_weights[k] == 0 or g not in cfg.granularities:
            continue
        qs = [tr[k][0] for tr in triples]
        ans = [tr[k][1] for tr in triples]
        logits, targets, mask = model.generator.score_batch(enc["Q_cat"], qs, ans)
        out[name] = lm_loss(logits, targets, mask)
    out["L_lm"] = combine_lm(out["l_clm"], out["l_mlm"], out["l_flm"], lm_weights)
    out["L_total"] = total_loss(out["L_cl"], out["L_qcl"], out["L_lm"], weights.lam)
    out["features"] = (Tg, enc["V_avg"], enc["Q_avg"])
    return out


def _value(x):
    if x is None:
        return 0.0
    return x.item() if isinstance(x, T.Tensor) else float(x)


class Trainer:
    def __init__(self, model, cfg, total_steps):
        self.model = model
        self.cfg = cfg
        self.weights = cfg.loss_weights()
        self.buffers = NegativeBuffers(cfg.buffer_size, model.cfg.d_model, model.cfg.m)
        self.opt = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                         weight_decay=cfg.weight_decay)
        self.total_steps = max(int(total_steps), 1)
        self.step_count = 0

    def current_lr(self):
        if self.cfg.lr == 0:
            return 0.0
        return lr_at(self.step_count, self.total_steps, self.cfg.lr, self.cfg.warmup_fraction, self.cfg.init_lr)

    def train_step(self, batch, triples, epoch=0):
        """One optimiser update; buffers are pushed after the losses are computed."""
        if not batch:
            raise ValueError("empty batch")
        lr = self.current_lr()
        self.opt.lr = lr
        self.opt.zero_grad()
        out = compute_losses(self.model, batch, triples, self.buffers, self.weights, self.cfg)
        total = out["L_total"]
        record = {
            "step": self.step_count,
            "epoch": epoch,
            "L_total": _value(total),
            "L_cl": _value(out["L_cl"]),
            "L_qcl": _value(out["L_qcl"]),
            "l_clm": _value(out["l_clm"]),
            "l_mlm": _value(out["l_mlm"]),
            "l_flm": _value(out["l_flm"]),
            "lr": lr,
        }
        if not all(math.isfinite(record[k]) for k in METRIC_COLUMNS[2:8]):
            raise NonFiniteLoss(f"non-finite loss at step {self.step_count} (epoch {epoch}): {record}")
        if isinstance(total, T.Tensor) and total.requires_grad:
            total.backward()
        if self.cfg.grad_clip is not None:
            clip_grad_norm(self.opt.params, self.cfg.grad_clip)
        self.opt.step()
        self.model.clamp_temperatures()
        Tg, V_avg, Q_avg = out["features"]
        self.buffers.push(Tg.data, V_avg.data, Q_avg.data)
        self.step_count += 1
        return record


def validation_loss(model, samples, cfg, weights, seed):
    """Mean total loss over ``samples`` with in-batch negatives only and fixed QA draws."""
    rng = np.random.default_rng([seed, 7919])
    triples = [sample_qa(s.qa, rng) for s in samples]
    totals = []
    with T.no_grad():
        for i in range(0, len(samples), cfg.batch_size):
            out = compute_losses(model, samples[i:i + cfg.batch_size], triples[i:i + cfg.batch_size],
                                 None, weights, cfg)
            totals.append(_value(out["L_total"]) * len(samples[i:i + cfg.batch_size]))
    return sum(totals) / len(samples)


@dataclass
class PretrainResult:
    model: QVQAModel
    records: list
    val_losses: list
    best_epoch: int
    stopped_epoch: int
    out_dir: Path | None


def pretrain(cfg, train, val, model_cfg, out_dir=None, model=None, progress=None, meta=None):
    """Run epochs of pre-training over encoded samples.

    Early stopping monitors the validation total loss; ``None`` patience
    disables it. Writes metrics.csv and best/final checkpoints when
    ``out_dir`` is given; ``meta`` is stored alongside each checkpoint.
    """
    if not train:
        raise ValueError("empty training split")
    if not val:
        raise ValueError("empty validation split")
    model = model or QVQAModel(model_cfg)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    trainer = Trainer(model, cfg, total)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(
            json.dumps({"train": asdict(cfg), "model": asdict(model_cfg)}, indent=2, sort_keys=True, default=list) + "\n"
        )

    records, val_losses = [], []
    best, best_epoch, epoch = math.inf, -1, 0
    best_state = None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train))
        triples = {i: sample_qa(train[i].qa, rng) for i in order}
        for start in range(0, len(order), cfg.batch_size):
            if trainer.step_count >= total:
                break
            idx = order[start:start + cfg.batch_size]
            rec = trainer.train_step([train[i] for i in idx], [triples[i] for i in idx], epoch)
            records.append(rec)
        vl = validation_loss(model, val, cfg, trainer.weights, cfg.seed)
        val_losses.append(vl)
        if progress:
            progress(epoch, records[-1], vl)
        if vl < best:
            best, best_epoch = vl, epoch
            best_state = model.state_dict()
        if cfg.early_stop_patience is not None and epoch - best_epoch >= cfg.early_stop_patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
        if trainer.step_count >= total:
            break

    if out_dir is not None:
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in records:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_COLUMNS})
        extra = dict(meta or {}, train=json.loads(json.dumps(asdict(cfg), default=list)))
        model.save(out_dir / "checkpoints" / "final", extra)
        final_state = model.state_dict()
        model.load_state_dict(best_state)
        model.save(out_dir / "checkpoints" / "best", dict(extra, best_epoch=best_epoch))
        model.load_state_dict(final_state)
    return PretrainResult(model, records, val_losses, best_epoch, epoch, out_dir)


# downstream --------------------------------------------------------------------


def visual_features(model, images, batch_size=64):
    """Frozen global visual features V for single images (N, H, W)."""
    feats = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            V, _ = model.visual(T.Tensor(np.asarray(images[i:i + batch_size])))
            feats.append(V.data)
    return np.concatenate(feats, axis=0)


def linear_probe(model, train_images, train_labels, test_images, test_labels,
                 lr=5e-4, weight_decay=1e-6, steps=3000, seed=0):
    """Accuracy of a single linear layer trained on frozen V features."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if len(np.unique(train_labels)) < 2 or len(np.unique(test_labels)) < 2:
        raise ValueError("linear probe needs both classes in the train and test splits")
    xtr = visual_features(model, train_images)
    xte = visual_features(model, test_images)
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-6
    xtr = T.Tensor((xtr - mu) / sd)
    xte = T.Tensor((xte - mu) / sd)
    head = Linear(xtr.shape[1], 2, np.random.default_rng(seed))
    opt = AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        opt.zero_grad()
        T.cross_entropy(head(xtr), train_labels).backward()
        opt.step()
    with T.no_grad():
        pred = np.argmax(head(xte).data, axis=1)
    return float((pred == test_labels).mean())


def probe_split(samples, seed, test_fraction=0.3):
    """Stratified scene-level split into (train images, labels, test images, labels); both views kept."""
    rng = np.random.default_rng(seed)
    pos = [s for s in samples if s.nodule_present]
    neg = [s for s in samples if not s.nodule_present]
    if not pos or not neg:
        raise ValueError("linear probe needs both nodule-present and nodule-absent scenes")
    tr, te = [], []
    for group in (pos, neg):
        idx = rng.permutation(len(group))
        k = max(1, int(round(len(group) * test_fraction)))
        te += [group[i] for i in idx[:k]]
        tr += [group[i] for i in idx[k:]]

    def flat(group):
        imgs = np.concatenate([s.images for s in group], axis=0)
        labels = np.repeat([int(s.nodule_present) for s in group], 2)
        return imgs, labels

    return (*flat(tr), *flat(te))
