"""Global multi-exit training and frozen-backbone personalisation of exit heads."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .model import ModelGraph, batched_exit_logits
from .tensor_core import (
    SGD, ConfigError, TrainingAborted, backward_sequence, forward_sequence, log_softmax, softmax,
)

log = logging.getLogger(__name__)


# losses -------------------------------------------------------------------------

def supervised_loss(logits, y: int) -> float:
    """Cross-entropy ``-log softmax(logits)[y]``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[-1]:
        raise ConfigError(f"label {y} outside 0..{logits.shape[-1] - 1}")
    return float(-log_softmax(logits)[y])


def distill_loss(student_logits, teacher_logits, T: float) -> float:
    """``T**2 * KL(softmax(teacher/T) || softmax(student/T))``."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ConfigError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    p_t = softmax(t, T)
    kl = np.sum(p_t * (log_softmax(t, T) - log_softmax(s, T)))
    return float(max(T * T * kl, 0.0))


def self_superv_loss(student_logits, teacher_logits) -> float:
    t = np.asarray(teacher_logits)
    if np.shape(student_logits) != t.shape:
        raise ConfigError("student and teacher logits differ in shape")
    return supervised_loss(student_logits, int(np.argmax(t)))


def _ce_batch(logits, labels):
    """Per-sample cross-entropy and its gradient wrt the logits."""
    z = logits.astype(np.float64)
    lsm = log_softmax(z)
    idx = np.arange(len(labels))
    loss = -lsm[idx, labels]
    grad = np.exp(lsm)
    grad[idx, labels] -= 1.0
    return loss, grad


def _distill_batch(student, teacher, T):
    s, t = student.astype(np.float64), teacher.astype(np.float64)
    lt, ls = log_softmax(t, T), log_softmax(s, T)
    pt = np.exp(lt)
    loss = np.maximum(T * T * np.sum(pt * (lt - ls), axis=-1), 0.0)
    grad = T * (np.exp(ls) - pt)
    return loss, grad


@dataclass
class PersonalisationConfig:
    """Hybrid-loss weights (supervised, self-distillation, self-supervised) and optimiser settings."""

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    T: float = 4.0
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.alpha > 0 and self.gamma > 0:
            raise ConfigError("supervised (alpha) and self-supervised (gamma) terms are mutually exclusive")
        if self.alpha == self.beta == self.gamma == 0:
            raise ConfigError("at least one loss weight must be positive")
        if not self.T > 0:
            raise ConfigError(f"temperature must be positive, got {self.T}")
        if not self.lr > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lr > 0, epochs >= 1, batch_size >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")

    @classmethod
    def hard_labels(cls, **kw):
        return cls(alpha=1.0, beta=0.0, gamma=0.0, **kw)

    @classmethod
    def self_distillation(cls, **kw):
        return cls(alpha=0.0, beta=1.0, gamma=0.0, **kw)

    @classmethod
    def self_supervision(cls, **kw):
        return cls(alpha=0.0, beta=0.0, gamma=1.0, **kw)

    @property
    def needs_labels(self) -> bool:
        return self.alpha > 0

    @property
    def needs_teacher(self) -> bool:
        return self.beta > 0 or self.gamma > 0

    @property
    def mode(self) -> str:
        if self.alpha > 0:
            return "hard_labels"
        if self.gamma > 0:
            return "self_supervision"
        return "self_distillation"


def exit_loss_batch(student, teacher, labels, cfg: PersonalisationConfig):
    """Per-sample hybrid loss of one exit and its gradient wrt the exit logits."""
    n = len(student)
    loss = np.zeros(n)
    grad = np.zeros(student.shape)
    w_sup = cfg.alpha if cfg.gamma == 0 else 0.0
    w_ss = cfg.gamma if cfg.alpha == 0 else 0.0
    if w_sup > 0:
        if labels is None:
            raise ConfigError("supervised personalisation requires labels")
        l, g = _ce_batch(student, labels)
        loss += w_sup * l
        grad += w_sup * g
    if cfg.beta > 0:
        l, g = _distill_batch(student, teacher, cfg.T)
        loss += cfg.beta * l
        grad += cfg.beta * g
    if w_ss > 0:
        l, g = _ce_batch(student, np.argmax(teacher, axis=-1))
        loss += w_ss * l
        grad += w_ss * g
    return loss, grad


def personalisation_loss(exit_outputs: Sequence, y: Optional[int], cfg: PersonalisationConfig):
    """Per-exit hybrid losses for exits 1..M (the last entry is the teacher) and their sum."""
    if cfg.needs_labels and y is None:
        raise ConfigError("alpha > 0 requires a hard label")
    teacher = np.asarray(exit_outputs[-1], dtype=np.float64)[None]
    labels = None if y is None else np.array([y])
    per_exit = []
    for out in exit_outputs[:-1]:
        loss, _ = exit_loss_batch(np.asarray(out, dtype=np.float64)[None], teacher, labels, cfg)
        per_exit.append(float(loss[0]))
    return per_exit, float(sum(per_exit))


# training loops ------------------------------------------------------------------

@dataclass
class GlobalTrainConfig:
    """Joint multi-exit training settings; ``weights`` has one entry per exit 1..M+1."""

    weights: Optional[List[float]] = None
    epochs: int = 10
    lr: float = 0.02
    lr_step: int = 0
    lr_gamma: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    freeze_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.weights is not None:
            if min(self.weights) < 0 or self.weights[-1] <= 0:
                raise ConfigError("exit weights must be >= 0 with a positive final-exit weight")
        if not self.lr > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lr > 0, epochs >= 1, batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_step <= 0:
            return self.lr
        return self.lr * self.lr_gamma ** (epoch // self.lr_step)


def default_exit_weights(model: ModelGraph) -> List[float]:
    """Each early exit weighted by its backbone FLOP fraction; final exit weight 1."""
    total = model.backbone_flops()
    return [model.prefix_flops(ex.block) / total for ex in model.exits] + [1.0]


@dataclass
class TrainingLog:
    rows: List[Dict] = field(default_factory=list)

    def add(self, epoch, exit_id, mean_loss, accuracy=None):
        self.rows.append({"epoch": epoch, "exit_id": exit_id, "mean_loss": mean_loss, "accuracy": accuracy})

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "exit_id", "mean_loss", "accuracy"])
            for r in self.rows:
                acc = "" if r["accuracy"] is None else f"{r['accuracy']:.6f}"
                w.writerow([r["epoch"], r["exit_id"], f"{r['mean_loss']:.6f}", acc])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train_global(model: ModelGraph, dataset, cfg: GlobalTrainConfig):
    """Minimise the weighted sum of per-exit cross-entropies; updates ``model`` in place.

    Exits with zero weight are skipped entirely.  With ``freeze_backbone`` only
    the early-exit heads receive updates.
    """
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    weights = default_exit_weights(model) if cfg.weights is None else list(cfg.weights)
    if len(weights) != model.M + 1:
        raise ConfigError(f"expected {model.M + 1} exit weights, got {len(weights)}")
    active = [i for i in range(1, model.M + 1) if weights[i - 1] > 0]
    train_final = not cfg.freeze_backbone
    if cfg.freeze_backbone and not active:
        raise ConfigError("frozen backbone with no weighted early exit leaves nothing to train")

    params = []
    if train_final:
        params += model.backbone_tensors()
    for i in active:
        params += model.exit_tensors(i)
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    images, labels = dataset.images, dataset.labels
    by_block: Dict[int, List[int]] = {}
    for i in active:
        by_block.setdefault(model.exits[i - 1].block, []).append(i)
    last_block = len(model.blocks) - 1 if train_final else max(model.exits[i - 1].block for i in active)
    tlog = TrainingLog()

    for epoch in range(cfg.epochs):
        sums = np.zeros(model.M + 1)
        hits = np.zeros(model.M + 1)
        for idx in _batches(len(images), cfg.batch_size, rng):
            x, y = images[idx], labels[idx]
            n = len(idx)
            h = x
            block_caches = []
            head_out = {}
            for b in range(last_block + 1):
                h, c = forward_sequence(model.blocks[b], h, need_cache=train_final)
                block_caches.append(c)
                for i in by_block.get(b, ()):
                    head_out[i] = (h, *forward_sequence(model.exits[i - 1].layers, h))
            if train_final:
                head_out[model.M + 1] = (h, *forward_sequence(model.final_head, h))

            feat_grads: Dict[int, np.ndarray] = {}
            grads: List[np.ndarray] = []
            exit_grads = {}
            for i, (feat, logits, caches) in head_out.items():
                loss, g = _ce_batch(logits, y)
                if not np.all(np.isfinite(loss)):
                    raise TrainingAborted(f"non-finite loss at exit {i}, epoch {epoch}")
                sums[i - 1] += loss.sum()
                hits[i - 1] += np.sum(np.argmax(logits, axis=1) == y)
                g = (weights[i - 1] / n) * g
                layers = model.head_layers(i)
                gin, lg = backward_sequence(layers, g.astype(logits.dtype), caches, need_input_grad=train_final)
                exit_grads[i] = [lg[k][name] for k, l in enumerate(layers) for name in l.params]
                if train_final:
                    b = model.exit_block(i)
                    feat_grads[b] = gin if b not in feat_grads else feat_grads[b] + gin
            if train_final:
                g = None
                for b in range(last_block, -1, -1):
                    if b in feat_grads:
                        g = feat_grads[b] if g is None else g + feat_grads[b]
                    g, lg = backward_sequence(model.blocks[b], g, block_caches[b], need_input_grad=b > 0)
                    grads[:0] = [lg[k][name] for k, l in enumerate(model.blocks[b]) for name in l.params]
                grads += exit_grads[model.M + 1]
            for i in active:
                grads += exit_grads[i]
            opt.step(params, grads, lr=cfg.lr_at(epoch))
        for i in list(active) + ([model.M + 1] if train_final else []):
            tlog.add(epoch, i, sums[i - 1] / len(images), hits[i - 1] / len(images))
        log.info("global epoch %d: final-exit loss %.4f", epoch, sums[-1] / len(images))
    return model, tlog


def personalise_exits(model: ModelGraph, user_data, calib_holdout=None,
                      cfg: Optional[PersonalisationConfig] = None, exits: Optional[Sequence[int]] = None):
    """Train early-exit heads on user data with the backbone and final classifier frozen.

    Returns a personalised copy of ``model`` and a :class:`TrainingLog`.  The
    teacher (final-exit) logits are computed once up front since the path to
    the final exit never changes.  ``calib_holdout`` is only evaluated, never
    trained on.
    """
    cfg = PersonalisationConfig() if cfg is None else cfg
    if user_data is None or len(user_data) == 0:
        raise ConfigError("personalisation needs at least one user sample")
    labels = user_data.labels if cfg.needs_labels else None
    if cfg.needs_labels and labels is None:
        raise ConfigError("hard-label personalisation requires labelled user data")
    model = model.copy()
    exits = list(range(1, model.M + 1)) if exits is None else sorted(set(exits))
    if not exits or exits[0] < 1 or exits[-1] > model.M:
        raise ConfigError(f"exits to personalise must lie in 1..{model.M}")

    images = user_data.images
    teacher = batched_exit_logits_final(model, images) if cfg.needs_teacher else None
    params = [p for i in exits for p in model.exit_tensors(i)]
    opt = SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    by_block: Dict[int, List[int]] = {}
    for i in exits:
        by_block.setdefault(model.exits[i - 1].block, []).append(i)
    last_block = max(by_block)
    tlog = TrainingLog()

    for epoch in range(cfg.epochs):
        sums = {i: 0.0 for i in exits}
        for idx in _batches(len(images), cfg.batch_size, rng):
            h = images[idx]
            t = None if teacher is None else teacher[idx]
            y = None if labels is None else labels[idx]
            grads = []
            for b in range(last_block + 1):
                h, _ = forward_sequence(model.blocks[b], h, need_cache=False)
                for i in by_block.get(b, ()):
                    layers = model.exits[i - 1].layers
                    logits, caches = forward_sequence(layers, h)
                    loss, g = exit_loss_batch(logits, t, y, cfg)
                    if not np.all(np.isfinite(loss)):
                        raise TrainingAborted(f"non-finite personalisation loss at exit {i}, epoch {epoch}")
                    sums[i] += float(loss.sum())
                    _, lg = backward_sequence(layers, (g / len(idx)).astype(logits.dtype), caches,
                                              need_input_grad=False)
                    grads += [lg[k][name] for k, l in enumerate(layers) for name in l.params]
            opt.step(params, grads)
        acc = _holdout_accuracy(model, calib_holdout, exits) if calib_holdout is not None else {}
        for i in exits:
            tlog.add(epoch, i, sums[i] / len(images), acc.get(i))
    return model, tlog


def batched_exit_logits_final(model: ModelGraph, images, batch_size: int = 256) -> np.ndarray:
    out = [model.forward_to_exit(images[s:s + batch_size], model.M + 1) for s in range(0, len(images), batch_size)]
    return np.concatenate(out)


def _holdout_accuracy(model, data, exits):
    logits = batched_exit_logits(model, data.images)
    ref = data.labels if data.labels is not None else np.argmax(logits[-1], axis=1)
    return {i: float(np.mean(np.argmax(logits[i - 1], axis=1) == ref)) for i in exits}


def training_flops(model: ModelGraph, mode: str, n_samples: int, exits: Optional[Sequence[int]] = None,
                   needs_teacher: bool = False) -> int:
    """Analytic training FLOPs: forward of the required prefix plus 2x-forward backward
    over the trained layers only.

    ``full`` trains the backbone and every head.  ``exits_only`` trains the heads
    in ``exits`` (default all early exits) and never runs backward through the
    backbone; ``needs_teacher`` adds the full forward pass for distillation targets.
    """
    all_heads = sum(model.head_flops(i) for i in range(1, model.M + 1))
    if mode == "full":
        per_sample = 3 * (model.backbone_flops() + all_heads)
    elif mode == "exits_only":
        exits = list(range(1, model.M + 1)) if exits is None else list(exits)
        heads = sum(model.head_flops(i) for i in exits)
        if needs_teacher:
            prefix = model.backbone_flops()
        else:
            prefix = model.prefix_flops(max(model.exit_block(i) for i in exits))
        per_sample = prefix + 3 * heads
    else:
        raise ConfigError(f"unknown training mode {mode!r}")
    return int(per_sample) * int(n_samples)
