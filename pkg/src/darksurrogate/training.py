"""
Surrogate training loops.

All three loops share one mini-batch SGD driver: per epoch a fresh
permutation, per batch the normal augmentations (flip, pad-and-crop), an
optional mixing augmentation, a target distribution, and one step of
soft-target cross-entropy. Every random draw comes from a named child
stream of the run's :class:`~darksurrogate.core.Rng`, so a run is fully
determined by its config and seed.
"""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augment import MIX_KINDS, mix_batch
from .core.numeric import soft_cross_entropy
from .core.rng import Rng
from .labeling import STRATEGIES, LabelStrategy


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    milestones: tuple = (15, 25)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    mix_strategy: str = "none"
    alpha: float = 1.0
    mask_side: int = None
    label_strategy: str = "one_hot"
    smoothing: float = 0.1
    temperature: float = 1.0
    flip: bool = True
    crop_pad: int = 2
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("lr decay milestones must be strictly increasing")
        if self.mix_strategy not in MIX_KINDS:
            raise ValueError(f"unknown mix strategy {self.mix_strategy!r}")
        if self.label_strategy not in STRATEGIES:
            raise ValueError(f"unknown label strategy {self.label_strategy!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class TrainLog:
    """One record per epoch.

    ``train_acc`` is the agreement between the model's argmax and the argmax
    of the training target on the (augmented) batches, which equals plain
    training accuracy for one-hot targets and needs no labels for teacher
    targets. ``test_acc`` is None when no evaluation set was given.
    """

    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    def deterministic(self):
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_jsonl(self, path=None):
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@torch.no_grad()
def predict(model, images, batch_size=512):
    was_training = model.training
    model.eval()
    try:
        return torch.cat([model(images[i : i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])
    finally:
        model.train(was_training)


def accuracy(model, dataset):
    return float((predict(model, dataset.images) == dataset.labels).double().mean())


def normal_augment(x, rng, flip=True, crop_pad=2):
    """Random horizontal flip and zero pad-and-crop, drawn per sample."""
    n, _, h, w = x.shape
    if flip:
        flips = torch.from_numpy(rng.random(n) < 0.5)
        x = torch.where(flips.view(n, 1, 1, 1), x.flip(3), x)
    if crop_pad:
        p = crop_pad
        padded = torch.nn.functional.pad(x, (p, p, p, p))
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        out = torch.empty_like(x)
        for oy, ox in set(zip(dy.tolist(), dx.tolist())):
            sel = torch.from_numpy(np.flatnonzero((dy == oy) & (dx == ox)))
            out[sel] = padded[sel, :, oy : oy + h, ox : ox + w]
        x = out
    return x


def distillation_loss(student, x, target):
    """Batch-mean ``CE(target, softmax(student(x)))``."""
    return soft_cross_entropy(target, student(x))


def _has_batchnorm(model):
    return any(isinstance(m, torch.nn.modules.batchnorm._BatchNorm) for m in model.modules())


def fit(model, dataset, cfg, batch_loss, rng=None, eval_set=None, log_every=None):
    """Generic SGD driver.

    ``batch_loss(model, mix, idx, rng)`` receives the mixed batch
    (:class:`~darksurrogate.augment.MixResult`) and the dataset indices of
    its base images and returns ``(loss, agreement)`` where ``agreement``
    is a bool tensor used for the logged training accuracy.
    """
    rng = rng or Rng(cfg.seed, "train")
    log = TrainLog()
    if cfg.epochs == 0:
        return model, log
    images = dataset.images
    n = len(images)
    min_batch = 2 if _has_batchnorm(model) else 1
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.lr_decay)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        erng = rng.child(f"epoch{epoch}")
        order = erng.permutation(n)
        total, agree, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < min_batch:
                continue
            brng = erng.child(f"batch{b}")
            x = normal_augment(images[idx], brng.child("aug"), cfg.flip, cfg.crop_pad)
            mix = mix_batch(cfg.mix_strategy, x, brng.child("mix"), cfg.alpha, cfg.mask_side)
            loss, ok = batch_loss(model, mix, idx, brng.child("target"))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b} (lr={sched.get_last_lr()[0]:g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            agree += int(ok.sum())
            seen += len(idx)
        sched.step()
        model.eval()
        log.append(
            epoch=epoch,
            loss=total / max(seen, 1),
            train_acc=agree / max(seen, 1),
            test_acc=accuracy(model, eval_set) if eval_set is not None else None,
            wall_time=time.perf_counter() - t0,
        )
        if log_every and (epoch + 1) % log_every == 0:
            print(json.dumps(log.records[-1]))
    model.eval()
    return model, log


def _label_targets(strategy, labels, mix, idx, num_classes):
    """Ground-truth targets, mixed by the pseudo-label rule for Mixup/CutMix.

    Cutout keeps the base image's label.
    """
    y = labels[idx]
    target = strategy.from_labels(y, num_classes)
    if mix.partner.numel() and (mix.partner >= 0).all() and not torch.equal(mix.partner, torch.arange(len(idx))):
        lam = mix.lam.view(-1, 1)
        target = lam * target + (1 - lam) * target[mix.partner]
    return target


def _soft_step(model, x, target):
    logits = model(x)
    loss = soft_cross_entropy(target.to(logits.dtype), logits)
    return loss, logits.argmax(1) == target.argmax(1)


def train_normal(model, dataset, cfg, rng=None, eval_set=None):
    """Minimize cross-entropy against (optionally smoothed, optionally mixed) ground truth."""
    strategy = LabelStrategy(cfg.label_strategy if cfg.label_strategy in ("one_hot", "smooth") else "one_hot", gamma=cfg.smoothing)
    labels, k = dataset.labels, dataset.num_classes

    def batch_loss(m, mix, idx, _rng):
        return _soft_step(m, mix.mixed, _label_targets(strategy, labels, mix, idx, k))

    return fit(model, dataset, cfg, batch_loss, rng=rng, eval_set=eval_set)


def train_dsm(student, teacher, dataset, cfg, rng=None, eval_set=None):
    """Train a surrogate on teacher soft labels of mixed images.

    Per batch the configured mixing augmentation produces ``x_mix``; the
    target is the teacher's softmax on ``x_mix`` (recomputed every batch).
    With ``label_strategy="dark"`` the dataset labels are never read;
    ``dark_shuffled``/``dark_reversed`` read them to locate the true class;
    ``one_hot``/``smooth`` fall back to ground-truth baselines.
    """
    if teacher is None:
        raise ValueError("train_dsm needs a teacher model")
    k = dataset.num_classes
    if teacher.num_classes != k or student.num_classes != k:
        raise ValueError(f"class count mismatch: teacher {teacher.num_classes}, student {student.num_classes}, data {k}")
    if cfg.label_strategy in ("one_hot", "smooth"):
        return train_normal(student, dataset, cfg, rng=rng, eval_set=eval_set)
    strategy = LabelStrategy(cfg.label_strategy, teacher=teacher, temperature=cfg.temperature)
    teacher.eval()
    label_cache = {}

    def labels_for(idx):
        if "y" not in label_cache:
            label_cache["y"] = dataset.labels
        return label_cache["y"][idx]

    def batch_loss(m, mix, idx, brng):
        target = strategy.from_teacher(mix.mixed, lambda: labels_for(idx), brng, k)
        return _soft_step(m, mix.mixed, target)

    return fit(student, dataset, cfg, batch_loss, rng=rng, eval_set=eval_set)


ROBUST_STEPS = 5


def train_slightly_robust(model, dataset, cfg, eps_r, rng=None, eval_set=None):
    """Adversarial training with a small budget.

    Every batch is replaced by a 5-step iterative sign attack (step
    ``eps_r / 4``, no random start) against the current model before the
    cross-entropy step.
    """
    from .attacks import AttackConfig, mi_fgsm

    if eps_r < 0:
        raise ValueError("eps_r must be non-negative")
    labels, k = dataset.labels, dataset.num_classes
    strategy = LabelStrategy("one_hot")
    acfg = AttackConfig(epsilon=eps_r, beta=eps_r / 4, mu=0.0, steps=ROBUST_STEPS) if eps_r > 0 else None

    def batch_loss(m, mix, idx, _rng):
        x = mix.mixed
        y = labels[idx]
        if acfg is not None:
            m.eval()
            x = mi_fgsm(m, x, y, acfg).adversarial.to(x.dtype)
            m.train()
        return _soft_step(m, x, _label_targets(strategy, labels, mix, idx, k))

    return fit(model, dataset, cfg, batch_loss, rng=rng, eval_set=eval_set)

