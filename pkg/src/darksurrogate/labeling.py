"""
Label-construction strategies for surrogate training: one-hot, label
smoothing, teacher soft labels ("dark"), and two corrupted variants of the
teacher labels that keep the true-class probability but scramble the rest.
"""

from dataclasses import dataclass

import torch

from .core.numeric import softmax

STRATEGIES = ("one_hot", "smooth", "dark", "dark_shuffled", "dark_reversed")
TEACHER_STRATEGIES = ("dark", "dark_shuffled", "dark_reversed")


def _check_range(y, num_classes):
    y = torch.as_tensor(y, dtype=torch.long)
    if (y < 0).any() or (y >= num_classes).any():
        raise ValueError(f"label out of range for {num_classes} classes")
    return y


def one_hot(y, num_classes):
    y = _check_range(y, num_classes)
    return torch.nn.functional.one_hot(y, num_classes).to(torch.float64)


def smooth_label(y, num_classes, gamma):
    """``(1 - gamma)`` on the true class and ``gamma / (K - 1)`` on every other class."""
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if gamma > 0 and num_classes < 2:
        raise ValueError("label smoothing needs at least two classes")
    hot = one_hot(y, num_classes)
    if gamma == 0:
        return hot
    return hot * (1 - gamma) + (1 - hot) * (gamma / (num_classes - 1))


@torch.no_grad()
def dark_label(teacher, x, temperature=1.0, num_classes=None):
    """Teacher soft labels ``softmax(f(x) / T)``, evaluated in inference mode."""
    if num_classes is not None and teacher.num_classes != num_classes:
        raise ValueError(f"teacher has {teacher.num_classes} classes, dataset has {num_classes}")
    was_training = teacher.training
    teacher.eval()
    try:
        return softmax(teacher(x), temperature=temperature)
    finally:
        teacher.train(was_training)


def _batched(p, y):
    p = torch.as_tensor(p)
    single = p.ndim == 1
    if single:
        p = p.unsqueeze(0)
    y = _check_range(y, p.shape[-1]).reshape(-1).expand(p.shape[0])
    return p, y, single


def shuffle_dark(p, y, rng):
    """Randomly permute the non-true entries of each distribution; ``p_y`` stays put."""
    p, y, single = _batched(p, y)
    n, k = p.shape
    hot = torch.nn.functional.one_hot(y, k).bool()
    keys = torch.from_numpy(rng.random((n, k))).masked_fill(hot, float("inf"))
    src = torch.argsort(keys, dim=1)[:, : k - 1]
    dest = torch.sort(hot.to(torch.int8), dim=1, stable=True).indices[:, : k - 1]
    out = p.clone()
    out.scatter_(1, dest, p.gather(1, src))
    return out[0] if single else out


def reverse_dark(p, y):
    """Invert the rank order of the non-true entries at fixed positions.

    The position holding the smallest non-true value receives the largest,
    and so on; ties rank by ascending index.
    """
    p, y, single = _batched(p, y)
    n, k = p.shape
    hot = torch.nn.functional.one_hot(y, k).bool()
    vals, pos = torch.sort(p.masked_fill(hot, float("inf")), dim=1, stable=True)
    out = p.clone()
    out.scatter_(1, pos[:, : k - 1], vals[:, : k - 1].flip(1))
    return out[0] if single else out


@dataclass
class LabelStrategy:
    kind: str = "one_hot"
    gamma: float = 0.1
    teacher: object = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown label strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind in TEACHER_STRATEGIES and self.teacher is None:
            raise ValueError(f"label strategy {self.kind!r} requires a teacher")
        if self.kind == "smooth" and not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def needs_teacher(self):
        return self.kind in TEACHER_STRATEGIES

    def from_labels(self, y, num_classes):
        """Targets for strategies that work from ground truth alone."""
        if self.kind == "one_hot":
            return one_hot(y, num_classes)
        if self.kind == "smooth":
            return smooth_label(y, num_classes, self.gamma)
        raise ValueError(f"{self.kind!r} needs teacher outputs")

    def from_teacher(self, x, y_fn, rng, num_classes):
        """Teacher-derived targets; ``y_fn`` is only called for the corrupted variants."""
        p = dark_label(self.teacher, x, self.temperature, num_classes=num_classes)
        if self.kind == "dark":
            return p
        y = y_fn()
        if self.kind == "dark_shuffled":
            return shuffle_dark(p, y, rng)
        return reverse_dark(p, y)
