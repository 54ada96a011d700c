"""
Mixing augmentations written in the single mask form

    mixed = x * M + x_ref * (1 - M)

Cutout mixes with the all-zero image, Mixup uses a constant mask equal to
its blend weight, and CutMix uses a binary mask that is zero inside the
pasted rectangle. Masks and blend weights are drawn per sample.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

MIX_KINDS = ("none", "cutout", "mixup", "cutmix")


@dataclass
class MixResult:
    mixed: torch.Tensor
    mask: torch.Tensor  # (n, c, h, w), broadcast view
    lam: torch.Tensor  # (n,) float64, weight kept from the original image
    partner: torch.Tensor  # (n,) index into the batch, -1 for the zero image


def _blend(x, x_ref, mask):
    return x * mask + x_ref * (1 - mask)


def _check_pair(x, x_ref):
    if x.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_ref.shape)}")


def sample_lambda(alpha, rng, size=None):
    """Draw from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return rng.beta(alpha, alpha, size)


def partner_indices(n, rng):
    """A random pairing of batch indices with no fixed points when ``n >= 2``."""
    if n < 2:
        return np.zeros(n, dtype=np.int64)
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def _box_mask(n, h, w, boxes, dtype):
    mask = torch.ones(n, 1, h, w, dtype=dtype)
    for i, (y1, y2, x1, x2) in enumerate(boxes):
        mask[i, :, y1:y2, x1:x2] = 0
    return mask


def _clipped_box(cy, cx, bh, bw, h, w):
    y1 = int(np.clip(cy - bh // 2, 0, h))
    y2 = int(np.clip(cy - bh // 2 + bh, 0, h))
    x1 = int(np.clip(cx - bw // 2, 0, w))
    x2 = int(np.clip(cx - bw // 2 + bw, 0, w))
    return y1, y2, x1, x2


def _area_lambda(boxes, h, w):
    return torch.tensor([1.0 - (y2 - y1) * (x2 - x1) / (h * w) for y1, y2, x1, x2 in boxes], dtype=torch.float64)


def cutout(x, mask_side, rng, centers=None):
    """Zero a ``mask_side`` square per image; squares are clipped at the border.

    Square centers are uniform over the image unless ``centers`` (one
    ``(row, col)`` per sample) pins them.
    """
    n, c, h, w = x.shape
    if not 0 < mask_side <= min(h, w):
        raise ValueError(f"mask_side must be in (0, {min(h, w)}], got {mask_side}")
    if centers is None:
        centers = np.stack([rng.integers(0, h, n), rng.integers(0, w, n)], axis=1)
    boxes = [_clipped_box(int(cy), int(cx), mask_side, mask_side, h, w) for cy, cx in centers]
    mask = _box_mask(n, h, w, boxes, x.dtype).expand(n, c, h, w)
    mixed = _blend(x, torch.zeros_like(x), mask)
    return MixResult(mixed, mask, _area_lambda(boxes, h, w), torch.full((n,), -1, dtype=torch.long))


def mixup(x, x_ref, lam, partner=None):
    """Blend ``lam * x + (1 - lam) * x_ref``; ``lam`` is a scalar or one value per sample."""
    _check_pair(x, x_ref)
    n = x.shape[0]
    lam = torch.as_tensor(lam, dtype=torch.float64).expand(n).clone()
    if ((lam < 0) | (lam > 1)).any():
        raise ValueError("mixup lambda must lie in [0, 1]")
    mask = lam.to(x.dtype).view(n, 1, 1, 1).expand_as(x)
    if partner is None:
        partner = torch.arange(n)
    return MixResult(_blend(x, x_ref, mask), mask, lam, torch.as_tensor(partner))


def cutmix(x, x_ref, alpha, rng, lam=None, boxes=None, partner=None):
    """Paste a rectangle of ``x_ref`` into ``x``.

    Per sample, ``lam0 ~ Beta(alpha, alpha)`` (or the given ``lam``) sets a
    box of sides ``h*sqrt(1-lam0)`` by ``w*sqrt(1-lam0)`` around a uniform
    center, clipped at the border. The returned ``lam`` is recomputed from
    the clipped box. ``boxes`` (``(y1, y2, x1, x2)`` per sample) bypasses
    sampling entirely.
    """
    _check_pair(x, x_ref)
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    n, c, h, w = x.shape
    if boxes is None:
        lam0 = np.broadcast_to(np.asarray(lam, dtype=float), (n,)) if lam is not None else sample_lambda(alpha, rng, n)
        cys, cxs = rng.integers(0, h, n), rng.integers(0, w, n)
        boxes = []
        for l0, cy, cx in zip(lam0, cys, cxs):
            r = math.sqrt(1.0 - float(l0))
            boxes.append(_clipped_box(int(cy), int(cx), int(h * r), int(w * r), h, w))
    mask = _box_mask(n, h, w, boxes, x.dtype).expand(n, c, h, w)
    if partner is None:
        partner = torch.arange(n)
    return MixResult(_blend(x, x_ref, mask), mask, _area_lambda(boxes, h, w), torch.as_tensor(partner))


def pseudo_label(lam, y, y_prime, num_classes):
    """``lam * e_y + (1 - lam) * e_y'``; scalars or aligned batches."""
    y = torch.as_tensor(y, dtype=torch.long)
    y_prime = torch.as_tensor(y_prime, dtype=torch.long)
    for v in (y, y_prime):
        if (v < 0).any() or (v >= num_classes).any():
            raise ValueError(f"class index out of range for {num_classes} classes")
    lam = torch.as_tensor(lam, dtype=torch.float64)
    y, y_prime, lam = torch.broadcast_tensors(y, y_prime, lam)
    out = torch.zeros(*y.shape, num_classes, dtype=torch.float64)
    out.scatter_add_(-1, y.unsqueeze(-1), lam.unsqueeze(-1))
    out.scatter_add_(-1, y_prime.unsqueeze(-1), (1 - lam).unsqueeze(-1))
    return out


def mix_batch(kind, x, rng, alpha=1.0, mask_side=None):
    """Apply one mixing strategy to a batch, pairing samples at random.

    ``mask_side`` defaults to half the image height for Cutout.
    """
    n, _, h, _ = x.shape
    if kind == "none":
        mask = torch.ones_like(x)
        return MixResult(x, mask, torch.ones(n, dtype=torch.float64), torch.arange(n))
    if kind == "cutout":
        return cutout(x, mask_side or h // 2, rng)
    partner = torch.from_numpy(partner_indices(n, rng))
    if kind == "mixup":
        return mixup(x, x[partner], sample_lambda(alpha, rng, n), partner=partner)
    if kind == "cutmix":
        return cutmix(x, x[partner], alpha, rng, partner=partner)
    raise ValueError(f"unknown mix strategy {kind!r}; expected one of {MIX_KINDS}")
