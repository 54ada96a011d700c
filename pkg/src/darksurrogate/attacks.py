"""
Gradient-sign adversarial example optimizers under an L-infinity budget.

FGSM, MI-FGSM, M-DI2-FGSM and ensemble attacks all run through one
momentum loop. Pixels are handled in float64 so the projected iterate
stays inside the budget to rounding precision; models see their own
parameter dtype. sign(0) = 0, so pixels with zero gradient never move.
"""

import contextlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

OBJECTIVES = ("untargeted_ce", "targeted_ce", "targeted_logit", "embedding_dodge", "embedding_impersonate")
# +1: ascend the objective, -1: descend it
OBJECTIVE_SIGN = {
    "untargeted_ce": 1,
    "targeted_ce": -1,
    "targeted_logit": 1,
    "embedding_dodge": -1,
    "embedding_impersonate": 1,
}
FUSIONS = ("logits", "probs")


@dataclass
class AttackConfig:
    """Budget and optimizer settings; all magnitudes on the [0, 1] pixel scale."""

    epsilon: float = 16 / 255
    beta: float = 2 / 255
    mu: float = 1.0
    steps: int = 10
    p_t: float = 0.7
    objective: str = "untargeted_ce"
    diversity: bool = True
    fusion: str = "logits"
    resize_low: float = 0.75

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.beta < 0 or (self.beta == 0 and self.epsilon > 0):
            raise ValueError("beta must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0 <= self.p_t <= 1:
            raise ValueError("p_t must lie in [0, 1]")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def targeted(self):
        return self.objective in ("targeted_ce", "targeted_logit")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdvResult:
    adversarial: torch.Tensor
    grad_norms: torch.Tensor  # (iterations, n) L1 norm of each raw gradient
    iterations: int


def clip_project(x_adv, x_orig, epsilon):
    """Clamp elementwise to ``[x - eps, x + eps]`` intersected with ``[0, 1]``."""
    return torch.min(torch.max(x_adv, x_orig - epsilon), x_orig + epsilon).clamp(0.0, 1.0)


def _check_models(models):
    if isinstance(models, nn.Module):
        models = [models]
    models = list(models)
    if not models:
        raise ValueError("attack needs at least one model")
    for m in models:
        if not isinstance(m, nn.Module):
            raise TypeError(f"attacks need white-box nn.Module surrogates, got {type(m).__name__}")
    k = {m.num_classes for m in models}
    if len(k) != 1:
        raise ValueError(f"ensemble members disagree on class count: {sorted(k)}")
    return models


@contextlib.contextmanager
def _inference(models):
    modes = [m.training for m in models]
    for m in models:
        m.eval()
    try:
        yield
    finally:
        for m, mode in zip(models, modes):
            m.train(mode)


def _dtype(model):
    return next(model.parameters()).dtype


def _fused_logits(models, x, fusion):
    outs = [m(x.to(_dtype(m))) for m in models]
    if fusion == "logits":
        return torch.stack(outs).mean(0)
    probs = torch.stack([torch.softmax(o, dim=1) for o in outs]).mean(0)
    return torch.log(probs.clamp_min(1e-12))


def objective_values(models, x, target, objective, fusion="logits", ref_embeddings=None):
    """Per-sample value of the attack objective (before the ascend/descend sign)."""
    if objective.startswith("embedding"):
        sims = [
            F.cosine_similarity(m.features(x.to(_dtype(m))), ref.to(_dtype(m)), dim=1, eps=1e-12)
            for m, ref in zip(models, ref_embeddings)
        ]
        return torch.stack(sims).mean(0)
    logits = _fused_logits(models, x, fusion)
    if objective == "targeted_logit":
        return logits.gather(1, target.view(-1, 1)).squeeze(1)
    return F.cross_entropy(logits, target, reduction="none")


@torch.no_grad()
def reference_embeddings(models, x_ref):
    return [m.features(x_ref.to(_dtype(m))) for m in models]


def _gather_resize_pad(x, apply, sizes, tops, lefts):
    """Nearest-neighbour resize of each image to ``sizes[i]`` then zero-pad back at an offset."""
    n, c, h, w = x.shape
    rows = torch.arange(h).view(1, h)
    cols = torch.arange(w).view(1, w)
    s = torch.as_tensor(sizes).view(n, 1)
    sw = torch.round(s.double() * w / h).long()
    top = torch.as_tensor(tops).view(n, 1)
    left = torch.as_tensor(lefts).view(n, 1)
    ri = rows - top
    ci = cols - left
    row_ok = (ri >= 0) & (ri < s)
    col_ok = (ci >= 0) & (ci < sw)
    src_r = torch.clamp(torch.floor(ri.double() * h / s).long(), 0, h - 1)
    src_c = torch.clamp(torch.floor(ci.double() * w / sw).long(), 0, w - 1)
    keep = apply.view(n, 1)
    src_r = torch.where(keep, src_r, rows.expand(n, h))
    src_c = torch.where(keep, src_c, cols.expand(n, w))
    valid = torch.where(keep.view(n, 1, 1), row_ok.view(n, h, 1) & col_ok.view(n, 1, w), torch.ones(n, h, w, dtype=torch.bool))
    index = (src_r.view(n, h, 1) * w + src_c.view(n, 1, w)).view(n, 1, h * w).expand(n, c, h * w)
    out = x.flatten(2).gather(2, index).view(n, c, h, w)
    return out * valid.view(n, 1, h, w).to(x.dtype)


def input_diversity(x, p_t, rng, low=0.75):
    """Random resize-and-pad applied per sample with probability ``p_t``.

    The image is resized (nearest neighbour) to a random integer side in
    ``[ceil(low*h), h]`` and zero-padded back to ``h x w`` at a random
    offset. Differentiable w.r.t. ``x``.
    """
    if not 0 <= p_t <= 1:
        raise ValueError("p_t must lie in [0, 1]")
    if p_t == 0:
        return x
    n, _, h, w = x.shape
    apply = torch.from_numpy(rng.random(n) < p_t)
    sizes = rng.integers(math.ceil(low * h), h + 1, n)
    widths = [round(int(s) * w / h) for s in sizes]
    tops = [int(rng.integers(0, h - s + 1)) for s in sizes]
    lefts = [int(rng.integers(0, w - sw + 1)) for sw in widths]
    return _gather_resize_pad(x, apply, sizes, tops, lefts)


def _run(models, x, target, cfg, rng, diversity):
    models = _check_models(models)
    x0 = x.detach().to(torch.float64)
    sign = OBJECTIVE_SIGN[cfg.objective]
    refs = None
    with _inference(models):
        if cfg.objective.startswith("embedding"):
            refs = reference_embeddings(models, target)
        xi = x0.clone()
        g = torch.zeros_like(x0)
        norms = []
        for i in range(cfg.steps):
            xi.requires_grad_(True)
            inp = input_diversity(xi, cfg.p_t, rng.child(f"step{i}"), cfg.resize_low) if diversity else xi
            loss = objective_values(models, inp, target, cfg.objective, cfg.fusion, refs).sum()
            (v,) = torch.autograd.grad(loss, xi)
            xi = xi.detach()
            l1 = v.abs().flatten(1).sum(1)
            normed = torch.where((l1 > 0).view(-1, 1, 1, 1), v / l1.clamp_min(torch.finfo(v.dtype).tiny).view(-1, 1, 1, 1), torch.zeros_like(v))
            g = cfg.mu * g + normed
            xi = clip_project(xi + (sign * cfg.beta) * torch.sign(g), x0, cfg.epsilon)
            norms.append(l1)
    return AdvResult(xi, torch.stack(norms), cfg.steps)


def fgsm(model, x, y, epsilon):
    """Single step ``x + eps * sign(grad CE)``, clamped to the pixel range."""
    models = _check_models(model)
    x0 = x.detach().to(torch.float64)
    with _inference(models):
        xi = x0.clone().requires_grad_(True)
        loss = objective_values(models, xi, y, "untargeted_ce").sum()
        (v,) = torch.autograd.grad(loss, xi)
    adv = clip_project(x0 + (1 * epsilon) * torch.sign(v), x0, epsilon)
    return AdvResult(adv, v.abs().flatten(1).sum(1).unsqueeze(0), 1)


def mi_fgsm(models, x, label_spec, cfg, rng=None):
    """Momentum iterative FGSM (no input diversity).

    ``label_spec`` holds true labels, target labels or reference images
    according to ``cfg.objective``.
    """
    return _run(models, x, label_spec, cfg, rng, diversity=False)


def mdi2_fgsm(models, x, label_spec, cfg, rng):
    """MI-FGSM with every gradient taken at :func:`input_diversity` of the iterate."""
    return _run(models, x, label_spec, cfg, rng, diversity=True)


def targeted_logit_loss(model, x, y_t):
    """Per-sample target logit and its input gradient."""
    models = _check_models(model)
    y_t = torch.as_tensor(y_t, dtype=torch.long)
    if (y_t < 0).any() or (y_t >= models[0].num_classes).any():
        raise ValueError("target label out of range")
    with _inference(models):
        xi = x.detach().clone().requires_grad_(True)
        vals = objective_values(models, xi, y_t, "targeted_logit")
        (grad,) = torch.autograd.grad(vals.sum(), xi)
    return vals.detach(), grad


def ensemble_attack(models, x, label_spec, cfg, rng=None):
    """One shared perturbation against the equal-weight fusion of several surrogates."""
    models = list(models) if not isinstance(models, nn.Module) else [models]
    if not models:
        raise ValueError("ensemble_attack needs at least one model")
    return _run(models, x, label_spec, cfg, rng, diversity=cfg.diversity and cfg.p_t > 0)


def attack(name, models, x, label_spec, cfg, rng):
    """Dispatch by optimizer name: ``fgsm``, ``mi_fgsm`` or ``mdi2_fgsm``."""
    if name == "fgsm":
        if cfg.objective != "untargeted_ce":
            one_step = AttackConfig(**{**cfg.to_dict(), "beta": cfg.epsilon, "mu": 0.0, "steps": 1})
            return mi_fgsm(models, x, label_spec, one_step)
        return fgsm(models, x, label_spec, cfg.epsilon)
    if name == "mi_fgsm":
        return mi_fgsm(models, x, label_spec, cfg)
    if name == "mdi2_fgsm":
        return mdi2_fgsm(models, x, label_spec, cfg, rng)
    raise ValueError(f"unknown optimizer {name!r}")


OPTIMIZERS = ("fgsm", "mi_fgsm", "mdi2_fgsm")
