from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOSS_KINDS = ("ce", "logit", "cosine")


@dataclass(frozen=True)
class LossSpec:
    """Scalar objective whose input gradient is requested.

    ``ce``: cross-entropy against integer labels ``target``.
    ``logit``: raw logit of class ``target``.
    ``cosine``: cosine similarity between the penultimate embedding and the
    reference embeddings in ``target``.
    The scalar is the sum over the batch, so each sample's gradient is its own.
    """

    kind: str
    target: torch.Tensor

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unsupported loss_spec {self.kind!r}; expected one of {LOSS_KINDS}")


def per_sample_loss(model, x, spec):
    if spec.kind == "ce":
        return F.cross_entropy(model(x), spec.target, reduction="none")
    if spec.kind == "logit":
        logits = model(x)
        return logits.gather(1, spec.target.view(-1, 1)).squeeze(1)
    emb = model.features(x)
    return F.cosine_similarity(emb, spec.target.to(emb.dtype), dim=1, eps=1e-12)


def input_gradient(model, x, loss_spec):
    """Exact gradient of the summed per-sample loss w.r.t. the input pixels."""
    if not isinstance(loss_spec, LossSpec):
        raise TypeError("loss_spec must be a LossSpec")
    x = x.detach().clone().requires_grad_(True)
    loss = per_sample_loss(model, x, loss_spec).sum()
    (grad,) = torch.autograd.grad(loss, x)
    return grad
