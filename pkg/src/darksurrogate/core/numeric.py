import torch

PROB_FLOOR = 1e-12


def _as_tensor(v):
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(v, dtype=torch.float64)


def softmax(z, temperature=1.0):
    """Max-shifted softmax over the last axis.

    Accepts a single logit vector or a batch of them. Non-finite logits are
    rejected rather than propagated.
    """
    z = _as_tensor(z)
    if not torch.isfinite(z).all():
        raise ValueError("softmax input contains non-finite values")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(z, temperature=1.0):
    z = _as_tensor(z) / temperature
    return z - torch.logsumexp(z, dim=-1, keepdim=True)


def cross_entropy(p, q):
    """``-sum_i p_i log q_i`` over the last axis, with ``q`` floored at 1e-12."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"class count mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    return -(p * torch.log(q.clamp_min(PROB_FLOOR))).sum(dim=-1)


def soft_cross_entropy(target, logits):
    """Batch-mean cross-entropy between target distributions and ``softmax(logits)``.

    Uses log-softmax directly, so it is the training-time counterpart of
    :func:`cross_entropy` without the probability floor.
    """
    return -(target * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def is_simplex(p, atol=1e-6):
    p = _as_tensor(p)
    return bool((p >= 0).all()) and bool(torch.allclose(p.sum(-1), torch.ones((), dtype=p.dtype), atol=atol))
