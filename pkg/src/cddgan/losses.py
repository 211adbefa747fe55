"""Scalar objectives.

Tensors follow torch layout: images are ``(..., H, W)`` with channels before
the spatial axes, embeddings keep their feature dimension last. Reductions:
total variation sums over pixels and channels (averaged over the batch);
dark-channel, cycle and diversity terms are means.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    div: float = 1.0     # lambda1
    adv: float = 1.0     # lambda2
    cycle: float = 0.1   # lambda3
    tv: float = 1e-3     # lambda4
    dc: float = 1e-2     # lambda5
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        for name in ("div", "adv", "cycle", "tv", "dc"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def _cosine(u, v):
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise ValueError("similarity is undefined for zero vectors")
    return (u * v).sum(-1) / (nu * nv)


def similarity(u, v, tau: float):
    """``exp(cos(u, v) / tau)``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    u = torch.as_tensor(u, dtype=torch.float64) if not torch.is_tensor(u) else u
    v = torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
    return torch.exp(_cosine(u, v) / tau)


def contrastive_terms(queries, positives, negatives, tau: float, neg_index=None):
    """Per-query ``-log(s+ / (s+ + sum_i s-_i))`` for a single tap.

    ``queries``/``positives`` are ``(B, Q, d)``; ``negatives`` is either a
    shared bank ``(B, N, d)`` or per-query ``(B, Q, N, d)``. With
    ``neg_index`` of shape ``(Q, N)``, query ``j`` instead uses rows
    ``neg_index[j]`` of the ``(B, M, d)`` pool ``negatives``.
    Returns a ``(B, Q)`` tensor. Evaluated in log space for stability.
    """
    if negatives.shape[-2] == 0:
        raise ValueError("negative bank is empty")
    if not (queries.shape[-1] == positives.shape[-1] == negatives.shape[-1]):
        raise ValueError("embedding dimensions differ between queries, positives and negatives")
    if queries.shape != positives.shape:
        raise ValueError("queries and positives must have the same shape")
    # a zero embedding (e.g. an all-zero feature column) gets cosine 0
    q = F.normalize(queries, dim=-1)
    k = F.normalize(positives, dim=-1)
    n = F.normalize(negatives, dim=-1)
    l_pos = (q * k).sum(-1, keepdim=True) / tau                    # B, Q, 1
    if neg_index is not None:
        pool = torch.einsum("bqd,bmd->bqm", q, n) / tau
        l_neg = pool.gather(2, neg_index.unsqueeze(0).expand(q.shape[0], -1, -1))
    elif n.dim() == q.dim():
        l_neg = torch.einsum("bqd,bnd->bqn", q, n) / tau           # B, Q, N
    else:
        l_neg = torch.einsum("bqd,bqnd->bqn", q, n) / tau
    logits = torch.cat([l_pos, l_neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - l_pos.squeeze(-1)


def adversarial_contrastive_loss(queries, positives, negatives, tau: float, neg_index=None):
    """Mean over queries (and batch) per tap, then mean over taps.

    Each argument is a list with one entry per tap (a bare tensor is treated as
    a single tap). ``neg_index`` is an optional per-tap list, see
    :func:`contrastive_terms`.
    """
    if torch.is_tensor(queries):
        queries, positives, negatives = [queries], [positives], [negatives]
        neg_index = None if neg_index is None else [neg_index]
    if not (len(queries) == len(positives) == len(negatives)) or not queries:
        raise ValueError("queries, positives and negatives need one entry per tap")
    if neg_index is None:
        neg_index = [None] * len(queries)
    per_tap = [contrastive_terms(q, k, n, tau, i).mean()
               for q, k, n, i in zip(queries, positives, negatives, neg_index)]
    return torch.stack(per_tap).mean()


def diversity_loss(neg_gen, mean_feat, v1, v2):
    """Negated mean absolute difference between negatives produced from two
    noise draws. Multi-tap outputs are averaged over taps."""
    if v1.shape != v2.shape:
        raise ValueError("noise vectors must have the same shape")
    a = neg_gen(mean_feat, v1)
    b = neg_gen(mean_feat, v2)
    if torch.is_tensor(a):
        a, b = [a], [b]
    return -torch.stack([(x - y).abs().mean() for x, y in zip(a, b)]).mean()


def tv_loss(img):
    """Anisotropic total variation, summed over pixels and channels."""
    dh = (img[..., :, 1:] - img[..., :, :-1]).abs()
    dv = (img[..., 1:, :] - img[..., :-1, :]).abs()
    total = dh.sum() + dv.sum()
    if img.dim() == 4:
        total = total / img.shape[0]
    return total


def dark_channel_torch(img, radius: int):
    """Differentiable dark channel for ``(B, C, H, W)`` or ``(C, H, W)`` input.

    Replicate padding reproduces the clamped-window minimum.
    """
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    m = x.min(dim=1, keepdim=True).values
    if radius > 0:
        m = F.pad(m, (radius,) * 4, mode="replicate")
        m = -F.max_pool2d(-m, kernel_size=2 * radius + 1, stride=1)
    m = m[:, 0]
    return m[0] if squeeze else m


def dark_channel_loss(img, radius: int = 7):
    return dark_channel_torch(img, radius).abs().mean()


def gan_loss(scores, target_is_real: bool):
    """Least-squares adversarial objective."""
    target = 1.0 if target_is_real else 0.0
    return ((scores - target) ** 2).mean()


def cycle_loss(a, b):
    return (a - b).abs().mean()


def encoder_objective(terms, w: LossWeights):
    """``ac + w.adv*adv + w.cycle*cycle + w.tv*tv + w.dc*dc``."""
    return (terms["ac"] + w.adv * terms["adv"] + w.cycle * terms["cycle"]
            + w.tv * terms["tv"] + w.dc * terms["dc"])


def negative_objective(ac, div, w: LossWeights):
    """``-ac + w.div*div``; minimizing it ascends the contrastive loss."""
    return -ac + w.div * div
