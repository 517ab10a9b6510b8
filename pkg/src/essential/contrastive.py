"""Momentum-paired supervised contrastive learning.

The key network trails the query network through an exponential-moving
average of parameters; keys and their labels go through synchronized FIFO
queues so the loss sees a larger contrast pool than one batch.
"""

from __future__ import annotations

import torch

_NORM_TOL = 1e-4


class MomentumPair:
    """Query/key module pair with momentum coefficient mu.

    update() applies theta_k <- mu * theta_k + (1 - mu) * theta_q to every
    parameter and floating-point buffer; integer buffers are copied.
    """

    def __init__(self, query, key, mu: float):
        if not 0.0 < mu < 1.0:
            raise ValueError("mu must satisfy 0 < mu < 1")
        self.query = query
        self.key = key
        self.mu = mu
        self._check_shapes()

    def _check_shapes(self):
        q = list(self.query.parameters())
        k = list(self.key.parameters())
        if len(q) != len(k) or any(a.shape != b.shape for a, b in zip(q, k)):
            raise RuntimeError("query and key parameter shapes do not match")

    @torch.no_grad()
    def update(self):
        for pq, pk in zip(self.query.parameters(), self.key.parameters()):
            if pq.shape != pk.shape:
                raise RuntimeError("query and key parameter shapes do not match")
            pk.mul_(self.mu).add_(pq, alpha=1.0 - self.mu)
        for bq, bk in zip(self.query.buffers(), self.key.buffers()):
            if bk.dtype.is_floating_point:
                bk.mul_(self.mu).add_(bq, alpha=1.0 - self.mu)
            else:
                bk.copy_(bq)


def momentum_update(pair: MomentumPair) -> MomentumPair:
    """One EMA step of the key parameters toward the query parameters."""
    pair.update()
    return pair


class FeatureQueue:
    """Synchronized FIFO rings of unit-norm features and their labels."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._features: list[torch.Tensor] = []
        self._labels: list[int] = []

    def __len__(self):
        return len(self._features)

    def clear(self):
        self._features.clear()
        self._labels.clear()

    def enqueue(self, features: torch.Tensor, labels):
        feats = features.detach()
        labels = [int(v) for v in labels]
        if feats.shape[0] != len(labels):
            raise ValueError("feature and label counts do not match")
        if feats.shape[0] and bool((feats.norm(dim=-1) - 1.0).abs().max() > _NORM_TOL):
            raise ValueError("queue features must be unit-norm")
        for row, lab in zip(feats, labels):
            self._features.append(row.clone())
            self._labels.append(lab)
        excess = len(self._features) - self.capacity
        if excess > 0:
            del self._features[:excess]
            del self._labels[:excess]

    def snapshot(self):
        """(features, labels) tensors in FIFO order; empty tensors if empty."""
        if not self._features:
            return torch.empty(0, 0), torch.empty(0, dtype=torch.long)
        return torch.stack(self._features), torch.tensor(self._labels, dtype=torch.long)


def scl_loss(query_features: torch.Tensor, query_labels, key_features: torch.Tensor,
             key_labels, queue: FeatureQueue | None = None, tau: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss of queries against keys plus queue.

    For each query, positives are the same-label entries of the contrast
    pool (keys and queued keys) and the denominator runs over the whole
    pool. Queries without positives are excluded from the average.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    q_labels = torch.as_tensor(
        [int(v) for v in query_labels], dtype=torch.long, device=query_features.device)
    pool = key_features
    pool_labels = torch.as_tensor(
        [int(v) for v in key_labels], dtype=torch.long, device=query_features.device)
    if queue is not None and len(queue) > 0:
        q_feats, q_labs = queue.snapshot()
        pool = torch.cat([pool, q_feats.to(query_features.dtype)], dim=0)
        pool_labels = torch.cat([pool_labels, q_labs])
    if pool.shape[0] == 0:
        raise ValueError("contrast pool is empty (no keys and empty queue)")

    logits = query_features @ pool.detach().T / tau            # (Nq, Na)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    positives = (q_labels.unsqueeze(1) == pool_labels.unsqueeze(0))
    counts = positives.sum(dim=1)
    has_pos = counts > 0
    if not bool(has_pos.any()):
        return query_features.sum() * 0.0
    per_query = -(log_prob * positives).sum(dim=1) / counts.clamp(min=1)
    return per_query[has_pos].mean()


def scl_loss_expanded(query_features, class_labels, transform_indices,
                      key_features, key_class_labels, key_transform_indices,
                      queue: FeatureQueue | None, tau: float, num_transforms: int) -> torch.Tensor:
    """Refined SCL over transformed views.

    Positives are entries with the same (class, transformation) pair; the
    pair is folded into one virtual label so the plain loss applies. With a
    single transformation this is exactly scl_loss.
    """
    M = int(num_transforms)
    if M < 1:
        raise ValueError("num_transforms must be >= 1")

    def _virtual(cls, tr):
        cls = torch.as_tensor([int(v) for v in cls], dtype=torch.long)
        tr = torch.as_tensor([int(v) for v in tr], dtype=torch.long)
        if tr.numel() and (tr.min() < 0 or tr.max() >= M):
            raise ValueError(f"transform index outside 0..{M - 1}")
        return cls * M + tr

    return scl_loss(query_features, _virtual(class_labels, transform_indices),
                    key_features, _virtual(key_class_labels, key_transform_indices),
                    queue, tau)
