"""Prototype classification with cosine similarity and ablation baselines.

Prototypes are raw mean embeddings per class (all samples in the base
session, bank exemplars afterward). The cosine path normalizes both sides;
dot / euclidean / mahalanobis deliberately keep magnitudes so the classifier
bias they introduce stays observable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


def cosine_sim(x, y) -> float:
    """x.y / (|x| |y|), the angular similarity in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(x @ y / (nx * ny))


@dataclass
class MahalanobisStats:
    """Shrinkage-regularized diagonal covariance of training embeddings."""

    variances: np.ndarray | None = None
    shrinkage: float = 0.1

    def fit(self, embeddings: np.ndarray) -> "MahalanobisStats":
        emb = np.asarray(embeddings, dtype=np.float64)
        var = emb.var(axis=0)
        self.variances = (1.0 - self.shrinkage) * var + self.shrinkage * var.mean() + 1e-8
        return self

    @property
    def fitted(self) -> bool:
        return self.variances is not None

    def inverse_variances(self) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("mahalanobis stats not fitted")
        return 1.0 / self.variances


@dataclass
class PrototypeTable:
    """One raw mean-embedding prototype per seen class.

    source records whether the means came from all session samples (base
    session) or from bank exemplars (incremental sessions).
    """

    classes: list[int]
    prototypes: torch.Tensor        # (n_classes, D) raw means
    source: str = "all_samples"     # all_samples | exemplars
    eta: float = 16.0
    mah_stats: MahalanobisStats | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.classes) != self.prototypes.shape[0]:
            raise ValueError("one prototype per class required")
        if self.source not in ("all_samples", "exemplars"):
            raise ValueError(f"unknown prototype source {self.source!r}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def normalized(self) -> torch.Tensor:
        return F.normalize(self.prototypes, dim=-1, eps=1e-12)

    def class_index(self, c: int) -> int:
        return self.classes.index(c)


def build_prototype_table(class_embeddings: dict, source: str = "all_samples",
                          eta: float = 16.0, fit_mah: bool = False) -> PrototypeTable:
    """Raw mean embedding per class from a class -> vectors mapping."""
    if not class_embeddings:
        raise ValueError("no classes given")
    classes = sorted(class_embeddings)
    rows = []
    pooled = []
    for c in classes:
        vecs = torch.as_tensor(np.asarray(
            [np.asarray(v, dtype=np.float32) for v in class_embeddings[c]]))
        if vecs.ndim != 2 or vecs.shape[0] == 0:
            raise ValueError(f"class {c} has no embeddings")
        rows.append(vecs.mean(dim=0))
        pooled.append(vecs)
    stats = None
    if fit_mah:
        stats = MahalanobisStats().fit(torch.cat(pooled).numpy())
    return PrototypeTable(classes, torch.stack(rows), source, eta, stats)


def cosine_scores(embeddings: torch.Tensor, table: PrototypeTable) -> torch.Tensor:
    """(B, n_classes) cosine similarity of embeddings to every prototype."""
    if table.num_classes == 0:
        raise ValueError("prototype table is empty")
    emb = F.normalize(embeddings, dim=-1, eps=1e-12)
    return emb @ table.normalized().to(emb.dtype).T


def prototype_probabilities(embedding, table: PrototypeTable) -> np.ndarray:
    """Softmax over eta-sharpened cosine similarities to the prototypes."""
    emb = torch.as_tensor(np.asarray(embedding, dtype=np.float32))
    single = emb.ndim == 1
    if single:
        emb = emb.unsqueeze(0)
    probs = torch.softmax(table.eta * cosine_scores(emb, table), dim=-1).numpy()
    return probs[0] if single else probs


def prototype_probabilities_t(embeddings: torch.Tensor, table: PrototypeTable) -> torch.Tensor:
    """Differentiable batched version of prototype_probabilities."""
    return torch.softmax(table.eta * cosine_scores(embeddings, table), dim=-1)


def cosine_ce_loss(embeddings: torch.Tensor, labels, table: PrototypeTable) -> torch.Tensor:
    """Cross entropy on eta-sharpened cosine-prototype logits."""
    y = torch.as_tensor([int(v) for v in labels], dtype=torch.long,
                        device=embeddings.device)
    index_of = {c: i for i, c in enumerate(table.classes)}
    try:
        targets = torch.tensor([index_of[int(v)] for v in y], dtype=torch.long)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} has no prototype") from None
    logits = table.eta * cosine_scores(embeddings, table)
    return F.cross_entropy(logits, targets)


def joint_loss(ce, scl, alpha: float):
    """Classification loss plus alpha-weighted contrastive loss."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return ce + alpha * scl


def baseline_similarity(x, y, kind: str, stats: MahalanobisStats | None = None) -> float:
    """Ablation similarity score (higher = more similar).

    dot keeps magnitudes, euc is the negated euclidean distance, mah is the
    negated mahalanobis distance under a fitted diagonal covariance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if kind == "dot":
        return float(x @ y)
    if kind == "euc":
        return float(-np.linalg.norm(x - y))
    if kind == "mah":
        if stats is None or not stats.fitted:
            raise RuntimeError("mahalanobis similarity needs fitted stats")
        d = x - y
        return float(-np.sqrt((d * d * stats.inverse_variances()).sum()))
    raise ValueError(f"unknown similarity kind {kind!r}")


def similarity_scores(embeddings: torch.Tensor, table: PrototypeTable,
                      kind: str = "cos") -> torch.Tensor:
    """(B, n_classes) scores under the configured similarity kind."""
    if kind == "cos":
        return cosine_scores(embeddings, table)
    protos = table.prototypes.to(embeddings.dtype)
    if kind == "dot":
        return embeddings @ protos.T
    diff = embeddings.unsqueeze(1) - protos.unsqueeze(0)
    if kind == "euc":
        return -diff.norm(dim=-1)
    if kind == "mah":
        if table.mah_stats is None or not table.mah_stats.fitted:
            raise RuntimeError("mahalanobis similarity needs fitted stats")
        inv = torch.as_tensor(table.mah_stats.inverse_variances(),
                              dtype=embeddings.dtype)
        return -torch.sqrt(((diff ** 2) * inv).sum(dim=-1).clamp_min(0))
    raise ValueError(f"unknown similarity kind {kind!r}")


def predict(embeddings: torch.Tensor, table: PrototypeTable, kind: str = "cos") -> np.ndarray:
    """Class prediction per row; ties resolve to the lowest class index."""
    scores = similarity_scores(embeddings, table, kind)
    idx = scores.argmax(dim=1).cpu().numpy()
    return np.array([table.classes[i] for i in idx])
