"""Fine-grained semantic expansion.

A transformation bank turns each sample into M deterministic views (the
first view is always the untouched input). Virtual prototypes are kept per
(class, transformation) cell, prediction aggregates similarity over all M
views, and the multi-task loss adds a transformation-classification term on
top of the class term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import Sample

# channel permutations expressed as source indices per output channel
_IDENT = (0, 1, 2)
_CYCLIC3 = ((0, 1, 2), (1, 2, 0), (2, 0, 1))
_ALL_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


def _variant_table(name: str):
    """List of (rotation quarter-turns, channel permutation) per view."""
    if name == "none":
        return [(0, _IDENT)]
    if name == "rotation":
        return [(k, _IDENT) for k in (0, 1, 2, 3)]
    if name == "rotation2":
        return [(k, _IDENT) for k in (0, 2)]
    if name == "color_perm":
        return [(0, p) for p in _ALL_PERMS]
    if name == "color_perm3":
        return [(0, p) for p in _CYCLIC3]
    if name == "rot_color_perm6":
        return [(k, p) for k in (0, 2) for p in _CYCLIC3]
    if name == "rot_color_perm12":
        return [(k, p) for k in (0, 1, 2, 3) for p in _CYCLIC3]
    raise ValueError(f"unknown expansion variant {name!r}")


@dataclass(frozen=True)
class TransformationBank:
    """Named, ordered set of deterministic resolution-preserving transforms."""

    variant: str
    transforms: tuple

    @classmethod
    def for_variant(cls, variant: str) -> "TransformationBank":
        return cls(variant, tuple(_variant_table(variant)))

    @property
    def M(self) -> int:
        return len(self.transforms)

    @property
    def needs_color(self) -> bool:
        return any(perm != _IDENT for _, perm in self.transforms)

    @property
    def needs_square(self) -> bool:
        # only quarter turns change the image shape
        return any(k % 2 == 1 for k, _ in self.transforms)

    def apply_batch(self, images: torch.Tensor, m: int) -> torch.Tensor:
        """Apply view m to a B x C x H x W tensor."""
        k, perm = self.transforms[m]
        out = images
        if k % 4 != 0:
            out = torch.rot90(out, k=k, dims=(2, 3))
        if perm != _IDENT:
            out = out[:, list(perm), :, :]
        return out


def expand(sample, bank: TransformationBank) -> list[np.ndarray]:
    """All M transformed copies of one H x W x C image; view 0 is the input."""
    image = sample.image if isinstance(sample, Sample) else np.asarray(sample)
    if image.ndim != 3:
        raise ValueError("expected an H x W x C image")
    if bank.needs_color and image.shape[2] != 3:
        raise ValueError(
            f"variant {bank.variant!r} permutes color channels and needs 3, "
            f"got {image.shape[2]}"
        )
    if bank.needs_square and image.shape[0] != image.shape[1]:
        raise ValueError("quarter-turn rotations need square images")
    views = []
    for k, perm in bank.transforms:
        view = image
        if k % 4 != 0:
            view = np.rot90(view, k=k, axes=(0, 1))
        if perm != _IDENT:
            view = view[:, :, list(perm)]
        views.append(np.ascontiguousarray(view))
    return views


@dataclass
class ExpandedPrototypeSet:
    """Unit-norm prototype per (class, transformation) cell.

    prototypes is (n_classes, M, D) with every row L2-normalized; norms keeps
    the pre-normalization magnitudes so magnitude-sensitive similarity kinds
    (dot, euclidean, mahalanobis) can recover the raw mean embeddings.
    """

    classes: list[int]
    prototypes: torch.Tensor
    norms: torch.Tensor
    session: int = 0

    @property
    def M(self) -> int:
        return self.prototypes.shape[1]

    def raw(self) -> torch.Tensor:
        return self.prototypes * self.norms.unsqueeze(-1)

    def class_index(self, c: int) -> int:
        return self.classes.index(c)


def build_virtual_prototypes(cell_embeddings: dict, session: int = 0) -> ExpandedPrototypeSet:
    """Normalized mean embedding per (class, transformation) cell.

    cell_embeddings maps (class, m) to a sequence of embedding vectors; every
    cell of the full classes x M grid must be non-empty.
    """
    if not cell_embeddings:
        raise ValueError("no embedding cells given")
    classes = sorted({c for c, _ in cell_embeddings})
    M = max(m for _, m in cell_embeddings) + 1
    dim = None
    rows = []
    norms = []
    for c in classes:
        c_rows, c_norms = [], []
        for m in range(M):
            if (c, m) not in cell_embeddings:
                raise ValueError(f"empty prototype cell (class={c}, m={m})")
            vecs = torch.as_tensor(np.asarray(
                [np.asarray(v, dtype=np.float32) for v in cell_embeddings[(c, m)]]))
            if vecs.ndim != 2 or vecs.shape[0] == 0:
                raise ValueError(f"empty prototype cell (class={c}, m={m})")
            if dim is None:
                dim = vecs.shape[1]
            elif vecs.shape[1] != dim:
                raise ValueError("embedding dimensions disagree across cells")
            mean = vecs.mean(dim=0)
            norm = mean.norm()
            if norm < 1e-8:
                raise ValueError(
                    f"degenerate prototype: cell (class={c}, m={m}) has zero mean")
            c_rows.append(mean / norm)
            c_norms.append(norm)
        rows.append(torch.stack(c_rows))
        norms.append(torch.stack(c_norms))
    return ExpandedPrototypeSet(classes, torch.stack(rows), torch.stack(norms), session)


def _similarity_grid(features: torch.Tensor, protos: ExpandedPrototypeSet,
                     kind: str = "cos", stats=None) -> torch.Tensor:
    """(B, n_classes, M) similarity of per-view features to each cell.

    features is (B, M, D). Cosine uses the stored unit prototypes; the other
    kinds compare against the raw mean prototypes.
    """
    if features.shape[1] != protos.M:
        raise ValueError(f"feature views {features.shape[1]} != bank M {protos.M}")
    if kind == "cos":
        f = F.normalize(features, dim=-1, eps=1e-12)
        return torch.einsum("bmd,cmd->bcm", f, protos.prototypes.to(f.dtype))
    raw = protos.raw().to(features.dtype)
    if kind == "dot":
        return torch.einsum("bmd,cmd->bcm", features, raw)
    diff = features.unsqueeze(1) - raw.unsqueeze(0)  # (B, C, M, D)
    if kind == "euc":
        return -diff.norm(dim=-1)
    if kind == "mah":
        if stats is None:
            raise RuntimeError("mahalanobis similarity needs fitted covariance stats")
        inv_var = torch.as_tensor(stats.inverse_variances(), dtype=features.dtype)
        return -torch.sqrt(((diff ** 2) * inv_var).sum(dim=-1).clamp_min(0))
    raise ValueError(f"unknown similarity kind {kind!r}")


def expanded_scores(features: torch.Tensor, protos: ExpandedPrototypeSet,
                    kind: str = "cos", stats=None) -> torch.Tensor:
    """Per-class score: similarity summed over the M transformed views."""
    return _similarity_grid(features, protos, kind, stats).sum(dim=-1)


def expanded_predict_batch(features: torch.Tensor, protos: ExpandedPrototypeSet,
                           kind: str = "cos", stats=None) -> np.ndarray:
    """Predicted class index per sample; ties resolve to the lowest class."""
    scores = expanded_scores(features, protos, kind, stats)
    idx = scores.argmax(dim=1).cpu().numpy()
    return np.array([protos.classes[i] for i in idx])


def expanded_predict(sample, bank: TransformationBank, protos: ExpandedPrototypeSet,
                     backbone, kind: str = "cos", stats=None) -> int:
    """Classify one sample by total similarity over its transformed views."""
    from .networks import images_to_tensor

    views = expand(sample, bank)
    batch = images_to_tensor(np.stack(views))
    with torch.no_grad():
        emb = backbone(batch)
    return int(expanded_predict_batch(emb.unsqueeze(0).reshape(1, bank.M, -1),
                                      protos, kind, stats)[0])


def multitask_loss(embeddings: torch.Tensor, class_labels: torch.Tensor,
                   transform_indices: torch.Tensor, class_head, transform_head,
                   num_seen_classes: int) -> torch.Tensor:
    """Mean over samples of (1/M) sum_j [CE(class view j) + CE(transform j)].

    embeddings holds the flattened views (N, D) with one class label and one
    transformation index per view; with all M views present per sample the
    per-view mean equals the per-sample (1/M) sum followed by a batch mean.
    """
    M = transform_head.out_features
    if embeddings.ndim != 2:
        raise ValueError("expected flattened view embeddings (N, D)")
    if transform_indices.min() < 0 or transform_indices.max() >= M:
        raise ValueError(f"transform index outside 0..{M - 1}")
    if class_labels.min() < 0 or class_labels.max() >= num_seen_classes:
        raise ValueError("class label outside the seen range")
    class_logits = class_head(embeddings)[:, :num_seen_classes]
    transform_logits = transform_head(embeddings)
    return (F.cross_entropy(class_logits, class_labels)
            + F.cross_entropy(transform_logits, transform_indices))
