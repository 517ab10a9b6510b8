"""Auxiliary head that predicts a sample's uncertainty trajectory.

The head taps the backbone's stage outputs (detached, so it never perturbs
the main task), reduces each stage to a fixed width, and fuses them into a
class-probability vector. Collected over the epochs of a session, those
vectors form the predicted probability matrix whose per-row entropies give
the predicted average cumulative entropy used to rank exemplar candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .trajectory import EntropyTrajectory, TrajectoryStore, static_entropy

_EPS = 1e-12


class PredictorHead(nn.Module):
    """Per-stage pooling + affine reduction, concatenation, affine fusion.

    The fusion layer is zero-initialized so an untrained head outputs the
    uniform distribution (maximum entropy), a neutral starting rank.
    """

    def __init__(self, stage_channels, total_classes: int, reduce_dim: int = 128):
        super().__init__()
        self.taps = nn.ModuleList(nn.Linear(c, reduce_dim) for c in stage_channels)
        self.fusion = nn.Linear(reduce_dim * len(stage_channels), total_classes)
        nn.init.zeros_(self.fusion.weight)
        nn.init.zeros_(self.fusion.bias)

    def forward(self, stage_features, num_seen_classes: int | None = None) -> torch.Tensor:
        if len(stage_features) != len(self.taps):
            raise ValueError(
                f"expected {len(self.taps)} stage features, got {len(stage_features)}")
        reduced = []
        for tap, feat in zip(self.taps, stage_features):
            if feat.ndim == 4:
                feat = feat.mean(dim=(2, 3))
            elif feat.ndim != 2:
                raise ValueError("stage features must be (B, C) or (B, C, H, W)")
            reduced.append(F.relu(tap(feat)))
        logits = self.fusion(torch.cat(reduced, dim=1))
        if num_seen_classes is not None:
            logits = logits[:, :num_seen_classes]
        return torch.softmax(logits, dim=-1)


def predict_distribution(head: PredictorHead, multiscale_features,
                         num_seen_classes: int | None = None) -> np.ndarray:
    """Probability vector(s) predicted from one sample's stage features."""
    with torch.no_grad():
        probs = head(multiscale_features, num_seen_classes)
    return probs.numpy()


def js_divergence(a, b) -> float:
    """Jensen-Shannon divergence in nats; symmetric, bounded by ln 2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("expected two probability vectors of equal length")
    m = (a + b) / 2.0

    def _kl(p, q):
        mask = p > 0
        return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())

    return 0.5 * (_kl(a, m) + _kl(b, m))


def js_divergence_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable row-wise JS divergence for (B, C) tensors."""
    if a.shape != b.shape:
        raise ValueError("expected matching probability tensors")
    m = (a + b) / 2.0
    log_m = torch.log(m.clamp_min(_EPS))

    def _kl(p):
        return (p * (torch.log(p.clamp_min(_EPS)) - log_m)).sum(dim=-1)

    return 0.5 * (_kl(a) + _kl(b))


@dataclass
class PredictedTrajectory:
    """Predicted per-epoch probability rows for one sample."""

    sample_id: int
    probs_per_epoch: list = field(default_factory=list)

    def append(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.probs_per_epoch and p.size != self.probs_per_epoch[0].size:
            raise ValueError("predicted row length changed between epochs")
        self.probs_per_epoch.append(p)

    def __len__(self):
        return len(self.probs_per_epoch)

    @property
    def predicted_average_ce(self) -> float:
        if not self.probs_per_epoch:
            raise ValueError("no predicted epochs recorded")
        return float(np.mean([static_entropy(p) for p in self.probs_per_epoch]))


class PredictedTrajectoryStore:
    """sample_id -> PredictedTrajectory, mirroring the true-trajectory store."""

    def __init__(self):
        self.trajectories: dict[int, PredictedTrajectory] = {}

    def record_epoch(self, epoch_probs: dict):
        for sid, p in epoch_probs.items():
            traj = self.trajectories.get(sid)
            if traj is None:
                traj = self.trajectories[sid] = PredictedTrajectory(sid)
            traj.append(p)

    def predicted_scores(self) -> dict[int, float]:
        return {i: t.predicted_average_ce for i, t in self.trajectories.items()}

    def save(self, path: str, true_scores: dict | None = None):
        with open(path, "w") as fh:
            fh.write("# sample_id predicted_average_ce true_average_ce\n")
            for sid in sorted(self.trajectories):
                true = "" if not true_scores or sid not in true_scores \
                    else f" {repr(true_scores[sid])}"
                fh.write(f"{sid} {repr(self.trajectories[sid].predicted_average_ce)}{true}\n")


def prediction_loss(true_traj: EntropyTrajectory, pred_traj: PredictedTrajectory,
                    ce_loss: float, beta: float) -> float:
    """Classification loss plus beta times the epoch-averaged JS divergence
    between the true and predicted per-epoch distributions."""
    if len(true_traj) != len(pred_traj):
        raise ValueError(
            f"trajectories cover {len(true_traj)} vs {len(pred_traj)} epochs")
    if len(true_traj) == 0:
        raise ValueError("trajectories are empty")
    js = np.mean([js_divergence(t, p) for t, p in
                  zip(true_traj.probs_per_epoch, pred_traj.probs_per_epoch)])
    return float(ce_loss + beta * js)


def reevaluate_top(ranked_candidates, k: int, store: TrajectoryStore) -> dict[int, float]:
    """True average cumulative entropy for the k best-ranked candidates.

    ranked_candidates must already be ordered by predicted score (best
    first); the truth comes from the recorded trajectory store.
    """
    ranked = list(ranked_candidates)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds {len(ranked)} candidates")
    scores = store.average_scores()
    return {sid: scores[sid] for sid in ranked[:k]}
