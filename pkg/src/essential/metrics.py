"""Evaluation quantities and session reports.

Distances between class-level probability distributions use the symmetric
KL form with epsilon smoothing; model uncertainty reuses the trajectory
module's entropy so the two stay numerically consistent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .trajectory import static_entropy

_EPS = 1e-8


def accuracy(predictions, labels) -> float:
    """Percentage of matching entries."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.size == 0 or preds.shape != labs.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    correct = int((preds == labs).sum())
    return 100.0 * correct / preds.size


def deltas(ours, baseline) -> tuple[float, float]:
    """(final, average) accuracy gaps, baseline minus ours.

    Negative values mean the baseline trails, matching the usual table sign
    convention.
    """
    ours = [float(v) for v in ours]
    base = [float(v) for v in baseline]
    if len(ours) != len(base) or not ours:
        raise ValueError("sequences must be equal-length and non-empty")
    d_final = base[-1] - ours[-1]
    d_average = float(np.mean(base) - np.mean(ours))
    return d_final, d_average


def _smooth(p: np.ndarray) -> np.ndarray:
    p = p + _EPS
    return p / p.sum()


def inter_class_distance(p_i, p_j) -> float:
    """Symmetric KL divergence between two class probability distributions."""
    p = np.asarray(p_i, dtype=np.float64)
    q = np.asarray(p_j, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("expected probability vectors of equal length")
    p, q = _smooth(p), _smooth(q)
    kl_pq = float((p * (np.log(p) - np.log(q))).sum())
    kl_qp = float((q * (np.log(q) - np.log(p))).sum())
    return 0.5 * (kl_pq + kl_qp)


def intra_class_distance(p_original, p_augmented) -> float:
    """Symmetric KL between a class's original and augmented distributions."""
    return inter_class_distance(p_original, p_augmented)


def model_uncertainty(epoch_probs) -> float:
    """Mean entropy over all samples' probability vectors."""
    rows = [np.asarray(p, dtype=np.float64) for p in epoch_probs]
    if not rows:
        raise ValueError("no probability vectors given")
    return float(np.mean([static_entropy(p) for p in rows]))


def misclassified_as_base(predictions, labels, base_classes) -> float:
    """Fraction of new-class samples predicted as one of the base classes."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    base = set(int(c) for c in base_classes)
    if preds.size == 0:
        raise ValueError("no new-class samples given")
    if any(int(v) in base for v in labs):
        raise ValueError("labels must all belong to new (non-base) classes")
    return float(np.mean([1.0 if int(p) in base else 0.0 for p in preds]))


def confusion_matrix(predictions, labels, classes) -> np.ndarray:
    """Rows are true classes, columns predicted, in the given class order."""
    index = {int(c): i for i, c in enumerate(classes)}
    mat = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, y in zip(np.asarray(predictions), np.asarray(labels)):
        mat[index[int(y)], index[int(p)]] += 1
    return mat


@dataclass
class SessionReport:
    """Everything measured at the end of one session."""

    session: int
    accuracies: list               # accuracy at sessions 0..t (cumulative test)
    classes: list                  # seen classes, ascending
    confusion: np.ndarray
    uncertainty_per_epoch: list
    inter_class: np.ndarray        # seen x seen symmetric-KL matrix
    intra_class: dict              # class -> distance
    misclassified_as_base_per_epoch: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.accuracies[-1]

    def validate(self, per_class_counts=None):
        mat = np.asarray(self.confusion)
        if per_class_counts is not None:
            if not np.array_equal(mat.sum(axis=1), np.asarray(per_class_counts)):
                raise RuntimeError("confusion rows do not match per-class test counts")
        total = mat.sum()
        if total:
            trace_acc = 100.0 * mat.trace() / total
            if abs(trace_acc - self.accuracy) > 1e-9:
                raise RuntimeError("confusion trace disagrees with accuracy")
        for frac in self.misclassified_as_base_per_epoch:
            if not 0.0 <= frac <= 1.0:
                raise RuntimeError("bias fraction outside [0, 1]")

    def mean_inter_class(self) -> float:
        m = np.asarray(self.inter_class)
        if m.shape[0] < 2:
            return 0.0
        iu = np.triu_indices(m.shape[0], k=1)
        return float(m[iu].mean())

    def mean_intra_class(self) -> float:
        return float(np.mean(list(self.intra_class.values())))

    # -- structured-text round trip ------------------------------------

    def to_json(self) -> str:
        payload = dict(
            session=self.session,
            accuracies=[float(a) for a in self.accuracies],
            classes=[int(c) for c in self.classes],
            confusion=np.asarray(self.confusion).tolist(),
            uncertainty_per_epoch=[float(u) for u in self.uncertainty_per_epoch],
            inter_class=np.asarray(self.inter_class).tolist(),
            intra_class={str(k): float(v) for k, v in self.intra_class.items()},
            misclassified_as_base_per_epoch=[
                float(v) for v in self.misclassified_as_base_per_epoch],
        )
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SessionReport":
        d = json.loads(text)
        return cls(
            session=d["session"],
            accuracies=d["accuracies"],
            classes=d["classes"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            uncertainty_per_epoch=d["uncertainty_per_epoch"],
            inter_class=np.asarray(d["inter_class"]),
            intra_class={int(k): v for k, v in d["intra_class"].items()},
            misclassified_as_base_per_epoch=d["misclassified_as_base_per_epoch"],
        )

    def to_text(self) -> str:
        lines = [f"session: {self.session}",
                 f"classes: {' '.join(str(c) for c in self.classes)}",
                 "accuracies: " + " ".join(f"{a:.2f}" for a in self.accuracies),
                 f"mean_intra_class: {self.mean_intra_class():.6f}",
                 f"mean_inter_class: {self.mean_inter_class():.6f}",
                 "confusion:"]
        for row in np.asarray(self.confusion):
            lines.append("  " + " ".join(f"{v:5d}" for v in row))
        lines.append("uncertainty_per_epoch: "
                     + " ".join(f"{u:.4f}" for u in self.uncertainty_per_epoch))
        if self.misclassified_as_base_per_epoch:
            lines.append("misclassified_as_base_per_epoch: "
                         + " ".join(f"{v:.4f}" for v in self.misclassified_as_base_per_epoch))
        return "\n".join(lines) + "\n"


# -- figure emitters ------------------------------------------------------

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_accuracy_curve(accuracy_sets: dict, path: str):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, accs in accuracy_sets.items():
        ax.plot(range(len(accs)), accs, marker="o", label=label)
    ax.set_xlabel("session")
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_uncertainty(per_session_curves: list, path: str):
    """Concatenated per-epoch uncertainty with session boundaries marked."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    offset = 0
    for t, curve in enumerate(per_session_curves):
        xs = range(offset, offset + len(curve))
        ax.plot(xs, curve, label=f"session {t}")
        offset += len(curve)
        if t < len(per_session_curves) - 1:
            ax.axvline(offset - 0.5, color="gray", lw=0.5, ls=":")
    ax.set_xlabel("epoch (all sessions)")
    ax.set_ylabel("model uncertainty (nats)")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(matrix, classes, path: str):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(np.asarray(matrix), cmap="Blues")
    ax.set_xticks(range(len(classes)), [str(c) for c in classes])
    ax.set_yticks(range(len(classes)), [str(c) for c in classes])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bias(per_session_fractions: list, path: str):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    offset = 0
    for t, curve in enumerate(per_session_fractions):
        if not curve:
            continue
        xs = range(offset, offset + len(curve))
        ax.plot(xs, curve, label=f"session {t}")
        offset += len(curve)
    ax.set_xlabel("epoch (incremental sessions)")
    ax.set_ylabel("new samples predicted as base")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(xs, ys, xlabel: str, path: str):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if all(isinstance(x, (int, float)) for x in xs):
        ax.plot(xs, ys, marker="o")
    else:
        ax.bar(range(len(xs)), ys)
        ax.set_xticks(range(len(xs)), [str(x) for x in xs], rotation=30, ha="right")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("final accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
