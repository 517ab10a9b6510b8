"""Per-sample entropy trajectories over training epochs.

Probabilities are the classifier's post-softmax outputs captured once per
epoch; entropies use the natural logarithm throughout, so every value lives
in [0, ln C] and sums/averages stay in nats.
"""

from __future__ import annotations

import numpy as np

_SUM_TOL = 1e-4


def _validate_prob_vector(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be 1-D and non-empty")
    if np.any(p < 0):
        raise ValueError("probability vector has a negative entry")
    total = float(p.sum())
    if not (1.0 - _SUM_TOL <= total <= 1.0 + _SUM_TOL):
        raise ValueError(f"probability vector sums to {total}, expected 1")
    return p


def static_entropy(p) -> float:
    """Shannon entropy -sum p ln p in nats, with 0 ln 0 taken as 0."""
    p = _validate_prob_vector(p)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


class EntropyTrajectory:
    """Sequence of per-epoch class-probability vectors for one sample."""

    def __init__(self, sample_id: int, probs_per_epoch=None):
        self.sample_id = sample_id
        self.probs_per_epoch: list[np.ndarray] = []
        if probs_per_epoch is not None:
            for p in probs_per_epoch:
                self.append(p)

    def append(self, p):
        p = _validate_prob_vector(p)
        if self.probs_per_epoch and p.size != self.probs_per_epoch[0].size:
            raise ValueError(
                f"epoch vector length {p.size} does not match earlier epochs "
                f"({self.probs_per_epoch[0].size})"
            )
        self.probs_per_epoch.append(p)

    def __len__(self):
        return len(self.probs_per_epoch)

    @property
    def entropies(self) -> np.ndarray:
        return np.array([static_entropy(p) for p in self.probs_per_epoch])


def cumulative_entropy_sum(traj: EntropyTrajectory) -> float:
    """Sum of the per-epoch entropies over the whole recorded trajectory."""
    if len(traj) == 0:
        raise ValueError("trajectory has no recorded epochs")
    return float(traj.entropies.sum())


def cumulative_entropy_trapezoid(traj: EntropyTrajectory, dt: float = 1.0) -> float:
    """Trapezoid-rule area under the entropy curve with epoch spacing dt."""
    if len(traj) < 2:
        raise ValueError("trapezoid form needs at least 2 recorded epochs")
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = traj.entropies
    return float(((h[:-1] + h[1:]) / 2.0 * dt).sum())


def average_cumulative_entropy(traj: EntropyTrajectory) -> float:
    """Cumulative entropy divided by the number of recorded epochs."""
    if len(traj) == 0:
        raise ValueError("trajectory has no recorded epochs")
    return cumulative_entropy_sum(traj) / len(traj)


class TrajectoryStore:
    """sample_id -> EntropyTrajectory, filled one epoch at a time.

    Single writer per epoch; reads between epochs are safe.
    """

    def __init__(self):
        self.trajectories: dict[int, EntropyTrajectory] = {}

    def __len__(self):
        return len(self.trajectories)

    def __contains__(self, sample_id):
        return sample_id in self.trajectories

    def get(self, sample_id: int) -> EntropyTrajectory:
        return self.trajectories[sample_id]

    def scores(self, mode: str = "sum") -> dict[int, float]:
        """Selection score per sample: average cumulative entropy ('sum'
        mode) or the trapezoid area ('trapezoid' mode)."""
        if mode == "sum":
            return {i: average_cumulative_entropy(t) for i, t in self.trajectories.items()}
        if mode == "trapezoid":
            return {i: cumulative_entropy_trapezoid(t) for i, t in self.trajectories.items()}
        raise ValueError(f"unknown cumulative-entropy mode {mode!r}")

    def average_scores(self) -> dict[int, float]:
        return self.scores("sum")

    def num_epochs(self) -> int:
        if not self.trajectories:
            return 0
        return max(len(t) for t in self.trajectories.values())

    def uncertainty_per_epoch(self) -> list[float]:
        """Mean entropy over all samples recorded at each epoch."""
        out = []
        for e in range(self.num_epochs()):
            vals = [t.entropies[e] for t in self.trajectories.values() if len(t) > e]
            out.append(float(np.mean(vals)))
        return out

    def save(self, path: str):
        """Columnar text dump: sample_id epoch p_1 .. p_C per line."""
        with open(path, "w") as fh:
            fh.write("# sample_id epoch p_1..p_C\n")
            for sid in sorted(self.trajectories):
                for epoch, p in enumerate(self.trajectories[sid].probs_per_epoch, start=1):
                    cols = " ".join(repr(float(v)) for v in p)
                    fh.write(f"{sid} {epoch} {cols}\n")

    @classmethod
    def load(cls, path: str) -> "TrajectoryStore":
        store = cls()
        with open(path) as fh:
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split()
                sid = int(parts[0])
                p = np.array([float(v) for v in parts[2:]])
                if sid not in store.trajectories:
                    store.trajectories[sid] = EntropyTrajectory(sid)
                store.trajectories[sid].append(p)
        return store


def record_epoch(store: TrajectoryStore, epoch_probs: dict) -> TrajectoryStore:
    """Append one epoch of probabilities; new sample ids grow the store."""
    validated = {sid: _validate_prob_vector(p) for sid, p in epoch_probs.items()}
    for sid, p in validated.items():
        traj = store.trajectories.get(sid)
        if traj is None:
            traj = store.trajectories[sid] = EntropyTrajectory(sid)
        traj.append(p)
    return store
