"""Fixed-budget exemplar bank and its selection strategies.

The budget is split evenly over the seen classes (remainder to the lowest
class indices). New classes are filled by the configured selector; old
classes shrink by keeping their highest-scoring stored ids, so no raw
old-session data is ever re-scored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .trajectory import static_entropy


@dataclass
class Selection:
    """Per-class chosen ids with their selection scores (higher = keep)."""

    selector: str
    by_class: dict = field(default_factory=dict)    # class -> list of ids
    scores: dict = field(default_factory=dict)      # id -> score

    def all_ids(self) -> list[int]:
        return [i for ids in self.by_class.values() for i in ids]


@dataclass
class MemoryBank:
    budget: int
    entries: dict = field(default_factory=dict)     # class -> list of ids
    provenance: dict = field(default_factory=dict)  # id -> (selector, score)

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("memory budget must be positive")

    def total(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def all_ids(self) -> list[int]:
        return [i for ids in self.entries.values() for i in ids]

    def validate(self):
        ids = self.all_ids()
        if len(ids) != len(set(ids)):
            raise RuntimeError("memory bank holds duplicate ids")
        if self.total() > self.budget:
            raise RuntimeError(
                f"memory bank holds {self.total()} ids, budget is {self.budget}")

    def save_manifest(self, path: str):
        with open(path, "w") as fh:
            fh.write("# class\tid\tselector\tscore\n")
            for c in sorted(self.entries):
                for sid in self.entries[c]:
                    sel, score = self.provenance.get(sid, ("?", float("nan")))
                    fh.write(f"{c}\t{sid}\t{sel}\t{repr(float(score))}\n")


def quota(budget: int, num_seen_classes: int) -> list[int]:
    """Per-class slots: floor split, remainder to the lowest class indices."""
    if num_seen_classes < 1:
        raise ValueError("need at least one seen class")
    base, remainder = divmod(budget, num_seen_classes)
    return [base + (1 if i < remainder else 0) for i in range(num_seen_classes)]


def _group_by_class(ids, class_of) -> dict:
    groups: dict = {}
    for sid in sorted(ids):
        groups.setdefault(class_of[sid], []).append(sid)
    return groups


def _take_quota(cls, ordered_ids, want: int):
    if want > len(ordered_ids):
        warnings.warn(
            f"class {cls}: quota {want} exceeds population {len(ordered_ids)}; "
            "taking all available")
        want = len(ordered_ids)
    return ordered_ids[:want]


def select_uta(scores: dict, class_of: dict, quotas: dict) -> Selection:
    """Highest average-cumulative-entropy ids per class, ties by lowest id."""
    missing = [sid for sid in scores if sid not in class_of]
    if missing:
        raise ValueError(f"scored samples without a class: {missing[:5]}")
    sel = Selection("uta", scores=dict(scores))
    groups = _group_by_class(scores.keys(), class_of)
    for cls, ids in sorted(groups.items()):
        ordered = sorted(ids, key=lambda i: (-scores[i], i))
        sel.by_class[cls] = _take_quota(cls, ordered, quotas.get(cls, 0))
    return sel


def select_random(ids, class_of: dict, quotas: dict, seed: int) -> Selection:
    """Uniform without replacement per class under the given seed."""
    rng = np.random.default_rng(seed)
    sel = Selection("random")
    groups = _group_by_class(ids, class_of)
    for cls, members in sorted(groups.items()):
        ranks = rng.permutation(len(members))
        ordered = [members[i] for i in np.argsort(ranks)]
        chosen = _take_quota(cls, ordered, quotas.get(cls, 0))
        sel.by_class[cls] = sorted(chosen)
        # score = random priority, so later truncation stays random but seeded
        for sid, r in zip(ordered, range(len(ordered), 0, -1)):
            if sid in chosen:
                sel.scores[sid] = float(r)
    return sel


def select_nme(embeddings: dict, class_of: dict, quotas: dict) -> Selection:
    """Herding-style greedy pick keeping the running mean near the class mean."""
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) > 1:
        raise ValueError("embeddings must share one dimension")
    sel = Selection("nme")
    groups = _group_by_class(embeddings.keys(), class_of)
    for cls, ids in sorted(groups.items()):
        if not ids:
            warnings.warn(f"class {cls} empty; skipped")
            continue
        want = min(quotas.get(cls, 0), len(ids))
        if quotas.get(cls, 0) > len(ids):
            warnings.warn(
                f"class {cls}: quota {quotas[cls]} exceeds population {len(ids)}; "
                "taking all available")
        target = np.mean([embeddings[i] for i in ids], axis=0)
        chosen: list[int] = []
        remaining = list(ids)
        while len(chosen) < want:
            best_id, best_d = None, None
            for sid in remaining:
                trial = np.mean([embeddings[i] for i in chosen + [sid]], axis=0)
                d = _cosine_distance(trial, target)
                if best_d is None or d < best_d:
                    best_id, best_d = sid, d
            chosen.append(best_id)
            remaining.remove(best_id)
        sel.by_class[cls] = chosen
        for rank, sid in enumerate(chosen):
            sel.scores[sid] = float(len(chosen) - rank)
    return sel


def _cosine_distance(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - (a @ b) / (na * nb))


def select_pool(probs: dict, class_of: dict, quotas: dict) -> Selection:
    """Smallest top1-top2 margin first (pool-based uncertainty sampling)."""
    sel = Selection("pool")
    margins = {}
    for sid, p in probs.items():
        p = np.asarray(p, dtype=np.float64)
        if p.size < 2:
            raise ValueError("margin sampling needs at least 2 classes")
        top2 = np.sort(p)[-2:]
        margins[sid] = float(top2[1] - top2[0])
    groups = _group_by_class(probs.keys(), class_of)
    for cls, ids in sorted(groups.items()):
        ordered = sorted(ids, key=lambda i: (margins[i], i))
        sel.by_class[cls] = _take_quota(cls, ordered, quotas.get(cls, 0))
    for sid, m in margins.items():
        sel.scores[sid] = -m
    return sel


def select_committee(member_probs, class_of: dict, quotas: dict) -> Selection:
    """Highest vote entropy over the members' argmax predictions first."""
    members = list(member_probs)
    if len(members) < 2:
        raise ValueError("committee needs at least 2 members")
    ids = set(members[0])
    if any(set(m) != ids for m in members[1:]):
        raise ValueError("committee members cover different sample sets")
    vote_entropy = {}
    for sid in ids:
        votes = [int(np.argmax(m[sid])) for m in members]
        _, counts = np.unique(votes, return_counts=True)
        vote_entropy[sid] = static_entropy(counts / counts.sum())
    sel = Selection("committee", scores=dict(vote_entropy))
    groups = _group_by_class(ids, class_of)
    for cls, members_ids in sorted(groups.items()):
        ordered = sorted(members_ids, key=lambda i: (-vote_entropy[i], i))
        sel.by_class[cls] = _take_quota(cls, ordered, quotas.get(cls, 0))
    return sel


def update_bank(bank: MemoryBank, selection: Selection, num_seen_classes: int) -> MemoryBank:
    """New bank with old classes re-truncated and new-class slots filled.

    Old classes keep their highest provenance scores under the shrunk quota;
    classes present in the selection are replaced by it.
    """
    quotas = quota(bank.budget, num_seen_classes)
    classes = sorted(set(bank.entries) | set(selection.by_class))
    new_entries: dict = {}
    new_prov: dict = {}
    for cls in classes:
        if cls >= num_seen_classes:
            raise ValueError(
                f"class {cls} stored/selected but only {num_seen_classes} classes seen")
        q = quotas[cls]
        if cls in selection.by_class:
            kept = list(selection.by_class[cls])[:q]
            for sid in kept:
                new_prov[sid] = (selection.selector,
                                 float(selection.scores.get(sid, float("nan"))))
        else:
            stored = bank.entries[cls]
            ordered = sorted(stored, key=lambda i: (-bank.provenance[i][1], i))
            kept = ordered[:q]
            for sid in kept:
                new_prov[sid] = bank.provenance[sid]
        new_entries[cls] = kept
    out = MemoryBank(bank.budget, new_entries, new_prov)
    out.validate()
    return out
