import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from essential.memory import (
    MemoryBank, Selection, quota, select_committee, select_nme, select_pool,
    select_random, select_uta, update_bank)


def quota_oracle(budget, n):
    """Deal the budget one slot at a time, cycling ascending class indices."""
    counts = [0] * n
    for i in range(budget):
        counts[i % n] += 1
    return counts


class TestQuota:
    def test_200_over_9(self):
        q = quota(200, 9)
        assert q == quota_oracle(200, 9)
        assert q[0] == q[1] == 23 and all(v == 22 for v in q[2:])

    def test_exact_division(self):
        assert quota(60, 3) == [20, 20, 20]

    def test_remainder_spread(self):
        q = quota(5, 8)
        assert q == quota_oracle(5, 8)
        assert q == [1, 1, 1, 1, 1, 0, 0, 0]

    def test_zero_classes_rejected(self):
        with pytest.raises(ValueError):
            quota(10, 0)

    @given(st.integers(min_value=1, max_value=500),
           st.integers(min_value=1, max_value=40))
    def test_oracle_equivalence(self, budget, n):
        assert quota(budget, n) == quota_oracle(budget, n)
        assert sum(quota(budget, n)) == min(budget, budget)


def uta_oracle(scores, class_of, quotas):
    """Full sort per class by (-score, id)."""
    out = {}
    for cls in sorted(set(class_of[s] for s in scores)):
        ids = [s for s in scores if class_of[s] == cls]
        ids.sort(key=lambda s: (-scores[s], s))
        out[cls] = ids[:quotas.get(cls, 0)]
    return out


class TestSelectUTA:
    def test_three_sample_example(self):
        scores = {1: 2.0, 2: 1.0, 3: 3.0}
        class_of = {1: 0, 2: 0, 3: 0}
        sel = select_uta(scores, class_of, {0: 2})
        assert sel.by_class[0] == [3, 1]

    def test_tie_break_takes_lowest_ids(self):
        scores = {5: 1.0, 3: 1.0, 9: 1.0}
        sel = select_uta(scores, {i: 0 for i in scores}, {0: 2})
        assert sel.by_class[0] == [3, 5]

    def test_zero_quota_empty(self):
        sel = select_uta({1: 2.0}, {1: 0}, {0: 0})
        assert sel.by_class[0] == []

    def test_quota_exceeds_population_warns(self):
        with pytest.warns(UserWarning):
            sel = select_uta({1: 1.0}, {1: 0}, {0: 5})
        assert sel.by_class[0] == [1]

    def test_unclassed_sample_rejected(self):
        with pytest.raises(ValueError):
            select_uta({1: 1.0}, {}, {0: 1})

    @given(st.integers(min_value=0, max_value=10_000))
    def test_full_sort_oracle_random(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        ids = list(rng.choice(1000, size=n, replace=False))
        scores = {int(i): float(rng.normal()) for i in ids}
        class_of = {int(i): int(rng.integers(0, 4)) for i in ids}
        quotas = {c: int(rng.integers(0, 6)) for c in range(4)}
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sel = select_uta(scores, class_of, quotas)
        assert sel.by_class == uta_oracle(scores, class_of, quotas)


class TestSelectRandom:
    def test_whole_class_when_quota_large(self):
        with pytest.warns(UserWarning):
            sel = select_random([1, 2, 3], {1: 0, 2: 0, 3: 0}, {0: 9}, seed=0)
        assert sorted(sel.by_class[0]) == [1, 2, 3]

    def test_seed_determinism(self):
        ids = list(range(40))
        class_of = {i: i % 2 for i in ids}
        a = select_random(ids, class_of, {0: 3, 1: 3}, seed=11)
        b = select_random(ids, class_of, {0: 3, 1: 3}, seed=11)
        assert a.by_class == b.by_class
        c = select_random(ids, class_of, {0: 3, 1: 3}, seed=12)
        assert a.by_class != c.by_class  # overwhelmingly likely

    def test_membership(self):
        ids = list(range(20))
        class_of = {i: 0 if i < 10 else 1 for i in ids}
        sel = select_random(ids, class_of, {0: 1, 1: 1}, seed=5)
        assert class_of[sel.by_class[0][0]] == 0
        assert class_of[sel.by_class[1][0]] == 1


class TestSelectNME:
    def test_single_sample_class(self):
        sel = select_nme({1: np.array([1.0, 2.0])}, {1: 0}, {0: 1})
        assert sel.by_class[0] == [1]

    def test_collinear_points_nearest_mean_wins(self):
        emb = {1: np.array([1.0, 0.2]), 2: np.array([2.0, 0.4]),
               3: np.array([30.0, 6.0])}
        # brute force: single pick minimizing cosine distance to the mean
        mean = np.mean(list(emb.values()), axis=0)
        def cosd(v):
            return 1 - v @ mean / (np.linalg.norm(v) * np.linalg.norm(mean))
        best = min(emb, key=lambda i: (cosd(emb[i]), i))
        sel = select_nme(emb, {i: 0 for i in emb}, {0: 1})
        assert sel.by_class[0] == [best]

    def test_symmetric_pair_tie_breaks_low_id(self):
        emb = {4: np.array([1.0, 1.0]), 2: np.array([1.0, -1.0])}
        sel = select_nme(emb, {4: 0, 2: 0}, {0: 1})
        assert sel.by_class[0] == [2]

    def test_greedy_matches_step_oracle(self):
        rng = np.random.default_rng(8)
        emb = {i: rng.normal(size=4) for i in range(12)}
        class_of = {i: 0 for i in emb}
        sel = select_nme(emb, class_of, {0: 5})
        # replay the greedy construction independently
        target = np.mean(list(emb.values()), axis=0)
        chosen, remaining = [], sorted(emb)
        for _ in range(5):
            def key(i):
                trial = np.mean([emb[j] for j in chosen + [i]], axis=0)
                c = 1 - trial @ target / (np.linalg.norm(trial) * np.linalg.norm(target))
                return (c, i)
            nxt = min(remaining, key=key)
            chosen.append(nxt)
            remaining.remove(nxt)
        assert sel.by_class[0] == chosen


class TestSelectPool:
    def test_margin_sort(self):
        probs = {1: [0.55, 0.45], 2: [0.95, 0.05]}
        sel = select_pool(probs, {1: 0, 2: 0}, {0: 1})
        assert sel.by_class[0] == [1]

    def test_one_hot_selected_last(self):
        probs = {1: [1.0, 0.0], 2: [0.6, 0.4], 3: [0.7, 0.3]}
        sel = select_pool(probs, {i: 0 for i in probs}, {0: 2})
        assert 1 not in sel.by_class[0]

    def test_uniform_selected_first(self):
        probs = {1: [0.5, 0.5], 2: [0.9, 0.1]}
        sel = select_pool(probs, {1: 0, 2: 0}, {0: 1})
        assert sel.by_class[0] == [1]

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            select_pool({1: [1.0]}, {1: 0}, {0: 1})


class TestSelectCommittee:
    def test_full_agreement_selected_last(self):
        members = [{1: [1, 0], 2: [0.4, 0.6]}, {1: [1, 0], 2: [0.7, 0.3]}]
        sel = select_committee(members, {1: 0, 2: 0}, {0: 1})
        assert sel.by_class[0] == [2]   # members disagree on 2 only

    def test_binary_split_has_ln2_entropy(self):
        members = [{1: [1, 0]}, {1: [0, 1]}]
        sel = select_committee(members, {1: 0}, {0: 1})
        assert sel.scores[1] == pytest.approx(math.log(2), abs=1e-12)

    def test_vote_entropy_ranks_three_way_split_higher(self):
        members = [
            {1: [1, 0, 0], 2: [1, 0, 0]},
            {1: [1, 0, 0], 2: [0, 1, 0]},
            {1: [0, 0, 1], 2: [0, 0, 1]},
        ]
        # votes: sample 1 -> (0,0,2); sample 2 -> (0,1,2)
        sel = select_committee(members, {1: 0, 2: 0}, {0: 2})
        assert sel.by_class[0][0] == 2
        assert sel.scores[2] > sel.scores[1]

    def test_single_member_rejected(self):
        with pytest.raises(ValueError):
            select_committee([{1: [1, 0]}], {1: 0}, {0: 1})

    def test_misaligned_members_rejected(self):
        with pytest.raises(ValueError):
            select_committee([{1: [1, 0]}, {2: [1, 0]}], {1: 0, 2: 0}, {0: 1})


class TestUpdateBank:
    def _selection(self, by_class, scores=None, selector="uta"):
        return Selection(selector, by_class,
                         scores or {i: float(i) for ids in by_class.values()
                                    for i in ids})

    def test_base_session_fill(self):
        bank = MemoryBank(10)
        sel = self._selection({0: [1, 2], 1: [5, 6]})
        out = update_bank(bank, sel, 2)
        assert out.entries == {0: [1, 2], 1: [5, 6]}
        assert out.total() <= 10

    def test_requota_truncates_old_classes(self):
        bank = MemoryBank(60)
        sel0 = self._selection({c: list(range(c * 100, c * 100 + 20)) for c in range(3)},
                               scores={i: float(i % 100) for c in range(3)
                                       for i in range(c * 100, c * 100 + 20)})
        bank = update_bank(bank, sel0, 3)
        assert bank.total() == 60
        sel1 = self._selection({3: list(range(300, 315))})
        bank = update_bank(bank, sel1, 4)
        assert bank.total() == 60
        assert all(len(bank.entries[c]) == 15 for c in range(4))
        # old classes kept their highest scores (ids 5..19 within each class)
        for c in range(3):
            kept = sorted(bank.entries[c])
            assert kept == list(range(c * 100 + 5, c * 100 + 20))

    def test_idempotent_reupdate(self):
        bank = MemoryBank(8)
        sel = self._selection({0: [1, 2], 1: [3, 4]})
        once = update_bank(bank, sel, 2)
        twice = update_bank(once, sel, 2)
        assert once.entries == twice.entries
        assert once.provenance == twice.provenance

    def test_budget_invariant_randomized(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            budget = int(rng.integers(4, 50))
            bank = MemoryBank(budget)
            next_id = 0
            num_sessions = int(rng.integers(2, 6))
            for t in range(num_sessions):
                n_seen = t + 2
                quotas = {c: q for c, q in enumerate(quota(budget, n_seen))}
                by_class = {}
                scores = {}
                for c in ([0, 1] if t == 0 else [t + 1]):
                    pop = int(rng.integers(1, 12))
                    ids = list(range(next_id, next_id + pop))
                    next_id += pop
                    take = min(quotas.get(c, 0), pop)
                    by_class[c] = ids[:take]
                    scores.update({i: float(rng.normal()) for i in ids[:take]})
                bank = update_bank(bank, Selection("uta", by_class, scores), n_seen)
                bank.validate()
                assert bank.total() <= budget

    def test_no_cross_class_leakage(self):
        rng = np.random.default_rng(5)
        ids = list(range(60))
        class_of = {i: int(rng.integers(0, 3)) for i in ids}
        scores = {i: float(rng.normal()) for i in ids}
        quotas = {c: 4 for c in range(3)}
        bank = update_bank(MemoryBank(12), select_uta(scores, class_of, quotas), 3)
        for cls, stored in bank.entries.items():
            for sid in stored:
                assert class_of[sid] == cls

    def test_class_leakage_guard(self):
        bank = MemoryBank(4)
        sel = self._selection({5: [1]})
        with pytest.raises(ValueError):
            update_bank(bank, sel, 2)   # class 5 not within 2 seen classes

    def test_manifest_round_trip(self, tmp_path):
        bank = MemoryBank(6)
        sel = self._selection({0: [3, 1], 1: [7]})
        bank = update_bank(bank, sel, 2)
        path = tmp_path / "bank.tsv"
        bank.save_manifest(str(path))
        text = path.read_text()
        assert "uta" in text
        rows = [l for l in text.splitlines() if not l.startswith("#")]
        assert len(rows) == 3
