import numpy as np
import pytest
import torch

from essential.expansion import (
    ExpandedPrototypeSet, TransformationBank, build_virtual_prototypes, expand,
    expanded_predict, expanded_predict_batch, expanded_scores, multitask_loss)
from essential.networks import MLPBackbone


def _image(seed=0, n=8, c=3):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n, n, c)).astype(np.float32)


class TestBanks:
    @pytest.mark.parametrize("variant,m", [
        ("none", 1), ("rotation", 4), ("rotation2", 2), ("color_perm", 6),
        ("color_perm3", 3), ("rot_color_perm6", 6), ("rot_color_perm12", 12)])
    def test_view_counts(self, variant, m):
        assert TransformationBank.for_variant(variant).M == m

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            TransformationBank.for_variant("mixup")

    def test_first_view_is_identity_bit_exact(self):
        img = _image()
        for variant in ("rotation", "color_perm", "rot_color_perm12"):
            views = expand(img, TransformationBank.for_variant(variant))
            assert np.array_equal(views[0], img)

    def test_rotation_angles(self):
        img = _image()
        views = expand(img, TransformationBank.for_variant("rotation"))
        assert len(views) == 4
        np.testing.assert_array_equal(views[1], np.rot90(img, 1, axes=(0, 1)))
        np.testing.assert_array_equal(views[2], np.rot90(img, 2, axes=(0, 1)))
        np.testing.assert_array_equal(views[3], np.rot90(img, 3, axes=(0, 1)))

    def test_rotation2_is_0_and_180(self):
        img = _image()
        views = expand(img, TransformationBank.for_variant("rotation2"))
        assert len(views) == 2
        np.testing.assert_array_equal(views[1], np.rot90(img, 2, axes=(0, 1)))

    def test_rotation_group_closure(self):
        img = _image()
        out = img
        for _ in range(4):
            out = np.rot90(out, 1, axes=(0, 1))
        assert np.array_equal(out, img)
        # and through the bank: rotating the 90-degree view three more times
        bank = TransformationBank.for_variant("rotation")
        v = img
        for _ in range(4):
            v = expand(v, bank)[1]
        assert np.array_equal(v, img)

    def test_color_perm_channel_guard(self):
        gray = _image(c=1)
        with pytest.raises(ValueError):
            expand(gray, TransformationBank.for_variant("color_perm"))
        # rotations do not care about channels
        assert len(expand(gray, TransformationBank.for_variant("rotation"))) == 2 * 2

    def test_color_perm_views_are_permutations(self):
        img = _image()
        views = expand(img, TransformationBank.for_variant("color_perm"))
        assert len(views) == 6
        stacked = {tuple(v.reshape(-1)[:9]) for v in views}
        assert len(stacked) == 6  # distinct orderings on a random image

    def test_color_perm3_is_cyclic_group(self):
        img = _image()
        views = expand(img, TransformationBank.for_variant("color_perm3"))
        np.testing.assert_array_equal(views[1], img[:, :, [1, 2, 0]])
        np.testing.assert_array_equal(views[2], img[:, :, [2, 0, 1]])

    def test_batch_apply_matches_numpy_path(self):
        img = _image()
        bank = TransformationBank.for_variant("rot_color_perm6")
        views = expand(img, bank)
        batch = torch.from_numpy(img.transpose(2, 0, 1)[None])
        for m in range(bank.M):
            out = bank.apply_batch(batch, m)[0].numpy().transpose(1, 2, 0)
            np.testing.assert_array_equal(out, views[m])


class TestVirtualPrototypes:
    def test_count_is_classes_times_m(self):
        rng = np.random.default_rng(0)
        cells = {(c, m): [rng.normal(size=4) for _ in range(3)]
                 for c in range(3) for m in range(4)}
        protos = build_virtual_prototypes(cells)
        assert protos.prototypes.shape == (3, 4, 4)

    def test_single_vector_cell_normalizes(self):
        v = np.array([3.0, 4.0])
        protos = build_virtual_prototypes({(0, 0): [v]})
        np.testing.assert_allclose(protos.prototypes[0, 0].numpy(), [0.6, 0.8],
                                   atol=1e-6)
        np.testing.assert_allclose(protos.norms[0, 0].item(), 5.0, atol=1e-6)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(1)
        cells = {(c, m): [rng.normal(size=6) for _ in range(5)]
                 for c in range(2) for m in range(3)}
        protos = build_virtual_prototypes(cells)
        norms = protos.prototypes.norm(dim=-1).numpy()
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_antipodal_cell_is_degenerate(self):
        with pytest.raises(ValueError):
            build_virtual_prototypes({(0, 0): [np.array([1.0, 0.0]),
                                               np.array([-1.0, 0.0])]})

    def test_missing_cell_rejected(self):
        cells = {(0, 0): [np.ones(3)], (0, 1): [np.ones(3)], (1, 0): [np.ones(3)]}
        with pytest.raises(ValueError):
            build_virtual_prototypes(cells)


class TestExpandedPrediction:
    def test_m1_reduces_to_cosine_argmax(self):
        rng = np.random.default_rng(5)
        protos = build_virtual_prototypes(
            {(c, 0): [rng.normal(size=8) for _ in range(4)] for c in range(3)})
        feats = torch.from_numpy(rng.normal(size=(10, 1, 8)).astype(np.float32))
        preds = expanded_predict_batch(feats, protos)
        cos = torch.nn.functional.normalize(feats[:, 0], dim=-1)
        brute = (cos @ protos.prototypes[:, 0].T).argmax(dim=1).numpy()
        np.testing.assert_array_equal(preds, brute)

    def test_matching_prototype_wins(self):
        p0 = np.array([1.0, 0.0, 0.0])
        p1 = np.array([0.0, 1.0, 0.0])
        protos = build_virtual_prototypes(
            {(0, m): [p0] for m in range(2)} | {(1, m): [p1] for m in range(2)})
        feats = torch.tensor([[[0.0, 2.0, 0.0], [0.0, 3.0, 0.0]]])
        assert expanded_predict_batch(feats, protos)[0] == 1

    def test_similarity_sum_oracle(self):
        rng = np.random.default_rng(9)
        M, D = 3, 6
        cells = {(c, m): [rng.normal(size=D) for _ in range(3)]
                 for c in range(3) for m in range(M)}
        protos = build_virtual_prototypes(cells)
        feats = torch.from_numpy(rng.normal(size=(5, M, D)).astype(np.float32))
        scores = expanded_scores(feats, protos).numpy()
        for b in range(5):
            for ci, c in enumerate(protos.classes):
                brute = 0.0
                for m in range(M):
                    f = feats[b, m].numpy()
                    p = protos.prototypes[ci, m].numpy()
                    brute += float(f @ p / (np.linalg.norm(f) * np.linalg.norm(p)))
                assert scores[b, ci] == pytest.approx(brute, abs=1e-5)

    def test_scale_invariance_of_cosine_argmax(self):
        rng = np.random.default_rng(11)
        protos = build_virtual_prototypes(
            {(c, m): [rng.normal(size=5)] for c in range(4) for m in range(2)})
        feats = torch.from_numpy(rng.normal(size=(8, 2, 5)).astype(np.float32))
        base = expanded_predict_batch(feats, protos)
        scaled = expanded_predict_batch(feats * 37.5, protos)
        np.testing.assert_array_equal(base, scaled)

    def test_backbone_single_sample_path(self):
        torch.manual_seed(0)
        backbone = MLPBackbone(resolution=8, channels=3, embed_dim=16)
        bank = TransformationBank.for_variant("rotation2")
        img = _image(n=8)
        views = expand(img, bank)
        with torch.no_grad():
            emb = [backbone(torch.from_numpy(
                v.transpose(2, 0, 1)[None]).float()).numpy()[0] for v in views]
        cells = {(0, m): [emb[m]] for m in range(2)}
        cells |= {(1, m): [np.roll(emb[m], 3)] for m in range(2)}
        protos = build_virtual_prototypes(cells)
        assert expanded_predict(img, bank, protos, backbone) == 0

    def test_view_count_mismatch_rejected(self):
        protos = build_virtual_prototypes({(0, 0): [np.ones(4)], (0, 1): [np.ones(4)]})
        with pytest.raises(ValueError):
            expanded_scores(torch.ones(2, 3, 4), protos)


class TestMultitaskLoss:
    def _heads(self, d, n_classes, m):
        torch.manual_seed(0)
        return torch.nn.Linear(d, n_classes), torch.nn.Linear(d, m)

    def test_perfect_heads_drive_loss_to_zero(self):
        d, n, m = 4, 2, 2
        class_head, transform_head = self._heads(d, n, m)
        with torch.no_grad():
            class_head.weight.zero_(); class_head.bias.zero_()
            transform_head.weight.zero_(); transform_head.bias.zero_()
            # embeddings encode (class, transform) one-hot in separate slots
            class_head.weight[0, 0] = 50.0; class_head.weight[1, 1] = 50.0
            transform_head.weight[0, 2] = 50.0; transform_head.weight[1, 3] = 50.0
        emb = torch.tensor([
            [1.0, 0.0, 1.0, 0.0],   # class 0, view 0
            [1.0, 0.0, 0.0, 1.0],   # class 0, view 1
        ])
        loss = multitask_loss(emb, torch.tensor([0, 0]), torch.tensor([0, 1]),
                              class_head, transform_head, n)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_transform_head_gives_ln_m(self):
        d, n, m = 3, 1, 4
        class_head, transform_head = self._heads(d, n, m)
        with torch.no_grad():
            for h in (class_head, transform_head):
                h.weight.zero_(); h.bias.zero_()
        emb = torch.randn(8, d)
        labels = torch.zeros(8, dtype=torch.long)
        tidx = torch.arange(8) % m
        loss = multitask_loss(emb, labels, tidx, class_head, transform_head, n)
        # single class: class term is ln 1 = 0; transform term is ln 4
        assert loss.item() == pytest.approx(np.log(m), abs=1e-6)

    def test_two_view_oracle(self):
        torch.manual_seed(3)
        d, n, m = 5, 3, 2
        class_head, transform_head = self._heads(d, n, m)
        emb = torch.randn(6, d)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        tidx = torch.tensor([0, 1, 0, 1, 0, 1])
        loss = multitask_loss(emb, labels, tidx, class_head, transform_head, n)

        def _ce(logits, target):
            z = logits.detach().numpy().astype(np.float64)
            z = z - z.max()
            return -(z[target] - np.log(np.exp(z).sum()))

        brute = np.mean([
            _ce(class_head(emb[i])[:n], labels[i].item())
            + _ce(transform_head(emb[i]), tidx[i].item())
            for i in range(6)])
        assert loss.item() == pytest.approx(brute, rel=1e-5)

    def test_transform_index_guard(self):
        class_head, transform_head = self._heads(4, 2, 2)
        with pytest.raises(ValueError):
            multitask_loss(torch.randn(2, 4), torch.tensor([0, 1]),
                           torch.tensor([0, 2]), class_head, transform_head, 2)
