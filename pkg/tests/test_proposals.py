import json

import numpy as np
import pytest

from bgnn import numeric as nm
from bgnn import proposals as pr
from bgnn.errors import ContractError, DomainError
from bgnn.layers import Linear


def make_entity(rng, dim=6, n_classes=4, cls=None, box=None):
    c = int(rng.integers(0, n_classes)) if cls is None else cls
    simplex = np.full(n_classes, 0.1 / (n_classes - 1))
    simplex[c] = 0.9
    return pr.EntityProposal(
        visual_feature=rng.normal(size=dim),
        box=box or pr.BBox(10.0, 20.0, 50.0, 80.0),
        detected_class=c,
        class_simplex=simplex,
    )


class TestGeometryEncode:
    def test_full_image_box(self):
        g = pr.geometry_encode(pr.BBox(0, 0, 100, 100), 100, 100)
        np.testing.assert_allclose(g, [0, 0, 1, 1, 0.5, 0.5, 1, 1])

    def test_centered_box(self):
        g = pr.geometry_encode(pr.BBox(25, 25, 75, 75), 100, 100)
        np.testing.assert_allclose(g, [0.25, 0.25, 0.75, 0.75, 0.5, 0.5, 0.5, 0.5])

    def test_degenerate_image(self):
        with pytest.raises(DomainError):
            pr.geometry_encode(pr.BBox(0, 0, 1, 1), 0, 100)

    def test_components_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x1, y1 = rng.uniform(0, 90, size=2)
            g = pr.geometry_encode(
                pr.BBox(x1, y1, x1 + rng.uniform(1, 10), y1 + rng.uniform(1, 10)), 100, 100
            )
            assert np.all(g >= 0) and np.all(g <= 1)


class TestEntityRepresentation:
    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.embed = nm.Parameter(self.rng.normal(size=(4, 5)), "embed")
        self.dim = 6
        self.in_dim = self.dim + pr.GEOMETRY_DIM + 5

    def test_zero_weights_give_zero(self):
        f_e = Linear(self.in_dim, 7, "f_e", self.rng, activation="relu")
        f_e.weight.value[...] = 0.0
        ent = make_entity(self.rng, dim=self.dim)
        out = pr.entity_representation(ent, 100, 100, self.embed, f_e)
        np.testing.assert_array_equal(out.data, np.zeros(7))

    def test_identity_selection_of_visual_part(self):
        f_e = Linear(self.in_dim, self.dim, "f_e", self.rng, activation="relu")
        f_e.weight.value[...] = 0.0
        f_e.weight.value[: self.dim, : self.dim] = np.eye(self.dim)
        ent = make_entity(self.rng, dim=self.dim)
        ent.visual_feature = np.abs(ent.visual_feature)
        out = pr.entity_representation(ent, 100, 100, self.embed, f_e)
        np.testing.assert_allclose(out.data, ent.visual_feature)

    def test_matches_recomputation(self):
        f_e = Linear(self.in_dim, 7, "f_e", self.rng, activation="relu")
        ent = make_entity(self.rng, dim=self.dim)
        out = pr.entity_representation(ent, 100, 100, self.embed, f_e)
        g = pr.geometry_encode(ent.box, 100, 100)
        fused = np.concatenate([ent.visual_feature, g, self.embed.value[ent.detected_class]])
        expect = np.maximum(fused @ f_e.weight.value + f_e.bias.value, 0.0)
        assert np.max(np.abs(out.data - expect)) < 1e-12

    def test_class_out_of_range(self):
        f_e = Linear(self.in_dim, 7, "f_e", self.rng)
        ent = make_entity(self.rng, dim=self.dim)
        with pytest.raises(ContractError):
            pr.entity_representation(ent, 100, 100, self.embed, f_e, class_override=99)


class TestPredicateRepresentation:
    def setup_method(self):
        self.rng = np.random.default_rng(2)
        self.f_u = Linear(6, 7, "f_u", self.rng, activation="relu")
        self.f_p = Linear(10, 7, "f_p", self.rng, activation="relu")
        self.e_i = nm.Tensor(self.rng.normal(size=5))
        self.e_j = nm.Tensor(self.rng.normal(size=5))
        self.u = nm.Tensor(self.rng.normal(size=6))

    def test_zero_pair_branch(self):
        self.f_p.weight.value[...] = 0.0
        self.f_p.bias.value[...] = 0.0
        out = pr.predicate_representation(self.e_i, self.e_j, self.u, self.f_u, self.f_p)
        np.testing.assert_allclose(out.data, self.f_u(self.u).data)

    def test_both_branches_zero(self):
        for layer in (self.f_u, self.f_p):
            layer.weight.value[...] = 0.0
            layer.bias.value[...] = 0.0
        out = pr.predicate_representation(self.e_i, self.e_j, self.u, self.f_u, self.f_p)
        np.testing.assert_array_equal(out.data, np.zeros(7))

    def test_matches_recomputation(self):
        out = pr.predicate_representation(self.e_i, self.e_j, self.u, self.f_u, self.f_p)
        branch_u = np.maximum(self.u.data @ self.f_u.weight.value + self.f_u.bias.value, 0.0)
        pair = np.concatenate([self.e_i.data, self.e_j.data])
        branch_p = np.maximum(pair @ self.f_p.weight.value + self.f_p.bias.value, 0.0)
        assert np.max(np.abs(out.data - (branch_u + branch_p))) < 1e-12


class TestPairEntities:
    def test_two_entities(self):
        assert pr.pair_entities(2) == [(0, 1), (1, 0)]

    def test_three_entities(self):
        pairs = pr.pair_entities(3)
        assert len(pairs) == 6
        assert all(i != j for i, j in pairs)

    def test_max_pairs_deterministic(self):
        scores = np.array([0.9, 0.8, 0.2, 0.6])
        first = pr.pair_entities(4, max_pairs=5, entity_scores=scores)
        second = pr.pair_entities(4, max_pairs=5, entity_scores=scores)
        assert first == second
        assert len(first) == 5
        # oracle: full enumeration sorted by score product then lexicographic
        everything = [(i, j) for i in range(4) for j in range(4) if i != j]
        ranked = sorted(everything, key=lambda p: (-(scores[p[0]] * scores[p[1]]), p))
        assert first == sorted(ranked[:5])

    def test_no_self_or_duplicate_pairs(self):
        for n in range(1, 8):
            pairs = pr.pair_entities(n)
            assert len(pairs) == n * (n - 1)
            assert len(set(pairs)) == len(pairs)
            assert all(i != j for i, j in pairs)


def tiny_manifest(rng, n_images=6, n_ent=3, ce=3, cp=4):
    images = []
    for image_id in range(n_images):
        classes = rng.integers(0, ce, size=n_ent).tolist()
        entities = [make_entity(rng, dim=4, n_classes=ce, cls=c) for c in classes]
        pairs = [(i, j) for i in range(n_ent) for j in range(n_ent) if i != j]
        chosen = rng.choice(len(pairs), size=2, replace=False)
        triplets = [
            (pairs[int(idx)][0], int(rng.integers(0, cp)), pairs[int(idx)][1])
            for idx in chosen
        ]
        images.append(
            pr.ImageRecord(
                image_id=image_id,
                width=100,
                height=100,
                entities=entities,
                gt_entity_classes=classes,
                gt_triplets=triplets,
            )
        )
    return pr.DatasetManifest(
        classes_entity=[f"e{i}" for i in range(ce)],
        classes_predicate=[f"p{i}" for i in range(cp)],
        images=images,
    )


class TestFrequencyPrior:
    def test_single_triplet_limit(self):
        rng = np.random.default_rng(3)
        m = tiny_manifest(rng, n_images=1, n_ent=2, ce=3, cp=4)
        m.images[0].gt_entity_classes = [0, 1]
        m.images[0].gt_triplets = [(0, 2, 1)]
        prior = pr.build_frequency_prior(m, epsilon=1e-12)
        assert prior.table[0, 1, 2] == pytest.approx(1.0, abs=1e-9)

    def test_uniform_counts_give_uniform_slice(self):
        cp = 3
        images = []
        rng = np.random.default_rng(4)
        # one image per foreground class on the (0, 1) pair, plus one image
        # whose (0, 1) pair is unannotated so background is counted once too
        for k in range(cp):
            img = tiny_manifest(rng, n_images=1, n_ent=2, ce=2, cp=cp).images[0]
            img.gt_entity_classes = [0, 1]
            img.gt_triplets = [(0, k, 1), (1, k, 0)]
            images.append(img)
        extra = tiny_manifest(rng, n_images=1, n_ent=2, ce=2, cp=cp).images[0]
        extra.gt_entity_classes = [0, 1]
        extra.gt_triplets = [(1, 0, 0)]
        images.append(extra)
        manifest = pr.DatasetManifest(["a", "b"], [f"p{i}" for i in range(cp)], images)
        prior = pr.build_frequency_prior(manifest, epsilon=1e-3)
        np.testing.assert_allclose(prior.table[0, 1], np.full(cp + 1, 1.0 / (cp + 1)))

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        m = tiny_manifest(rng)
        cp = m.n_predicate_classes
        eps = 1e-3
        counts = np.zeros((3, 3, cp + 1))
        for img in m.images:
            annotated = {(s, o): k for s, k, o in img.gt_triplets}
            for i in range(len(img.entities)):
                for j in range(len(img.entities)):
                    if i == j:
                        continue
                    k = annotated.get((i, j), cp)
                    counts[img.gt_entity_classes[i], img.gt_entity_classes[j], k] += 1
        expect = (counts + eps) / (counts.sum(axis=2, keepdims=True) + eps * (cp + 1))
        prior = pr.build_frequency_prior(m, epsilon=eps)
        np.testing.assert_array_equal(prior.table, expect)

    def test_slices_are_strictly_positive_simplices(self):
        m = tiny_manifest(np.random.default_rng(6))
        prior = pr.build_frequency_prior(m)
        assert prior.table.min() > 0
        np.testing.assert_allclose(prior.table.sum(axis=2), 1.0, atol=1e-9)

    def test_empty_manifest_rejected(self):
        m = tiny_manifest(np.random.default_rng(7))
        for img in m.images:
            img.gt_triplets = []
        with pytest.raises(ContractError):
            pr.build_frequency_prior(m)

    def test_nonpositive_epsilon_rejected(self):
        with pytest.raises(DomainError):
            pr.build_frequency_prior(tiny_manifest(np.random.default_rng(8)), epsilon=0.0)


class TestManifestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        m = tiny_manifest(rng)
        m.images[0].pair_features[(0, 1)] = rng.normal(size=4)
        path = tmp_path / "manifest.json"
        pr.save_manifest(m, path)
        loaded = pr.load_manifest(path)
        assert loaded.classes_entity == m.classes_entity
        assert loaded.classes_predicate == m.classes_predicate
        assert len(loaded.images) == len(m.images)
        np.testing.assert_array_equal(
            loaded.images[0].pair_features[(0, 1)], m.images[0].pair_features[(0, 1)]
        )
        assert loaded.images[2].gt_triplets == m.images[2].gt_triplets

    def test_golden_field_names(self, tmp_path):
        m = tiny_manifest(np.random.default_rng(10), n_images=1)
        data = pr.manifest_to_dict(m)
        assert set(data) >= {"classes_entity", "classes_predicate", "images"}
        img = data["images"][0]
        assert set(img) >= {
            "image_id", "width", "height", "entities", "gt_entity_classes", "gt_triplets",
        }
        assert set(img["entities"][0]) == {
            "box", "detected_class", "class_simplex", "visual_feature",
        }
        # the wire format is frozen: serialize -> parse -> identical dict
        assert json.loads(json.dumps(data)) == data

    def test_union_feature_fallback(self):
        m = tiny_manifest(np.random.default_rng(11), n_images=1)
        img = m.images[0]
        expect = 0.5 * (img.entities[0].visual_feature + img.entities[1].visual_feature)
        np.testing.assert_allclose(img.union_feature(0, 1), expect)
