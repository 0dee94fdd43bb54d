import numpy as np
import pytest

from bgnn import proposals as pr
from bgnn import sampling as sp
from bgnn.errors import DomainError


def manifest_with_classes(per_image_classes, cp):
    """Minimal manifest: one entity pair per image, triplets as given."""
    rng = np.random.default_rng(0)
    images = []
    for image_id, classes in enumerate(per_image_classes):
        n_ent = max(2, len(classes) + 1)
        simplex = np.zeros(3)
        simplex[0] = 1.0
        entities = [
            pr.EntityProposal(
                visual_feature=rng.normal(size=4),
                box=pr.BBox(0, 0, 10 + i, 10 + i),
                detected_class=0,
                class_simplex=simplex.copy(),
            )
            for i in range(n_ent)
        ]
        triplets = [(i, k, i + 1) for i, k in enumerate(classes)]
        images.append(
            pr.ImageRecord(
                image_id=image_id,
                width=100,
                height=100,
                entities=entities,
                gt_entity_classes=[0] * n_ent,
                gt_triplets=triplets,
            )
        )
    return pr.DatasetManifest(
        classes_entity=["e0", "e1", "e2"],
        classes_predicate=[f"p{i}" for i in range(cp)],
        images=images,
    )


class TestRepeatFactor:
    def test_boundary(self):
        assert sp.repeat_factor(0.07, 0.07) == 1.0

    def test_rare_class(self):
        assert sp.repeat_factor(0.0007, 0.07) == 10.0

    def test_frequent_class_clamped(self):
        assert sp.repeat_factor(0.28, 0.07) == 1.0

    def test_nonpositive_rejected(self):
        with pytest.raises(DomainError):
            sp.repeat_factor(0.0, 0.07)
        with pytest.raises(DomainError):
            sp.repeat_factor(0.1, 0.0)


class TestImageRepeat:
    def test_all_head_classes(self):
        assert sp.image_repeat([0, 1], np.array([1.0, 1.0])) == 1.0

    def test_max_rules(self):
        assert sp.image_repeat([0, 1], np.array([1.0, 10.0])) == 10.0

    def test_no_gt_gives_one(self):
        assert sp.image_repeat([], np.array([5.0])) == 1.0

    def test_matches_bruteforce_max(self):
        rng = np.random.default_rng(1)
        table = rng.uniform(1.0, 8.0, size=10)
        for _ in range(50):
            classes = rng.integers(0, 10, size=rng.integers(1, 6)).tolist()
            assert sp.image_repeat(classes, table) == max(table[c] for c in classes)


class TestInstanceDropRate:
    def test_rarest_class_never_dropped(self):
        assert sp.instance_drop_rate(7.0, 7.0, 0.7) == 0.0

    def test_reference_value(self):
        assert sp.instance_drop_rate(10.0, 1.0, 0.7) == 0.63

    def test_disabled(self):
        assert sp.instance_drop_rate(10.0, 1.0, 0.0) == 0.0

    def test_strict_formula_drops_everything(self):
        assert sp.instance_drop_rate(10.0, 1.0, 0.7, strict_formula=True) == 1.0

    def test_invalid_repeat(self):
        with pytest.raises(DomainError):
            sp.instance_drop_rate(0.0, 1.0, 0.7)

    def test_monotone_in_class_repeat(self):
        rates = [sp.instance_drop_rate(10.0, r_c, 0.7) for r_c in (1.0, 2.0, 5.0, 10.0)]
        assert rates == sorted(rates, reverse=True)


class TestBuildEpoch:
    def test_identity_epoch_when_disabled(self):
        manifest = manifest_with_classes([[0], [1], [0, 1]], cp=2)
        plan = sp.build_epoch(manifest, t=1e-9, gamma_d=0.0, seed=5)
        assert plan.repeat_counts == [1, 1, 1]
        assert len(plan.copies) == 3
        assert all(all(copy.keep_instance) for copy in plan.copies)

    def test_deterministic_given_seed(self):
        manifest = manifest_with_classes([[0], [1], [0, 1]] * 4, cp=2)
        a = sp.build_epoch(manifest, t=0.5, gamma_d=0.7, seed=9)
        b = sp.build_epoch(manifest, t=0.5, gamma_d=0.7, seed=9)
        assert a.repeat_counts == b.repeat_counts
        assert [c.keep_instance for c in a.copies] == [c.keep_instance for c in b.copies]

    def test_fractional_repeat_stochastic_rounding(self):
        # image 0 owns the class seen in 1/16 images: r = sqrt(t/f) = 2.5 for
        # t = 25/64, and every other image stays at repeat 1
        manifest = manifest_with_classes([[0]] + [[1]] * 15, cp=2)
        t = 25.0 / 64.0
        copies = []
        for seed in range(2000):
            plan = sp.build_epoch(manifest, t=t, gamma_d=0.0, seed=seed)
            copies.append(plan.repeat_counts[0])
            assert plan.repeat_counts[1:] == [1] * 15
        assert set(copies) == {2, 3}
        assert 2.45 <= np.mean(copies) <= 2.55

    def test_drop_keep_fraction(self):
        # one image carries the rare class (r=10) plus a head instance (r=1):
        # the head instance inside that image keeps with probability 0.37
        per_image = [[0, 1]] + [[0]] * 99
        manifest = manifest_with_classes(per_image, cp=2)
        kept = 0
        total = 0
        for seed in range(300):
            plan = sp.build_epoch(manifest, t=1.0, gamma_d=0.7, seed=seed)
            for copy in plan.copies:
                if copy.image_index == 0:
                    kept += copy.keep_instance[0]
                    total += 1
        assert total > 2500
        assert 0.34 <= kept / total <= 0.40

    def test_expected_effective_counts_closed_form(self):
        per_image = [[0, 1]] + [[0]] * 24
        manifest = manifest_with_classes(per_image, cp=2)
        t, gamma_d = 0.5, 0.7
        expect = sp.expected_effective_counts(manifest, t, gamma_d)
        totals = np.zeros(2)
        n_epochs = 3000
        for seed in range(n_epochs):
            plan = sp.build_epoch(manifest, t, gamma_d, seed)
            totals += sp.effective_counts(manifest, plan)
        empirical = totals / n_epochs
        np.testing.assert_allclose(empirical, expect, rtol=0.02)
