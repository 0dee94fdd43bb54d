import numpy as np
import pytest

from bgnn import metrics as mt
from bgnn.errors import ContractError
from bgnn.proposals import BBox


def box(x1, y1, x2, y2):
    return BBox(float(x1), float(y1), float(x2), float(y2))


class TestIoU:
    def test_identical(self):
        assert mt.iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert mt.iou(box(0, 0, 1, 1), box(5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        assert mt.iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)


def simple_image(preds, gts, classes=None, n_ent=4, boxes=None):
    classes = classes if classes is not None else list(range(n_ent))
    boxes = boxes or [box(10 * i, 10 * i, 10 * i + 8, 10 * i + 8) for i in range(n_ent)]
    return mt.ImageEval(
        triplets=preds,
        pred_entity_classes=classes,
        pred_boxes=boxes,
        gt_triplets=gts,
        gt_entity_classes=classes,
        gt_boxes=boxes,
    )


class TestMatching:
    def test_perfect_predictions_all_match(self):
        gts = [(0, 1, 1), (1, 0, 2), (2, 2, 3)]
        preds = [(s, k, o, 1.0 - 0.1 * n) for n, (s, k, o) in enumerate(gts)]
        img = simple_image(preds, gts)
        for mode in mt.MODES:
            ranks = mt.match_triplets(img, mode)
            assert ranks == [0, 1, 2]

    def test_empty_predictions(self):
        img = simple_image([], [(0, 1, 1)])
        assert mt.match_triplets(img, "predcls") == [None]

    def test_each_gt_matched_once(self):
        gts = [(0, 1, 1)]
        preds = [(0, 1, 1, 0.9), (0, 1, 1, 0.8)]
        img = simple_image(preds, gts)
        assert mt.match_triplets(img, "predcls") == [0]

    def test_sgcls_requires_correct_entity_labels(self):
        gts = [(0, 1, 1)]
        preds = [(0, 1, 1, 0.9)]
        img = simple_image(preds, gts)
        img.pred_entity_classes = [9, 9, 9, 9]
        assert mt.match_triplets(img, "predcls") == [0]
        assert mt.match_triplets(img, "sgcls") == [None]

    def test_sggen_box_threshold(self):
        gts = [(0, 1, 1)]
        preds = [(0, 1, 1, 0.9)]
        img = simple_image(preds, gts)
        img.pred_boxes = [box(0, 0, 8, 8), box(100, 100, 108, 108)]
        img.gt_boxes = [box(0, 0, 8, 8), box(100, 100, 104, 108)]  # IoU = 0.5
        assert mt.match_triplets(img, "sggen", iou_thresh=0.5) == [0]
        img.gt_boxes = [box(0, 0, 8, 8), box(100, 100, 103, 108)]  # IoU < 0.5
        assert mt.match_triplets(img, "sggen", iou_thresh=0.5) == [None]

    def test_against_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 7))
            classes = rng.integers(0, 3, size=n).tolist()
            gts = []
            for i in range(n):
                for j in range(n):
                    if i != j and rng.uniform() < 0.3:
                        gts.append((i, int(rng.integers(0, 4)), j))
            preds = [
                (int(rng.integers(0, n)), int(rng.integers(0, 4)), int(rng.integers(0, n)),
                 float(rng.uniform()))
                for _ in range(15)
            ]
            preds = [p for p in preds if p[0] != p[2]]
            preds.sort(key=lambda p: -p[3])
            img = simple_image(preds, gts, classes=classes, n_ent=n)
            got = mt.match_triplets(img, "predcls")
            # oracle: explicit compatibility table, then greedy scan by rank
            compat = [
                [p[0] == g[0] and p[2] == g[2] and p[1] == g[1] for g in gts] for p in preds
            ]
            expect = [None] * len(gts)
            used = set()
            for rank, row in enumerate(compat):
                for g, ok in enumerate(row):
                    if ok and g not in used:
                        expect[g] = rank
                        used.add(g)
                        break
            assert got == expect


class TestRecall:
    def test_perfect_recall(self):
        gts = [(0, 1, 1), (1, 0, 2)]
        preds = [(0, 1, 1, 0.9), (1, 0, 2, 0.8)]
        img = simple_image(preds, gts)
        ranks = mt.match_triplets(img, "predcls")
        report = mt.aggregate_recall([img], [ranks], ks=(20,))
        assert report.recall[20] == 1.0
        assert report.mean_recall[20] == 1.0

    def test_single_class_predictor_on_two_class_gt(self):
        gts = [(0, 0, 1), (1, 1, 2)]
        preds = [(0, 0, 1, 0.9)]
        img = simple_image(preds, gts)
        ranks = mt.match_triplets(img, "predcls")
        report = mt.aggregate_recall([img], [ranks], ks=(20,))
        assert report.recall[20] == 0.5
        assert report.mean_recall[20] == 0.5

    def test_head_bias_construction(self):
        # single image: 100 head GT all hit, 10 tail GT all missed
        n = 111
        classes = [0] * n
        boxes = [box(i, 0, i + 1, 1) for i in range(n)]
        gts = [(i, 0, i + 1) for i in range(100)] + [(i, 1, i + 1) for i in range(100, 110)]
        preds = [(i, 0, i + 1, 1.0 - i * 1e-3) for i in range(100)]
        img = mt.ImageEval(preds, classes, boxes, gts, classes, boxes)
        ranks = mt.match_triplets(img, "predcls")
        report = mt.aggregate_recall([img], [ranks], ks=(100,))
        assert report.recall[100] == pytest.approx(100 / 110)
        assert report.mean_recall[100] == 0.5

    def test_recall_nondecreasing_in_k(self):
        rng = np.random.default_rng(1)
        gts = [(i, int(rng.integers(0, 3)), i + 1) for i in range(5)]
        preds = [(g[0], int(rng.integers(0, 3)), g[2], float(rng.uniform())) for g in gts]
        preds.sort(key=lambda p: -p[3])
        img = simple_image(preds, gts, classes=[0] * 6, n_ent=6)
        ranks = mt.match_triplets(img, "predcls")
        report = mt.aggregate_recall([img], [ranks], ks=(1, 2, 3, 5, 10))
        values = [report.recall[k] for k in (1, 2, 3, 5, 10)]
        assert values == sorted(values)


class TestGroupPartition:
    def test_boundaries(self):
        part = mt.partition_groups([10001, 10000, 500, 499], cuts=(10000, 500))
        assert part.group_of == {0: "head", 1: "body", 2: "body", 3: "tail"}

    def test_all_equal_single_group(self):
        part = mt.partition_groups([100, 100, 100], cuts=(10000, 500))
        assert set(part.group_of.values()) == {"tail"}

    def test_groups_disjoint_and_exhaustive(self):
        counts = [15000, 9000, 600, 500, 499, 3, 10001]
        part = mt.partition_groups(counts)
        assert sorted(part.group_of) == list(range(len(counts)))


class TestWmap:
    def test_perfect_predictions(self):
        gts = [(0, 0, 1), (1, 1, 2)]
        preds = [(0, 0, 1, 0.9), (1, 1, 2, 0.8)]
        img = simple_image(preds, gts)
        assert mt.wmap([img], "rel") == 1.0
        assert mt.wmap([img], "phr") == 1.0

    def test_no_predictions(self):
        img = simple_image([], [(0, 0, 1)])
        assert mt.wmap([img], "rel") == 0.0

    def test_hand_computed_staircase(self):
        # one class, three GT; hits at ranks 0 and 2 -> AP = 1/3 + (1/3)(2/3) = 5/9
        gts = [(0, 0, 1), (1, 0, 2), (2, 0, 3)]
        preds = [(0, 0, 1, 0.9), (0, 0, 2, 0.8), (1, 0, 2, 0.7)]
        img = simple_image(preds, gts)
        assert mt.wmap([img], "rel") == pytest.approx(5.0 / 9.0)

    def test_phrase_variant_uses_enclosing_box(self):
        gts = [(0, 0, 1)]
        preds = [(1, 0, 0, 0.9)]  # swapped roles: union box identical, rel boxes swapped
        classes = [1, 1]
        boxes = [box(0, 0, 10, 10), box(20, 0, 30, 10)]
        img = mt.ImageEval(preds, classes, boxes, gts, classes, boxes)
        assert mt.wmap([img], "phr") == 1.0
        assert mt.wmap([img], "rel") == 0.0


class TestScoreWeighted:
    def test_reference_row(self):
        assert mt.score_weighted(74.98, 33.51, 34.15) == pytest.approx(42.06, abs=0.01)

    def test_zeros_and_ones(self):
        assert mt.score_weighted(0, 0, 0) == 0.0
        assert mt.score_weighted(100, 100, 100) == pytest.approx(100.0)


class TestAuc:
    def test_perfectly_separated(self):
        assert mt.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_hand_case(self):
        assert mt.auc([0.9, 0.8, 0.3], [1, 0, 1]) == 0.5

    def test_ties_contribute_half(self):
        assert mt.auc([0.5, 0.5], [1, 0]) == 0.5

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(size=20000)
        labels = rng.integers(0, 2, size=20000)
        assert abs(mt.auc(scores, labels) - 0.5) < 0.02

    def test_single_class_rejected(self):
        with pytest.raises(ContractError):
            mt.auc([0.5, 0.6], [1, 1])


class TestEntityScoreBaseline:
    def test_one_hot(self):
        assert mt.entity_score_product_baseline([0, 1.0, 0], [1.0, 0, 0]) == 1.0

    def test_uniform(self):
        quarter = np.full(4, 0.25)
        assert mt.entity_score_product_baseline(quarter, quarter) == pytest.approx(0.0625)

    def test_symmetric(self):
        a, b = np.array([0.7, 0.3]), np.array([0.4, 0.6])
        assert mt.entity_score_product_baseline(a, b) == mt.entity_score_product_baseline(b, a)
