"""Scene-graph evaluation: recall@K, mean recall, long-tail group splits,
Open-Images-style weighted mAP, and AUC for relationship confidence.

Matching is greedy in rank order: walking predictions from the highest
score down, each prediction may claim at most one still-unmatched ground
truth, and every ground truth is claimed at most once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .proposals import BBox

MODES = ("predcls", "sgcls", "sggen")
GROUPS = ("head", "body", "tail")


def iou(a: BBox, b: BBox) -> float:
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def enclosing_box(a: BBox, b: BBox) -> BBox:
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


@dataclass
class ImageEval:
    """Everything matching needs for one image.

    ``triplets`` must already be ranked by descending score.  For PredCls
    and SGCls the prediction and ground-truth entity lists are the same
    objects (index identity); for SGGen they may differ and boxes decide.
    """

    triplets: list[tuple[int, int, int, float]]  # (subj_idx, predicate, obj_idx, score)
    pred_entity_classes: list[int]
    pred_boxes: list[BBox]
    gt_triplets: list[tuple[int, int, int]]  # (subj_idx, predicate, obj_idx)
    gt_entity_classes: list[int]
    gt_boxes: list[BBox]


def _compatible(img: ImageEval, pred, gt, mode: str, iou_thresh: float) -> bool:
    pi, pk, pj, _ = pred
    gs, gk, go = gt
    if pk != gk:
        return False
    if mode == "predcls":
        return pi == gs and pj == go
    if mode == "sgcls":
        return (
            pi == gs
            and pj == go
            and img.pred_entity_classes[pi] == img.gt_entity_classes[gs]
            and img.pred_entity_classes[pj] == img.gt_entity_classes[go]
        )
    if mode == "sggen":
        return (
            img.pred_entity_classes[pi] == img.gt_entity_classes[gs]
            and img.pred_entity_classes[pj] == img.gt_entity_classes[go]
            and iou(img.pred_boxes[pi], img.gt_boxes[gs]) >= iou_thresh
            and iou(img.pred_boxes[pj], img.gt_boxes[go]) >= iou_thresh
        )
    raise ContractError(f"unknown mode {mode!r}")


def match_triplets(img: ImageEval, mode: str, iou_thresh: float = 0.5) -> list[int | None]:
    """Rank (0-based) of the prediction matched to each ground truth, or None."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    ranks: list[int | None] = [None] * len(img.gt_triplets)
    taken = [False] * len(img.gt_triplets)
    for rank, pred in enumerate(img.triplets):
        for g, gt in enumerate(img.gt_triplets):
            if taken[g]:
                continue
            if _compatible(img, pred, gt, mode, iou_thresh):
                ranks[g] = rank
                taken[g] = True
                break
    return ranks


def recall_at_k(match_ranks: list[int | None], n_gt: int, k: int) -> float:
    if k <= 0:
        raise ContractError("K must be positive")
    if n_gt == 0:
        raise ContractError("image without ground truth is excluded upstream")
    hits = sum(1 for r in match_ranks if r is not None and r < k)
    return hits / n_gt


@dataclass
class GroupPartition:
    group_of: dict[int, str]
    cuts: tuple[float, float]

    def classes_in(self, group: str) -> list[int]:
        return sorted(c for c, g in self.group_of.items() if g == group)


def partition_groups(train_counts, cuts: tuple[float, float] = (10000, 500)) -> GroupPartition:
    """Head strictly above the top cut, tail strictly below the bottom one;
    classes landing exactly on a cut are body."""
    hi, lo = cuts
    group_of = {}
    for c, count in enumerate(train_counts):
        if count > hi:
            group_of[c] = "head"
        elif count < lo:
            group_of[c] = "tail"
        else:
            group_of[c] = "body"
    return GroupPartition(group_of=group_of, cuts=(hi, lo))


@dataclass
class MetricsReport:
    recall: dict[int, float] = field(default_factory=dict)
    mean_recall: dict[int, float] = field(default_factory=dict)
    group_mean_recall: dict[str, dict[int, float]] = field(default_factory=dict)
    per_class_recall: dict[int, dict[int, float]] = field(default_factory=dict)
    wmap_rel: float | None = None
    wmap_phr: float | None = None
    score_weighted: float | None = None
    auc_rce: float | None = None
    auc_baseline: float | None = None

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
            "group_mean_recall": {
                g: {str(k): v for k, v in per_k.items()}
                for g, per_k in self.group_mean_recall.items()
            },
            "per_class_recall": {
                str(k): {str(c): v for c, v in per_c.items()}
                for k, per_c in self.per_class_recall.items()
            },
            "wmap_rel": self.wmap_rel,
            "wmap_phr": self.wmap_phr,
            "score_weighted": self.score_weighted,
            "auc_rce": self.auc_rce,
            "auc_baseline": self.auc_baseline,
        }

    def table(self) -> str:
        lines = []
        for k in sorted(self.recall):
            lines.append(f"R@{k:<4d} {self.recall[k]:.4f}   mR@{k:<4d} {self.mean_recall[k]:.4f}")
        for group in GROUPS:
            if group in self.group_mean_recall:
                per_k = self.group_mean_recall[group]
                cells = "  ".join(f"mR@{k}={per_k[k]:.4f}" for k in sorted(per_k))
                lines.append(f"{group:<5s} {cells}")
        if self.wmap_rel is not None:
            lines.append(
                f"wmAP_rel {self.wmap_rel:.4f}  wmAP_phr {self.wmap_phr:.4f}"
                f"  score_wtd {self.score_weighted:.4f}"
            )
        if self.auc_rce is not None:
            lines.append(f"AUC rce {self.auc_rce:.4f}  baseline {self.auc_baseline:.4f}")
        return "\n".join(lines)


def aggregate_recall(images: list[ImageEval], all_ranks: list[list[int | None]],
                     ks: tuple[int, ...] = (20, 50, 100),
                     partition: GroupPartition | None = None) -> MetricsReport:
    """Fold per-image match ranks into R@K / mR@K / per-group mR@K."""
    report = MetricsReport()
    classes = sorted({k for img in images for _, k, _ in img.gt_triplets})
    for k in ks:
        per_image = []
        per_class_image_recalls: dict[int, list[float]] = {c: [] for c in classes}
        for img, ranks in zip(images, all_ranks):
            n_gt = len(img.gt_triplets)
            if n_gt == 0:
                continue
            per_image.append(recall_at_k(ranks, n_gt, k))
            by_class_hit: dict[int, int] = {}
            by_class_tot: dict[int, int] = {}
            for (s, c, o), rank in zip(img.gt_triplets, ranks):
                by_class_tot[c] = by_class_tot.get(c, 0) + 1
                if rank is not None and rank < k:
                    by_class_hit[c] = by_class_hit.get(c, 0) + 1
            for c, tot in by_class_tot.items():
                per_class_image_recalls[c].append(by_class_hit.get(c, 0) / tot)
        report.recall[k] = float(np.mean(per_image)) if per_image else 0.0
        class_recall = {
            c: float(np.mean(v)) for c, v in per_class_image_recalls.items() if v
        }
        report.per_class_recall[k] = class_recall
        report.mean_recall[k] = (
            float(np.mean(list(class_recall.values()))) if class_recall else 0.0
        )
        if partition is not None:
            for group in GROUPS:
                members = [c for c in class_recall if partition.group_of.get(c) == group]
                report.group_mean_recall.setdefault(group, {})[k] = (
                    float(np.mean([class_recall[c] for c in members])) if members else 0.0
                )
    return report


# ---------------------------------------------------------------------------
# Open-Images-style weighted mAP


def _average_precision(flags: list[bool], n_gt: int) -> float:
    """Exact area under the precision envelope (no 11-point sampling)."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _wmap_overlap(img: ImageEval, pred, gt, variant: str, iou_thresh: float) -> float:
    """Overlap measure for one prediction/GT pairing, or -1 when incompatible."""
    pi, pk, pj, _ = pred
    gs, gk, go = gt
    if pk != gk:
        return -1.0
    if img.pred_entity_classes[pi] != img.gt_entity_classes[gs]:
        return -1.0
    if img.pred_entity_classes[pj] != img.gt_entity_classes[go]:
        return -1.0
    if variant == "rel":
        ov = min(
            iou(img.pred_boxes[pi], img.gt_boxes[gs]),
            iou(img.pred_boxes[pj], img.gt_boxes[go]),
        )
    elif variant == "phr":
        ov = iou(
            enclosing_box(img.pred_boxes[pi], img.pred_boxes[pj]),
            enclosing_box(img.gt_boxes[gs], img.gt_boxes[go]),
        )
    else:
        raise ContractError(f"unknown wmAP variant {variant!r}")
    return ov if ov >= iou_thresh else -1.0


def wmap(images: list[ImageEval], variant: str, iou_thresh: float = 0.5) -> float:
    """Per-predicate-class AP weighted by class GT frequency, summed."""
    classes = sorted({k for img in images for _, k, _ in img.gt_triplets})
    n_gt_total = sum(len(img.gt_triplets) for img in images)
    if n_gt_total == 0:
        return 0.0
    result = 0.0
    for cls in classes:
        entries = []  # (score, image index, pred)
        for idx, img in enumerate(images):
            for pred in img.triplets:
                if pred[1] == cls:
                    entries.append((pred[3], idx, pred))
        entries.sort(key=lambda e: -e[0])
        matched: dict[tuple[int, int], bool] = {}
        n_gt_cls = 0
        gt_by_image: dict[int, list[int]] = {}
        for idx, img in enumerate(images):
            gts = [g for g, t in enumerate(img.gt_triplets) if t[1] == cls]
            gt_by_image[idx] = gts
            n_gt_cls += len(gts)
        flags = []
        for _, idx, pred in entries:
            img = images[idx]
            best_g, best_ov = None, -1.0
            for g in gt_by_image[idx]:
                if matched.get((idx, g)):
                    continue
                ov = _wmap_overlap(img, pred, img.gt_triplets[g], variant, iou_thresh)
                if ov >= 0.0 and ov > best_ov:
                    best_g, best_ov = g, ov
            if best_g is not None:
                matched[(idx, best_g)] = True
                flags.append(True)
            else:
                flags.append(False)
        result += (n_gt_cls / n_gt_total) * _average_precision(flags, n_gt_cls)
    return result


def score_weighted(recall_50: float, wmap_rel: float, wmap_phr: float) -> float:
    """Fixed Open Images combination of R@50 and the two weighted mAPs."""
    return 0.2 * recall_50 + 0.4 * wmap_rel + 0.4 * wmap_phr


# ---------------------------------------------------------------------------
# relationship-confidence AUC


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1.0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = 0.5 * (rank_pos + rank_pos + (j - i))
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        rank_pos += j - i + 1
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def entity_score_product_baseline(p_i, p_j) -> float:
    """Relatedness proxy from detection confidence alone."""
    return float(np.max(p_i) * np.max(p_j))
