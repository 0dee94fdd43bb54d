"""Entity/predicate proposals, their initial representations, and the
class frequency prior.

Detection-side inputs arrive through a :class:`DatasetManifest` (JSON on
disk); no backbone runs here.  Every builder is a pure function of the
manifest plus the model parameters it is handed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ContractError, DimensionError, DomainError
from .layers import Linear

GEOMETRY_DIM = 8


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DomainError(f"degenerate box {self}")

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class EntityProposal:
    visual_feature: np.ndarray
    box: BBox
    detected_class: int
    class_simplex: np.ndarray

    def validate(self, n_classes: int):
        p = self.class_simplex
        if p.shape != (n_classes,):
            raise DimensionError(f"class simplex has shape {p.shape}, expected ({n_classes},)")
        if p.min() < 0 or abs(p.sum() - 1.0) > 1e-9:
            raise ContractError("class simplex must be a probability vector")
        if self.detected_class != int(np.argmax(p)):
            raise ContractError("detected_class must be the simplex argmax")


@dataclass
class PredicateProposal:
    subject_index: int
    object_index: int
    union_feature: np.ndarray

    def __post_init__(self):
        if self.subject_index == self.object_index:
            raise ContractError("self-pair predicate proposal")


@dataclass
class ImageRecord:
    image_id: int
    width: int
    height: int
    entities: list[EntityProposal]
    gt_entity_classes: list[int]
    gt_triplets: list[tuple[int, int, int]]  # (subject_idx, predicate_class, object_idx)
    pair_features: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def union_feature(self, i: int, j: int) -> np.ndarray:
        """Pair feature if the manifest carries one, else the entity-feature mean."""
        feat = self.pair_features.get((i, j))
        if feat is not None:
            return feat
        return 0.5 * (self.entities[i].visual_feature + self.entities[j].visual_feature)

    def gt_lookup(self) -> dict[tuple[int, int], int]:
        return {(s, o): k for s, k, o in self.gt_triplets}


@dataclass
class DatasetManifest:
    classes_entity: list[str]
    classes_predicate: list[str]
    images: list[ImageRecord]
    group_cuts: tuple[float, float] | None = None
    predicate_groups: dict[str, list[int]] | None = None

    @property
    def n_entity_classes(self) -> int:
        return len(self.classes_entity)

    @property
    def n_predicate_classes(self) -> int:
        return len(self.classes_predicate)

    @property
    def background_index(self) -> int:
        return len(self.classes_predicate)

    def validate(self):
        ce, cp = self.n_entity_classes, self.n_predicate_classes
        for img in self.images:
            n = len(img.entities)
            if len(img.gt_entity_classes) != n:
                raise ContractError(f"image {img.image_id}: gt class count != entity count")
            for ent in img.entities:
                ent.validate(ce)
            for s, k, o in img.gt_triplets:
                if not (0 <= s < n and 0 <= o < n and s != o):
                    raise ContractError(f"image {img.image_id}: triplet indices out of range")
                if not 0 <= k < cp:
                    raise ContractError(f"image {img.image_id}: predicate class {k} out of range")
            if any(c < 0 or c >= ce for c in img.gt_entity_classes):
                raise ContractError(f"image {img.image_id}: entity class out of range")


@dataclass
class FrequencyPrior:
    """p(predicate | subject class, object class), background at the last index."""

    table: np.ndarray  # (C_e, C_e, C_p + 1)

    def slice_for(self, subj_class: int, obj_class: int) -> np.ndarray:
        return self.table[subj_class, obj_class]


# ---------------------------------------------------------------------------
# representation builders


def geometry_encode(box: BBox, image_w: float, image_h: float) -> np.ndarray:
    """Normalized box encoding: corners, center and extents over image size."""
    if image_w <= 0 or image_h <= 0:
        raise DomainError(f"degenerate image extent {image_w}x{image_h}")
    cx = 0.5 * (box.x1 + box.x2)
    cy = 0.5 * (box.y1 + box.y2)
    return np.array(
        [
            box.x1 / image_w,
            box.y1 / image_h,
            box.x2 / image_w,
            box.y2 / image_h,
            cx / image_w,
            cy / image_h,
            (box.x2 - box.x1) / image_w,
            (box.y2 - box.y1) / image_h,
        ]
    )


def entity_representation(ent: EntityProposal, image_w: float, image_h: float,
                          embed_table: nm.Parameter, f_e: Linear,
                          class_override: int | None = None) -> nm.Tensor:
    """Fuse visual, geometric and semantic features into one entity vector.

    ``class_override`` substitutes the ground-truth class for the word
    embedding lookup (the PredCls regime).
    """
    c = ent.detected_class if class_override is None else class_override
    if not 0 <= c < embed_table.value.shape[0]:
        raise ContractError(f"class index {c} outside embedding table")
    g = geometry_encode(ent.box, image_w, image_h)
    w = embed_table.tensor()[c]
    fused = nm.concat([nm.Tensor(ent.visual_feature), nm.Tensor(g), w])
    return f_e(fused)


def predicate_representation(e_i: nm.Tensor, e_j: nm.Tensor, union: nm.Tensor,
                             f_u: Linear, f_p: Linear) -> nm.Tensor:
    """Sum of the union-feature branch and the entity-pair branch."""
    return f_u(union) + f_p(nm.concat([e_i, e_j]))


def pair_entities(n_entities: int, max_pairs: int | None = None,
                  entity_scores: np.ndarray | None = None) -> list[tuple[int, int]]:
    """All ordered entity pairs (i, j), i != j, optionally pruned.

    With ``max_pairs`` set, pairs are ranked by the product of the two
    entities' top detection scores; ties fall back to (i, j) order so the
    result is deterministic.
    """
    if n_entities < 1:
        raise ContractError("need at least one entity")
    pairs = [(i, j) for i in range(n_entities) for j in range(n_entities) if i != j]
    if max_pairs is None or len(pairs) <= max_pairs:
        return pairs
    if entity_scores is None:
        scores = np.ones(n_entities)
    else:
        scores = np.asarray(entity_scores, dtype=float)
    ranked = sorted(pairs, key=lambda p: (-(scores[p[0]] * scores[p[1]]), p))
    return sorted(ranked[:max_pairs])


def build_frequency_prior(manifest: DatasetManifest, epsilon: float = 1e-3) -> FrequencyPrior:
    """Smoothed p(predicate | subject, object) counted over ground truth.

    Un-annotated ordered pairs count toward the background index, so the
    prior also encodes how often a class pair is related at all.
    """
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    ce = manifest.n_entity_classes
    cp = manifest.n_predicate_classes
    if not any(img.gt_triplets for img in manifest.images):
        raise ContractError("manifest has no ground-truth triplets")
    counts = np.zeros((ce, ce, cp + 1))
    for img in manifest.images:
        gt = img.gt_lookup()
        classes = img.gt_entity_classes
        n = len(img.entities)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                k = gt.get((i, j), cp)
                counts[classes[i], classes[j], k] += 1.0
    table = (counts + epsilon) / (counts.sum(axis=2, keepdims=True) + epsilon * (cp + 1))
    return FrequencyPrior(table)


# ---------------------------------------------------------------------------
# manifest (de)serialization — field names here are the wire format


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    images = []
    for img in manifest.images:
        rec = {
            "image_id": img.image_id,
            "width": img.width,
            "height": img.height,
            "entities": [
                {
                    "box": ent.box.as_list(),
                    "detected_class": ent.detected_class,
                    "class_simplex": ent.class_simplex.tolist(),
                    "visual_feature": ent.visual_feature.tolist(),
                }
                for ent in img.entities
            ],
            "gt_entity_classes": list(img.gt_entity_classes),
            "gt_triplets": [list(t) for t in img.gt_triplets],
        }
        if img.pair_features:
            rec["pair_features"] = [
                {"subject": i, "object": j, "feature": f.tolist()}
                for (i, j), f in sorted(img.pair_features.items())
            ]
        images.append(rec)
    out = {
        "classes_entity": list(manifest.classes_entity),
        "classes_predicate": list(manifest.classes_predicate),
        "images": images,
    }
    if manifest.group_cuts is not None:
        out["group_cuts"] = list(manifest.group_cuts)
    if manifest.predicate_groups is not None:
        out["predicate_groups"] = manifest.predicate_groups
    return out


def manifest_from_dict(data: dict) -> DatasetManifest:
    images = []
    for rec in data["images"]:
        entities = [
            EntityProposal(
                visual_feature=np.asarray(e["visual_feature"], dtype=float),
                box=BBox(*e["box"]),
                detected_class=int(e["detected_class"]),
                class_simplex=np.asarray(e["class_simplex"], dtype=float),
            )
            for e in rec["entities"]
        ]
        pair_features = {
            (int(p["subject"]), int(p["object"])): np.asarray(p["feature"], dtype=float)
            for p in rec.get("pair_features", [])
        }
        images.append(
            ImageRecord(
                image_id=int(rec["image_id"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                entities=entities,
                gt_entity_classes=[int(c) for c in rec["gt_entity_classes"]],
                gt_triplets=[tuple(t) for t in rec["gt_triplets"]],
                pair_features=pair_features,
            )
        )
    manifest = DatasetManifest(
        classes_entity=list(data["classes_entity"]),
        classes_predicate=list(data["classes_predicate"]),
        images=images,
        group_cuts=tuple(data["group_cuts"]) if "group_cuts" in data else None,
        predicate_groups=data.get("predicate_groups"),
    )
    manifest.validate()
    return manifest


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(manifest), fh)


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        return manifest_from_dict(json.load(fh))
