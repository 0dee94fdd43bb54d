"""Seeded synthetic scene-graph datasets with a power-law predicate tail.

Every entity class and predicate class owns a latent prototype vector;
visual and union features are noisy copies of those prototypes, so both
the classifiers and the relationship-confidence module have learnable
structure.  Un-annotated pairs draw their union features from a dedicated
background prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .metrics import partition_groups
from .proposals import BBox, DatasetManifest, EntityProposal, ImageRecord


@dataclass
class SyntheticConfig:
    n_images: int = 60
    n_entities_range: tuple[int, int] = (3, 6)
    n_entity_classes: int = 8
    n_predicate_classes: int = 12
    feature_dim: int = 16
    longtail_exponent: float = 1.5
    group_cuts: tuple[float, float] = (0.0, 0.0)  # (0, 0) means auto (see below)
    noise_sigma: float = 0.25
    seed: int = 0
    n_triplets_range: tuple[int, int] = (2, 5)
    detector_error_rate: float = 0.1
    background_alias: float = 0.0  # mix of a random foreground prototype into
    image_width: int = 640         # background pair features (0 = pure background)
    image_height: int = 480
    # scene-conditioned predicate co-occurrence: every image draws a latent
    # scene that boosts its own round-robin share of predicate classes, so
    # true neighbor relations genuinely inform each other (0 disables)
    n_scenes: int = 0
    scene_boost: float = 8.0

    def validate(self):
        lo, hi = self.n_entities_range
        if not (1 <= lo <= hi):
            raise ContractError("invalid n_entities_range")
        tlo, thi = self.n_triplets_range
        max_pairs = lo * (lo - 1)
        if tlo > max_pairs:
            raise ContractError(
                f"at least {tlo} triplets requested but the smallest image has "
                f"only {max_pairs} ordered pairs"
            )
        if tlo < 0 or thi < tlo:
            raise ContractError("invalid n_triplets_range")
        if self.longtail_exponent < 0:
            raise ContractError("longtail_exponent must be nonnegative")
        if self.n_images < 1 or self.n_entity_classes < 2 or self.n_predicate_classes < 2:
            raise ContractError("degenerate dataset size")


def zipf_weights(n_classes: int, exponent: float) -> np.ndarray:
    w = (np.arange(n_classes) + 1.0) ** (-exponent)
    return w / w.sum()


def _random_box(rng: np.random.Generator, width: int, height: int) -> BBox:
    w = rng.uniform(0.1, 0.6) * width
    h = rng.uniform(0.1, 0.6) * height
    x1 = rng.uniform(0, width - w)
    y1 = rng.uniform(0, height - h)
    return BBox(x1, y1, x1 + w, y1 + h)


def generate_synthetic_dataset(config: SyntheticConfig) -> DatasetManifest:
    config.validate()
    rng = np.random.default_rng(config.seed)
    ce, cp, dim = config.n_entity_classes, config.n_predicate_classes, config.feature_dim

    entity_proto = rng.normal(size=(ce, dim))
    predicate_proto = rng.normal(size=(cp, dim))
    background_proto = rng.normal(size=dim)
    class_weights = zipf_weights(cp, config.longtail_exponent)
    scene_weights = None
    if config.n_scenes > 0:
        scene_weights = []
        for s in range(config.n_scenes):
            boosted = class_weights * np.where(
                np.arange(cp) % config.n_scenes == s, config.scene_boost, 1.0)
            scene_weights.append(boosted / boosted.sum())

    images = []
    predicate_counts = np.zeros(cp)
    for image_id in range(config.n_images):
        n_ent = int(rng.integers(config.n_entities_range[0], config.n_entities_range[1] + 1))
        gt_classes = rng.integers(0, ce, size=n_ent).tolist()

        entities = []
        for c in gt_classes:
            detected = c
            if rng.uniform() < config.detector_error_rate:
                detected = int(rng.integers(0, ce))
            logits = rng.normal(scale=0.5, size=ce)
            logits[detected] += 4.0
            simplex = np.exp(logits - logits.max())
            simplex /= simplex.sum()
            detected = int(np.argmax(simplex))
            entities.append(
                EntityProposal(
                    visual_feature=entity_proto[c] + config.noise_sigma * rng.normal(size=dim),
                    box=_random_box(rng, config.image_width, config.image_height),
                    detected_class=detected,
                    class_simplex=simplex,
                )
            )

        all_pairs = [(i, j) for i in range(n_ent) for j in range(n_ent) if i != j]
        lo, hi = config.n_triplets_range
        n_trip = int(rng.integers(lo, min(hi, len(all_pairs)) + 1))
        chosen = rng.choice(len(all_pairs), size=n_trip, replace=False)
        if scene_weights is None:
            image_weights = class_weights
        else:
            image_weights = scene_weights[int(rng.integers(0, config.n_scenes))]
        gt_triplets = []
        gt_pairs = set()
        for idx in sorted(int(c) for c in chosen):
            i, j = all_pairs[idx]
            k = int(rng.choice(cp, p=image_weights))
            gt_triplets.append((i, k, j))
            gt_pairs.add((i, j))
            predicate_counts[k] += 1

        pair_features = {}
        for i, j in all_pairs:
            gt_k = next((k for s, k, o in gt_triplets if (s, o) == (i, j)), None)
            if gt_k is not None:
                proto = predicate_proto[gt_k]
            elif config.background_alias > 0.0:
                # unrelated pairs that still look like plausible relations
                alias = predicate_proto[int(rng.integers(0, cp))]
                proto = ((1.0 - config.background_alias) * background_proto
                         + config.background_alias * alias)
            else:
                proto = background_proto
            pair_features[(i, j)] = proto + config.noise_sigma * rng.normal(size=dim)

        images.append(
            ImageRecord(
                image_id=image_id,
                width=config.image_width,
                height=config.image_height,
                entities=entities,
                gt_entity_classes=gt_classes,
                gt_triplets=gt_triplets,
                pair_features=pair_features,
            )
        )

    cuts = config.group_cuts
    if cuts == (0.0, 0.0):
        # auto cuts: split generated counts at 60% / 15% of the most frequent class
        top = predicate_counts.max()
        cuts = (0.6 * top, 0.15 * top)
    partition = partition_groups(predicate_counts, cuts=cuts)
    groups = {g: partition.classes_in(g) for g in ("head", "body", "tail")}

    manifest = DatasetManifest(
        classes_entity=[f"entity_{i:02d}" for i in range(ce)],
        classes_predicate=[f"predicate_{i:02d}" for i in range(cp)],
        images=images,
        group_cuts=cuts,
        predicate_groups=groups,
    )
    manifest.validate()
    return manifest
