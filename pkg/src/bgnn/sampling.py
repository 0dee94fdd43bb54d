"""Bi-level resampling: repeat-factor oversampling of images composed
with per-copy drop-out of over-represented predicate instances.

A plan realizes one epoch: every image appears floor(r_i) times plus one
stochastically rounded extra copy, and every copy carries its own
keep/drop realization over the image's ground-truth predicates.  Plans
are pure functions of (manifest, t, gamma_d, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .proposals import DatasetManifest


@dataclass
class ClassFrequency:
    """Per-predicate-class fraction of training images containing it."""

    fractions: np.ndarray

    @staticmethod
    def from_manifest(manifest: DatasetManifest) -> "ClassFrequency":
        n_images = len(manifest.images)
        if n_images == 0:
            raise ContractError("empty manifest")
        counts = np.zeros(manifest.n_predicate_classes)
        for img in manifest.images:
            for k in {k for _, k, _ in img.gt_triplets}:
                counts[k] += 1
        return ClassFrequency(fractions=counts / n_images)


@dataclass
class EpochCopy:
    image_index: int
    keep_instance: list[bool]  # aligned with the image's gt_triplets


@dataclass
class SamplerPlan:
    seed: int
    repeat_counts: list[int]  # realized copies per image, aligned with manifest
    copies: list[EpochCopy] = field(default_factory=list)


def repeat_factor(f_c: float, t: float) -> float:
    """max(1, sqrt(t / f_c)): how often images holding class c recur."""
    if f_c <= 0 or t <= 0:
        raise DomainError("repeat factor needs positive frequency and threshold")
    return max(1.0, np.sqrt(t / f_c))


def image_repeat(image_classes, r_table: np.ndarray) -> float:
    """Image-level repeat: the max class repeat present; 1 with no GT."""
    present = set(image_classes)
    if not present:
        return 1.0
    return max(float(r_table[c]) for c in present)


def instance_drop_rate(r_i: float, r_c: float, gamma_d: float,
                       strict_formula: bool = False) -> float:
    """Drop probability for instances of class c inside an image repeated r_i
    times.  The default clamps into [0, 1]; ``strict_formula`` keeps the
    published max(..., 1.0) form verbatim, which drops everything."""
    if r_i <= 0:
        raise DomainError("image repeat must be positive")
    raw = (r_i - r_c) / r_i * gamma_d
    if strict_formula:
        return max(raw, 1.0)
    return min(max(raw, 0.0), 1.0)


def build_epoch(manifest: DatasetManifest, t: float, gamma_d: float, seed: int,
                strict_drop_formula: bool = False) -> SamplerPlan:
    """Realize one epoch of the two-level sampling for the whole manifest."""
    if not manifest.images:
        raise ContractError("empty manifest")
    freq = ClassFrequency.from_manifest(manifest)
    r_table = np.array(
        [repeat_factor(f, t) if f > 0 else 1.0 for f in freq.fractions])
    rng = np.random.default_rng(seed)
    plan = SamplerPlan(seed=seed, repeat_counts=[])
    for idx, img in enumerate(manifest.images):
        classes = [k for _, k, _ in img.gt_triplets]
        r_i = image_repeat(classes, r_table)
        n_copies = int(np.floor(r_i))
        if rng.uniform() < r_i - n_copies:
            n_copies += 1
        plan.repeat_counts.append(n_copies)
        drop = np.array([
            instance_drop_rate(r_i, float(r_table[k]), gamma_d, strict_drop_formula)
            for k in classes
        ])
        for _ in range(n_copies):
            keep = (rng.uniform(size=len(drop)) >= drop).tolist()
            plan.copies.append(EpochCopy(image_index=idx, keep_instance=keep))
    return plan


def effective_counts(manifest: DatasetManifest, plan: SamplerPlan) -> np.ndarray:
    """Per-class surviving instance count realized by one plan."""
    counts = np.zeros(manifest.n_predicate_classes)
    for copy in plan.copies:
        triplets = manifest.images[copy.image_index].gt_triplets
        for (_, k, _), kept in zip(triplets, copy.keep_instance):
            if kept:
                counts[k] += 1
    return counts


def expected_effective_counts(manifest: DatasetManifest, t: float,
                              gamma_d: float) -> np.ndarray:
    """Closed-form expectation r_i * (1 - d^c_i) summed over instances."""
    freq = ClassFrequency.from_manifest(manifest)
    r_table = np.array(
        [repeat_factor(f, t) if f > 0 else 1.0 for f in freq.fractions])
    expect = np.zeros(manifest.n_predicate_classes)
    for img in manifest.images:
        classes = [k for _, k, _ in img.gt_triplets]
        r_i = image_repeat(classes, r_table)
        for k in classes:
            d = instance_drop_rate(r_i, float(r_table[k]), gamma_d)
            expect[k] += r_i * (1.0 - d)
    return expect
