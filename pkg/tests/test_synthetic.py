import json

import numpy as np
import pytest

from bgnn import proposals as pr
from bgnn.errors import ContractError
from bgnn.synthetic import SyntheticConfig, generate_synthetic_dataset, zipf_weights


def test_determinism_byte_identical(tmp_path):
    config = SyntheticConfig(n_images=10, seed=123)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    pr.save_manifest(generate_synthetic_dataset(config), a)
    pr.save_manifest(generate_synthetic_dataset(config), b)
    assert a.read_bytes() == b.read_bytes()


def test_different_seeds_differ():
    m1 = generate_synthetic_dataset(SyntheticConfig(n_images=4, seed=1))
    m2 = generate_synthetic_dataset(SyntheticConfig(n_images=4, seed=2))
    assert pr.manifest_to_dict(m1) != pr.manifest_to_dict(m2)


def test_flat_exponent_gives_near_uniform_counts():
    config = SyntheticConfig(
        n_images=1200,
        n_entities_range=(4, 4),
        n_predicate_classes=6,
        longtail_exponent=0.0,
        n_triplets_range=(9, 9),
        seed=0,
    )
    manifest = generate_synthetic_dataset(config)
    counts = np.zeros(6)
    for img in manifest.images:
        for _, k, _ in img.gt_triplets:
            counts[k] += 1
    assert counts.sum() >= 10000
    assert counts.max() / counts.min() < 1.5


def test_zipf_head_frequencies_within_ten_percent():
    config = SyntheticConfig(
        n_images=1500,
        n_entities_range=(4, 4),
        n_predicate_classes=50,
        longtail_exponent=1.5,
        n_triplets_range=(8, 8),
        seed=7,
    )
    manifest = generate_synthetic_dataset(config)
    counts = np.zeros(50)
    for img in manifest.images:
        for _, k, _ in img.gt_triplets:
            counts[k] += 1
    freqs = counts / counts.sum()
    target = zipf_weights(50, 1.5)
    for k in range(4):  # head classes carry enough mass for a tight check
        assert abs(freqs[k] - target[k]) / target[k] < 0.10


def test_group_metadata_partitions_all_classes():
    manifest = generate_synthetic_dataset(SyntheticConfig(n_images=40, seed=3))
    groups = manifest.predicate_groups
    members = sorted(c for g in groups.values() for c in g)
    assert members == list(range(manifest.n_predicate_classes))
    assert groups["head"] and groups["tail"]


def test_infeasible_config_rejected():
    with pytest.raises(ContractError):
        generate_synthetic_dataset(
            SyntheticConfig(n_entities_range=(2, 3), n_triplets_range=(5, 6))
        )


def test_manifest_passes_validation_and_serializes(tmp_path):
    manifest = generate_synthetic_dataset(SyntheticConfig(n_images=6, seed=5))
    manifest.validate()
    path = tmp_path / "m.json"
    pr.save_manifest(manifest, path)
    loaded = pr.load_manifest(path)
    assert len(loaded.images) == 6
    data = json.loads(path.read_text())
    assert "predicate_groups" in data and "group_cuts" in data
