"""Decode refined node features into class distributions and a ranked
scene graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ContractError, DimensionError, DomainError

DECODE_MODES = ("graph_constraint", "no_constraint")


@dataclass
class SceneGraphPrediction:
    entity_probs: list[np.ndarray]  # per entity, over C_e
    predicate_probs: list[np.ndarray]  # per pair, over C_p + 1 (background last)
    pairs: list[tuple[int, int]]
    ranked_triplets: list[tuple[int, int, int, float]]  # (subj, predicate, obj, score)


def predict_predicates(r_hat: nm.Tensor, rel_classifier: nm.Parameter,
                       prior_slice: np.ndarray) -> nm.Tensor:
    """softmax of the class logits shifted by the log frequency prior."""
    prior_slice = np.asarray(prior_slice, dtype=float)
    if prior_slice.min() <= 0.0:
        raise DomainError("frequency prior must be strictly positive")
    logits = nm.matmul(r_hat, rel_classifier.tensor()) + nm.log(nm.Tensor(prior_slice))
    return nm.softmax(logits)


def predict_entities(e_hat: nm.Tensor, visual: nm.Tensor, ent_classifier: nm.Parameter,
                     rho_raw) -> nm.Tensor:
    """Classify an entity from a sigmoid-weighted blend of its refined and
    initial features; ``visual`` must already be projected to e_hat's size."""
    if visual.shape != e_hat.shape:
        raise DimensionError(
            f"visual feature shape {visual.shape} does not match refined {e_hat.shape}")
    rho = nm.sigmoid(nm.as_tensor(rho_raw))
    fused = rho * e_hat + (1.0 - rho) * visual
    return nm.softmax(nm.matmul(fused, ent_classifier.tensor()))


def decode_scene_graph(entity_probs: list[np.ndarray], predicate_probs: list[np.ndarray],
                       pairs: list[tuple[int, int]], mode: str = "graph_constraint",
                       k: int = 100) -> list[tuple[int, int, int, float]]:
    """Rank <subject, predicate, object> triplets by probability product.

    The background class (last index) is never emitted.  Under the graph
    constraint a pair contributes its best foreground predicate, and
    nothing at all when background is the pair's overall argmax; without
    the constraint every foreground class of every pair is a candidate.
    Ties break on (subject, object, predicate) order.
    """
    if mode not in DECODE_MODES:
        raise ContractError(f"unknown decode mode {mode!r}")
    if len(predicate_probs) != len(pairs):
        raise ContractError("one predicate distribution per pair")
    entity_classes = [int(np.argmax(p)) for p in entity_probs]
    entity_scores = [float(p[c]) for p, c in zip(entity_probs, entity_classes)]
    candidates = []
    for (i, j), probs in zip(pairs, predicate_probs):
        n_fg = len(probs) - 1
        if mode == "graph_constraint":
            if int(np.argmax(probs)) == n_fg:
                continue
            classes = [int(np.argmax(probs[:n_fg]))]
        else:
            classes = range(n_fg)
        for c in classes:
            score = entity_scores[i] * float(probs[c]) * entity_scores[j]
            candidates.append((i, c, j, score))
    candidates.sort(key=lambda t: (-t[3], t[0], t[2], t[1]))
    return candidates[:k]
