"""Multitask training objective: classification cross-entropies, focal
confidence losses (positives-only by default, symmetric form optional),
and the multi-template relatedness BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .errors import ContractError

SCORE_CLAMP = (1e-7, 1.0 - 1e-7)
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_rce: float = 1.0
    lambda_e: float = 1.0
    lambda_b: float = 1.0
    alpha_f: float = 0.25
    gamma_f: float = 2.0
    rce_full_focal: bool = False

    def validate(self):
        for name in ("lambda_rce", "lambda_e", "lambda_b", "alpha_f", "gamma_f"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")


def cross_entropy(probs: nm.Tensor, target: int) -> nm.Tensor:
    """-log p[target] on an already-normalized distribution, floored."""
    if not 0 <= target < probs.shape[-1]:
        raise ContractError(f"target {target} out of range for {probs.shape}")
    return -nm.log(nm.clip(probs[target], PROB_FLOOR, None))


def focal_multi(class_scores: nm.Tensor, target: np.ndarray, alpha_f: float,
                gamma_f: float, full_focal: bool = False) -> nm.Tensor:
    """Focal loss over independent per-class confidences for one proposal.

    ``target`` is one-hot for annotated proposals and all-zero for
    background ones; with the default positives-only form, background
    proposals contribute exactly zero.  ``full_focal`` adds the symmetric
    negative term weighted by (1 - alpha_f).
    """
    target = np.asarray(target, dtype=float)
    if target.shape != class_scores.shape:
        raise ContractError("target mask shape mismatch")
    s = nm.clip(class_scores, *SCORE_CLAMP)
    y = nm.Tensor(target)
    pos = nm.tsum(y * nm.power(1.0 - s, gamma_f) * nm.log(s))
    loss = -alpha_f * pos
    if full_focal:
        neg = nm.tsum((1.0 - y) * nm.power(s, gamma_f) * nm.log(1.0 - s))
        loss = loss - (1.0 - alpha_f) * neg
    return loss


def focal_binary(fused_score: nm.Tensor, positive: int, alpha_f: float,
                 gamma_f: float, full_focal: bool = False) -> nm.Tensor:
    """Focal loss on the fused relatedness scalar of one proposal."""
    if positive not in (0, 1):
        raise ContractError("binary label must be 0 or 1")
    s = nm.clip(fused_score, *SCORE_CLAMP)
    if positive:
        return -alpha_f * nm.power(1.0 - s, gamma_f) * nm.log(s)
    if full_focal:
        return -(1.0 - alpha_f) * nm.power(s, gamma_f) * nm.log(1.0 - s)
    return nm.Tensor(0.0)


def total_loss(predicate_loss: nm.Tensor, entity_loss: nm.Tensor,
               stage_multi_losses: Sequence[nm.Tensor],
               stage_binary_losses: Sequence[nm.Tensor],
               weights: LossWeights) -> nm.Tensor:
    """L_p + lambda_rce * sum_stages(L_m + lambda_b * L_b) + lambda_e * L_e."""
    if len(stage_multi_losses) != len(stage_binary_losses):
        raise ContractError("one multi-class and one binary confidence loss per stage")
    loss = predicate_loss + weights.lambda_e * entity_loss
    for l_m, l_b in zip(stage_multi_losses, stage_binary_losses):
        loss = loss + weights.lambda_rce * (l_m + weights.lambda_b * l_b)
    return loss


def bce_relatedness(template_scores: nm.Tensor, target: np.ndarray) -> nm.Tensor:
    """Two-sided binary cross-entropy over the multi-template scores of one
    proposal; ``target`` is multi-hot over the C_p + 1 templates."""
    target = np.asarray(target, dtype=float)
    if target.shape != template_scores.shape:
        raise ContractError("target mask shape mismatch")
    s = nm.clip(template_scores, *SCORE_CLAMP)
    y = nm.Tensor(target)
    return -nm.tsum(y * nm.log(s) + (1.0 - y) * nm.log(1.0 - s))


def batch_mean(losses: Sequence[nm.Tensor]) -> nm.Tensor:
    """Fixed-order mean of per-item losses; empty batches contribute zero."""
    if not losses:
        return nm.Tensor(0.0)
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses))


# batched forms: mathematically the per-item mean, computed on stacked rows
# so a whole proposal set costs a handful of tape nodes


def cross_entropy_batch(prob_rows: Sequence[nm.Tensor], targets: Sequence[int]) -> nm.Tensor:
    if not prob_rows:
        return nm.Tensor(0.0)
    if len(prob_rows) != len(targets):
        raise ContractError("one target per probability row")
    n_classes = prob_rows[0].shape[-1]
    for t in targets:
        if not 0 <= t < n_classes:
            raise ContractError(f"target {t} out of range")
    stacked = nm.stack(prob_rows)
    picked = stacked[np.arange(len(targets)), np.asarray(targets, dtype=int)]
    return -nm.tmean(nm.log(nm.clip(picked, PROB_FLOOR, None)))


def focal_multi_batch(score_rows: Sequence[nm.Tensor], target_matrix: np.ndarray,
                      alpha_f: float, gamma_f: float,
                      full_focal: bool = False) -> nm.Tensor:
    if not score_rows:
        return nm.Tensor(0.0)
    s = nm.clip(nm.stack(score_rows), *SCORE_CLAMP)
    y = nm.Tensor(np.asarray(target_matrix, dtype=float))
    inv = 1.0 / len(score_rows)
    pos = nm.tsum(y * nm.power(1.0 - s, gamma_f) * nm.log(s))
    loss = -alpha_f * inv * pos
    if full_focal:
        neg = nm.tsum((1.0 - y) * nm.power(s, gamma_f) * nm.log(1.0 - s))
        loss = loss - (1.0 - alpha_f) * inv * neg
    return loss


def focal_binary_batch(fused_scores: Sequence[nm.Tensor], labels: Sequence[int],
                       alpha_f: float, gamma_f: float,
                       full_focal: bool = False) -> nm.Tensor:
    if not fused_scores:
        return nm.Tensor(0.0)
    s = nm.clip(nm.stack(fused_scores), *SCORE_CLAMP)
    y = nm.Tensor(np.asarray(labels, dtype=float))
    inv = 1.0 / len(fused_scores)
    loss = -alpha_f * inv * nm.tsum(y * nm.power(1.0 - s, gamma_f) * nm.log(s))
    if full_focal:
        neg = nm.tsum((1.0 - y) * nm.power(s, gamma_f) * nm.log(1.0 - s))
        loss = loss - (1.0 - alpha_f) * inv * neg
    return loss


def bce_relatedness_batch(score_rows: Sequence[nm.Tensor],
                          target_matrix: np.ndarray) -> nm.Tensor:
    if not score_rows:
        return nm.Tensor(0.0)
    s = nm.clip(nm.stack(score_rows), *SCORE_CLAMP)
    y = nm.Tensor(np.asarray(target_matrix, dtype=float))
    total = nm.tsum(y * nm.log(s) + (1.0 - y) * nm.log(1.0 - s))
    return -(1.0 / len(score_rows)) * total
