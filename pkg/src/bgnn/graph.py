"""Bipartite entity/predicate graph with confidence-gated message passing.

One refinement stage estimates a relationship confidence per predicate
node, squashes it through a trainable piecewise-linear gate, and then
alternates entity-to-predicate and predicate-to-entity updates for a
fixed number of iterations.  Stages stack, each re-estimating confidence
on the features the previous stage produced.

Updates are Jacobi-style: within an iteration every entity-to-predicate
message reads the iteration-entry snapshot, and every predicate-to-entity
message reads the freshly updated predicate nodes, so results do not
depend on node order.  Edges whose gate is exactly zero are treated as
removed from the topology: they drop out of the neighbor-mean denominator
as well as the numerator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ContractError, DimensionError, DomainError
from .layers import Linear

GATING_MODES = ("confidence", "linear_combo", "hard_topk", "off")


@dataclass
class BipartiteGraph:
    entity_nodes: list[nm.Tensor]
    predicate_nodes: list[nm.Tensor]
    pairs: list[tuple[int, int]]
    entity_simplices: list[np.ndarray]
    subject_neighbors: list[list[int]] = field(init=False)
    object_neighbors: list[list[int]] = field(init=False)

    def __post_init__(self):
        if len(self.predicate_nodes) != len(self.pairs):
            raise ContractError("one (subject, object) pair per predicate node")
        if len(set(self.pairs)) != len(self.pairs):
            raise ContractError("duplicate predicate pair")
        n = len(self.entity_nodes)
        b_s = [[] for _ in range(n)]
        b_o = [[] for _ in range(n)]
        for k, (i, j) in enumerate(self.pairs):
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"bad pair ({i}, {j})")
            b_s[i].append(k)
            b_o[j].append(k)
        self.subject_neighbors = b_s
        self.object_neighbors = b_o


@dataclass
class ConfidenceEstimate:
    """Per-predicate class confidences and their fused scalar."""

    class_scores: nm.Tensor  # (C_p,), each in (0, 1)
    fused: nm.Tensor  # scalar in (0, 1)


@dataclass
class GatingConfig:
    mode: str = "confidence"
    log_alpha: nm.Parameter | None = None
    beta: nm.Parameter | None = None
    top_n: int = 8
    relness_prob_weight: nm.Parameter | None = None  # linear-combo coefficient on d_rel_prob
    relness_score_weight: nm.Parameter | None = None  # linear-combo coefficient on log score

    @staticmethod
    def create(mode: str = "confidence", alpha_init: float = 2.2, beta_init: float = 0.025,
               top_n: int = 8) -> "GatingConfig":
        if mode not in GATING_MODES:
            raise ContractError(f"unknown gating mode {mode!r}")
        cfg = GatingConfig(mode=mode, top_n=top_n)
        cfg.log_alpha = nm.Parameter(math.log(alpha_init), "gating.log_alpha")
        cfg.beta = nm.Parameter(beta_init, "gating.beta")
        if mode == "linear_combo":
            cfg.relness_prob_weight = nm.Parameter(1.0, "gating.relness_prob_weight")
            cfg.relness_score_weight = nm.Parameter(1.0, "gating.relness_score_weight")
        return cfg

    def parameters(self) -> list[nm.Parameter]:
        out = []
        if self.mode == "confidence":
            out += [self.log_alpha, self.beta]
        elif self.mode == "linear_combo":
            out += [self.relness_prob_weight, self.relness_score_weight]
        return out


@dataclass
class StageParams:
    """Weights of one refinement stage, shared across its iterations."""

    msg_to_predicate: nm.Parameter  # (D_e, D_r)
    msg_to_entity: nm.Parameter  # (D_r, D_e)
    subject_affinity: nm.Parameter  # (D_r + D_e,)
    object_affinity: nm.Parameter  # (D_r + D_e,)
    confidence_hidden: Linear  # (D_r + 2*C_e) -> H, relu
    confidence_out: Linear  # H -> C_p
    confidence_fuse: nm.Parameter  # (C_p,)
    n_iterations: int = 3
    gate_entity_proj: nm.Parameter | None = None  # linear-combo feature gate, entity side
    gate_pred_proj: nm.Parameter | None = None  # linear-combo feature gate, predicate side
    gate_prob_proj: nm.Parameter | None = None  # linear-combo weights on class confidences

    @staticmethod
    def create(d_entity: int, d_predicate: int, n_entity_classes: int,
               n_predicate_classes: int, d_hidden: int, n_iterations: int,
               rng: np.random.Generator, name: str,
               linear_combo: bool = False, d_gate: int = 8) -> "StageParams":
        from .layers import glorot

        sp = StageParams(
            msg_to_predicate=nm.Parameter(glorot(rng, d_entity, d_predicate),
                                          f"{name}.msg_to_predicate"),
            msg_to_entity=nm.Parameter(glorot(rng, d_predicate, d_entity),
                                       f"{name}.msg_to_entity"),
            subject_affinity=nm.Parameter(
                rng.normal(scale=0.1, size=d_predicate + d_entity), f"{name}.subject_affinity"),
            object_affinity=nm.Parameter(
                rng.normal(scale=0.1, size=d_predicate + d_entity), f"{name}.object_affinity"),
            confidence_hidden=Linear(d_predicate + 2 * n_entity_classes, d_hidden,
                                     f"{name}.confidence_hidden", rng, activation="relu"),
            confidence_out=Linear(d_hidden, n_predicate_classes,
                                  f"{name}.confidence_out", rng),
            confidence_fuse=nm.Parameter(rng.normal(scale=0.1, size=n_predicate_classes),
                                         f"{name}.confidence_fuse"),
            n_iterations=n_iterations,
        )
        if linear_combo:
            sp.gate_entity_proj = nm.Parameter(glorot(rng, d_entity, d_gate),
                                               f"{name}.gate_entity_proj")
            sp.gate_pred_proj = nm.Parameter(glorot(rng, d_predicate, d_gate),
                                             f"{name}.gate_pred_proj")
            sp.gate_prob_proj = nm.Parameter(rng.normal(scale=0.1, size=n_predicate_classes),
                                             f"{name}.gate_prob_proj")
        return sp

    def parameters(self) -> list[nm.Parameter]:
        out = [self.msg_to_predicate, self.msg_to_entity,
               self.subject_affinity, self.object_affinity]
        out += self.confidence_hidden.parameters()
        out += self.confidence_out.parameters()
        out.append(self.confidence_fuse)
        for p in (self.gate_entity_proj, self.gate_pred_proj, self.gate_prob_proj):
            if p is not None:
                out.append(p)
        return out


# ---------------------------------------------------------------------------
# relationship confidence estimation


def rce_forward(r: nm.Tensor, p_i, p_j, confidence_hidden: Linear,
                confidence_out: Linear, confidence_fuse: nm.Parameter) -> ConfidenceEstimate:
    """Score each predicate class for one proposal and fuse into one scalar."""
    x = nm.concat([r, nm.as_tensor(p_i), nm.as_tensor(p_j)])
    class_scores = nm.sigmoid(confidence_out(confidence_hidden(x)))
    fused = nm.sigmoid(nm.matmul(confidence_fuse.tensor(), class_scores))
    return ConfidenceEstimate(class_scores=class_scores, fused=fused)


# ---------------------------------------------------------------------------
# gating


def gate(s_b, alpha, beta) -> nm.Tensor:
    """Piecewise-linear squashing: hard zero below beta, hard one above
    1/alpha + beta, linear in between.  At both kinks the derivative of
    the linear segment is used, keeping alpha and beta trainable."""
    s_b, alpha, beta = nm.as_tensor(s_b), nm.as_tensor(alpha), nm.as_tensor(beta)
    return nm.clip(alpha * (s_b - beta), 0.0, 1.0, closed=True)


def hard_topk_prune(scores, top_n: int) -> list[bool]:
    """Keep-mask over predicates: top N by score, ties to the lower index."""
    if top_n < 0:
        raise ContractError("top_n must be nonnegative")
    order = sorted(range(len(scores)), key=lambda k: (-float(scores[k]), k))
    keep = [False] * len(scores)
    for k in order[:top_n]:
        keep[k] = True
    return keep


def linear_combo_gate(d_feat, d_rel_prob, s_relness, relness_prob_weight,
                      relness_score_weight) -> nm.Tensor:
    """Sigmoid of a learnable linear mix of feature affinity, class
    confidence projection, and log relatedness score."""
    return nm.sigmoid(
        nm.as_tensor(d_feat)
        + nm.as_tensor(relness_prob_weight) * nm.as_tensor(d_rel_prob)
        + nm.as_tensor(relness_score_weight) * nm.as_tensor(s_relness)
    )


def relatedness_log_score(s_k) -> nm.Tensor:
    """log of a relatedness score in (0, 1], floored at 1e-6."""
    s_k = nm.as_tensor(s_k)
    if float(s_k.data) <= 0.0:
        raise DomainError("relatedness score must be positive")
    return nm.log(nm.clip(s_k, 1e-6, None))


# ---------------------------------------------------------------------------
# message updates
#
# These are single fused tape nodes (hand-written vector-Jacobian closures)
# rather than compositions of primitive ops: one stage touches every
# predicate a dozen times per iteration and the node count dominates the
# runtime of both training and the finite-difference harness.


def _leaf(p) -> nm.Tensor:
    return p.tensor() if isinstance(p, nm.Parameter) else p


def _scalar_sigmoid(pre: float) -> float:
    if pre >= 0.0:
        return 1.0 / (1.0 + math.exp(-pre))
    ex = math.exp(pre)
    return ex / (1.0 + ex)


def _affinity(weights: nm.Tensor, r: nm.Tensor, e: nm.Tensor) -> nm.Tensor:
    wd, rd, ed = weights.data, r.data, e.data
    n = rd.shape[0]
    if wd.shape[0] != n + ed.shape[0]:
        raise DimensionError("affinity weight length mismatch")
    s = _scalar_sigmoid(float(wd[:n] @ rd + wd[n:] @ ed))

    def vjp(g):
        gpre = float(g) * s * (1.0 - s)
        return (
            np.concatenate([rd * gpre, ed * gpre]),
            wd[:n] * gpre,
            wd[n:] * gpre,
        )

    return nm.custom(s, (weights, r, e), vjp)


def predicate_affinities(r: nm.Tensor, e_i: nm.Tensor, e_j: nm.Tensor,
                         subject_affinity, object_affinity) -> tuple[nm.Tensor, nm.Tensor]:
    """Scalar attention of a predicate to its subject and object entities:
    sigmoid(w · [r ⊕ e])."""
    d_s = _affinity(_leaf(subject_affinity), r, e_i)
    d_o = _affinity(_leaf(object_affinity), r, e_j)
    return d_s, d_o


def e2p_update(r: nm.Tensor, e_i: nm.Tensor, e_j: nm.Tensor,
               msg_to_predicate, subject_affinity=None, object_affinity=None,
               affinities: tuple[nm.Tensor, nm.Tensor] | None = None) -> nm.Tensor:
    """Residual predicate update from its two entity endpoints:
    r + relu(d_s W^T e_i + d_o W^T e_j)."""
    w = _leaf(msg_to_predicate)
    if e_i.shape != e_j.shape or e_i.shape[0] != w.data.shape[0]:
        raise DimensionError("entity feature dimension mismatch")
    if affinities is None:
        affinities = predicate_affinities(r, e_i, e_j, subject_affinity, object_affinity)
    d_s, d_o = affinities

    wd, eid, ejd = w.data, e_i.data, e_j.data
    ds, do = float(d_s.data), float(d_o.data)
    m_i = eid @ wd
    m_j = ejd @ wd
    pre = ds * m_i + do * m_j
    mask = pre > 0.0
    out = r.data + np.where(mask, pre, 0.0)

    def vjp(g):
        grelu = g * mask
        return (
            g,
            np.float64(grelu @ m_i),
            np.float64(grelu @ m_j),
            ds * (wd @ grelu),
            do * (wd @ grelu),
            np.outer(eid, grelu) * ds + np.outer(ejd, grelu) * do,
        )

    return nm.custom(out, (r, d_s, d_o, e_i, e_j, w), vjp)


def p2e_update(e: nm.Tensor, subject_preds: list[int], object_preds: list[int],
               gammas_subject: list[nm.Tensor], gammas_object: list[nm.Tensor],
               d_subject: list[nm.Tensor], d_object: list[nm.Tensor],
               predicates: list[nm.Tensor], msg_to_entity,
               projections: list[nm.Tensor] | None = None) -> nm.Tensor:
    """Residual entity update from gated means of incident predicate messages.

    Predicates whose gate is exactly zero count as removed: they are
    excluded from both the sum and the mean denominator.  An entity with
    no active neighbors on either side is returned unchanged.
    ``projections`` may carry precomputed W^T r_k rows (one per predicate).
    """
    w = _leaf(msg_to_entity)
    if projections is None:
        projections = [None] * len(predicates)

    sides = []
    for members, gammas, d_vals in (
        (subject_preds, gammas_subject, d_subject),
        (object_preds, gammas_object, d_object),
    ):
        active = [k for k in members if float(gammas[k].data) > 0.0]
        if active:
            sides.append((active, gammas, d_vals))
    if not sides:
        return e

    edges = []  # (gamma node, d node, projection node, 1/side count)
    for active, gammas, d_vals in sides:
        inv = 1.0 / len(active)
        for k in active:
            proj = projections[k]
            if proj is None:
                proj = nm.matmul(predicates[k], w)
                projections[k] = proj
            edges.append((gammas[k], d_vals[k], proj, inv))

    total = None
    coeffs = []
    for gamma, d_val, proj, inv in edges:
        coeff = float(gamma.data) * float(d_val.data) * inv
        coeffs.append(coeff)
        contrib = coeff * proj.data
        total = contrib if total is None else total + contrib
    mask = total > 0.0
    out = e.data + np.where(mask, total, 0.0)

    parents = [e]
    for gamma, d_val, proj, _ in edges:
        parents += [gamma, d_val, proj]

    def vjp(g):
        grelu = g * mask
        grads = [g]
        for (gamma, d_val, proj, inv), coeff in zip(edges, coeffs):
            shared = grelu @ proj.data
            grads.append(np.float64(shared * float(d_val.data) * inv))
            grads.append(np.float64(shared * float(gamma.data) * inv))
            grads.append(coeff * grelu)
        return tuple(grads)

    return nm.custom(out, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# stage and full network


def _stage_rce(graph: BipartiteGraph, params: StageParams) -> list[ConfidenceEstimate]:
    out = []
    for k, (i, j) in enumerate(graph.pairs):
        out.append(
            rce_forward(
                graph.predicate_nodes[k],
                graph.entity_simplices[i],
                graph.entity_simplices[j],
                params.confidence_hidden,
                params.confidence_out,
                params.confidence_fuse,
            )
        )
    return out


def _derive_gammas(graph: BipartiteGraph, estimates: list[ConfidenceEstimate],
                   gating: GatingConfig, params: StageParams,
                   gamma_override: dict[int, float] | None):
    """Per-edge gates plus the e2p keep-mask for the current iteration."""
    m = len(graph.pairs)
    keep = [True] * m
    if gating.mode == "off":
        gs = [nm.Tensor(1.0)] * m
        gammas_s, gammas_o = gs, gs
    elif gating.mode == "confidence":
        alpha = nm.exp(gating.log_alpha.tensor())
        beta = gating.beta.tensor()
        gs = [gate(est.fused, alpha, beta) for est in estimates]
        gammas_s, gammas_o = gs, gs
    elif gating.mode == "hard_topk":
        keep = hard_topk_prune([float(est.fused.data) for est in estimates], gating.top_n)
        gs = [nm.Tensor(1.0 if keep[k] else 0.0) for k in range(m)]
        gammas_s, gammas_o = gs, gs
    elif gating.mode == "linear_combo":
        gammas_s, gammas_o = [], []
        w_ent = params.gate_entity_proj.tensor()
        w_pred = params.gate_pred_proj.tensor()
        w_prob = params.gate_prob_proj.tensor()
        for k, (i, j) in enumerate(graph.pairs):
            proj_pred = nm.matmul(graph.predicate_nodes[k], w_pred)
            d_rel_prob = nm.matmul(w_prob, estimates[k].class_scores)
            s_relness = relatedness_log_score(estimates[k].fused)
            for store, ent in ((gammas_s, i), (gammas_o, j)):
                d_feat = nm.matmul(nm.matmul(graph.entity_nodes[ent], w_ent), proj_pred)
                store.append(
                    linear_combo_gate(
                        d_feat, d_rel_prob, s_relness,
                        gating.relness_prob_weight.tensor(),
                        gating.relness_score_weight.tensor(),
                    )
                )
    else:
        raise ContractError(f"unknown gating mode {gating.mode!r}")
    if gamma_override:
        gammas_s, gammas_o = list(gammas_s), list(gammas_o)
        for k, value in gamma_override.items():
            gammas_s[k] = nm.Tensor(float(value))
            gammas_o[k] = nm.Tensor(float(value))
            if value == 0.0:
                keep[k] = False
    return gammas_s, gammas_o, keep


def run_stage(graph: BipartiteGraph, params: StageParams, gating: GatingConfig,
              rce_per_iteration: bool = False,
              gamma_override: dict[int, float] | None = None,
              ) -> tuple[BipartiteGraph, list[ConfidenceEstimate]]:
    """One refinement stage: confidence estimation, gating, N_i sweeps."""
    if params.n_iterations < 1:
        raise ContractError("a stage needs at least one iteration")
    estimates = [] if gating.mode == "off" else _stage_rce(graph, params)
    for it in range(params.n_iterations):
        if rce_per_iteration and it > 0 and gating.mode != "off":
            estimates = _stage_rce(graph, params)
        gammas_s, gammas_o, keep = _derive_gammas(
            graph, estimates, gating, params, gamma_override)

        entities = graph.entity_nodes
        predicates = graph.predicate_nodes
        w_to_pred = params.msg_to_predicate.tensor()
        w_subject = params.subject_affinity.tensor()
        w_object = params.object_affinity.tensor()
        new_predicates = []
        d_subject, d_object = [], []
        for k, (i, j) in enumerate(graph.pairs):
            aff = predicate_affinities(
                predicates[k], entities[i], entities[j], w_subject, w_object)
            d_subject.append(aff[0])
            d_object.append(aff[1])
            if keep[k]:
                new_predicates.append(
                    e2p_update(predicates[k], entities[i], entities[j],
                               w_to_pred, affinities=aff))
            else:
                new_predicates.append(predicates[k])
        w_to_ent = params.msg_to_entity.tensor()
        projections: list[nm.Tensor | None] = [None] * len(new_predicates)
        new_entities = [
            p2e_update(entities[i],
                       graph.subject_neighbors[i], graph.object_neighbors[i],
                       gammas_s, gammas_o, d_subject, d_object,
                       new_predicates, w_to_ent, projections=projections)
            for i in range(len(entities))
        ]
        graph = BipartiteGraph(new_entities, new_predicates, graph.pairs,
                               graph.entity_simplices)
    return graph, estimates


def run_bgnn(graph: BipartiteGraph, all_stage_params: list[StageParams],
             gating: GatingConfig, rce_per_iteration: bool = False,
             gamma_override: dict[int, float] | None = None,
             ) -> tuple[BipartiteGraph, list[list[ConfidenceEstimate]]]:
    """Sequential stages, each re-estimating confidence on refined features."""
    per_stage = []
    for params in all_stage_params:
        graph, estimates = run_stage(graph, params, gating,
                                     rce_per_iteration=rce_per_iteration,
                                     gamma_override=gamma_override)
        per_stage.append(estimates)
    return graph, per_stage
