"""Full scene-graph model: proposal encoders, stacked refinement stages,
and the two output classifiers, wired for one image at a time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ContractError
from .graph import (
    BipartiteGraph,
    ConfidenceEstimate,
    GatingConfig,
    StageParams,
    run_bgnn,
)
from .layers import Linear, glorot
from .losses import LossWeights, batch_mean, bce_relatedness_batch, cross_entropy_batch, \
    focal_binary_batch, focal_multi_batch, total_loss
from .predictor import predict_entities, predict_predicates
from .proposals import (
    FrequencyPrior,
    GEOMETRY_DIM,
    ImageRecord,
    entity_representation,
    pair_entities,
    predicate_representation,
)

RELATEDNESS_HEADS = ("rce", "multi_template")


@dataclass
class ModelConfig:
    d_entity: int = 32
    d_predicate: int = 32
    d_embed: int = 32
    d_hidden_rce: int = 32
    n_stages: int = 3
    n_iterations: int = 3
    gating_mode: str = "confidence"
    top_n: int = 8
    alpha_init: float = 2.2
    beta_init: float = 0.025
    rho_init: float = -5.0
    rce_per_iteration: bool = False
    relatedness_head: str = "rce"
    prior_epsilon: float = 1e-3
    max_pairs: int = 0  # 0 disables pair pruning
    use_gt_classes: bool = False  # feed ground-truth labels during training

    def validate(self):
        if self.n_stages < 1 or self.n_iterations < 1:
            raise ContractError("need at least one stage and one iteration")
        if self.relatedness_head not in RELATEDNESS_HEADS:
            raise ContractError(f"unknown relatedness head {self.relatedness_head!r}")
        for name in ("d_entity", "d_predicate", "d_embed", "d_hidden_rce"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


class MultiTemplateHead:
    """Draft-style relatedness module: one sigmoid template per predicate
    class plus background, matched against a fused pair representation."""

    def __init__(self, d_entity: int, d_predicate: int, n_templates: int, name: str,
                 rng: np.random.Generator):
        self.pair_encoder = Linear(2 * d_entity, d_predicate, f"{name}.pair_encoder",
                                   rng, activation="sigmoid")
        self.union_encoder = Linear(d_predicate, d_predicate, f"{name}.union_encoder",
                                    rng, activation="sigmoid")
        self.hidden = Linear(d_predicate, d_predicate, f"{name}.hidden",
                             rng, activation="sigmoid")
        self.templates = Linear(d_predicate, n_templates, f"{name}.templates",
                                rng, activation="sigmoid")

    def __call__(self, e_i: nm.Tensor, e_j: nm.Tensor, r: nm.Tensor) -> nm.Tensor:
        h_e = self.pair_encoder(nm.concat([e_i, e_j]))
        h_u = self.union_encoder(r)
        return self.templates(self.hidden(h_e + h_u))

    def parameters(self) -> list[nm.Parameter]:
        out = []
        for layer in (self.pair_encoder, self.union_encoder, self.hidden, self.templates):
            out += layer.parameters()
        return out


@dataclass
class ForwardResult:
    pairs: list[tuple[int, int]]
    entity_reps: list[nm.Tensor]
    predicate_reps: list[nm.Tensor]
    entity_probs: list[nm.Tensor]
    predicate_probs: list[nm.Tensor]
    confidences: list[list[ConfidenceEstimate]]  # one list per stage
    template_scores: list[list[nm.Tensor]] = field(default_factory=list)


class SceneGraphModel:
    def __init__(self, config: ModelConfig, n_entity_classes: int,
                 n_predicate_classes: int, d_visual: int, seed: int = 0):
        config.validate()
        self.config = config
        self.n_entity_classes = n_entity_classes
        self.n_predicate_classes = n_predicate_classes
        self.d_visual = d_visual
        rng = np.random.default_rng(seed)

        c = config
        self.embed_table = nm.Parameter(
            rng.normal(scale=0.1, size=(n_entity_classes, c.d_embed)), "embed_table")
        self.f_e = Linear(d_visual + GEOMETRY_DIM + c.d_embed, c.d_entity, "f_e", rng,
                          activation="relu")
        self.f_u = Linear(d_visual, c.d_predicate, "f_u", rng, activation="relu")
        self.f_p = Linear(2 * c.d_entity, c.d_predicate, "f_p", rng, activation="relu")
        self.stages = [
            StageParams.create(
                c.d_entity, c.d_predicate, n_entity_classes, n_predicate_classes,
                c.d_hidden_rce, c.n_iterations, rng, f"stage{s}",
                linear_combo=(c.gating_mode == "linear_combo"))
            for s in range(c.n_stages)
        ]
        self.gating = GatingConfig.create(
            mode=c.gating_mode, alpha_init=c.alpha_init, beta_init=c.beta_init,
            top_n=c.top_n)
        self.rel_classifier = nm.Parameter(
            glorot(rng, c.d_predicate, n_predicate_classes + 1), "rel_classifier")
        self.ent_classifier = nm.Parameter(
            glorot(rng, c.d_entity, n_entity_classes), "ent_classifier")
        self.rho_raw = nm.Parameter(c.rho_init, "rho_raw")
        self.visual_proj = None
        if d_visual != c.d_entity:
            self.visual_proj = nm.Parameter(
                glorot(rng, d_visual, c.d_entity), "visual_proj")
        self.relatedness_head = None
        if c.relatedness_head == "multi_template":
            self.relatedness_head = MultiTemplateHead(
                c.d_entity, c.d_predicate, n_predicate_classes + 1,
                "relatedness_head", rng)
        self.prior: FrequencyPrior | None = None

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[nm.Parameter]:
        out = [self.embed_table]
        for layer in (self.f_e, self.f_u, self.f_p):
            out += layer.parameters()
        for stage in self.stages:
            out += stage.parameters()
        out += self.gating.parameters()
        out += [self.rel_classifier, self.ent_classifier, self.rho_raw]
        if self.visual_proj is not None:
            out.append(self.visual_proj)
        if self.relatedness_head is not None:
            out += self.relatedness_head.parameters()
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.value for p in self.parameters()}
        if self.prior is not None:
            arrays["buffer.frequency_prior"] = self.prior.table
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in arrays:
                raise ContractError(f"checkpoint is missing parameter {p.name!r}")
            if arrays[p.name].shape != p.value.shape:
                raise ContractError(f"shape mismatch for {p.name!r}")
            p.value[...] = arrays[p.name]
        if "buffer.frequency_prior" in arrays:
            self.prior = FrequencyPrior(arrays["buffer.frequency_prior"].copy())

    def set_prior(self, prior: FrequencyPrior):
        expect = (self.n_entity_classes, self.n_entity_classes, self.n_predicate_classes + 1)
        if prior.table.shape != expect:
            raise ContractError(f"prior table shape {prior.table.shape}, expected {expect}")
        self.prior = prior

    # -- forward ------------------------------------------------------------

    def forward(self, image: ImageRecord, use_gt_classes: bool = False) -> ForwardResult:
        """One image through encoders, refinement stages, and classifiers.

        ``use_gt_classes`` switches the semantic inputs (word embedding,
        prior lookup, confidence-module simplices) to ground truth, the
        PredCls regime.  Entity classification is always computed from
        features so its loss stays meaningful.
        """
        if self.prior is None:
            raise ContractError("frequency prior not set")
        n = len(image.entities)
        if n < 1:
            raise ContractError("image without entities")

        if use_gt_classes:
            classes = list(image.gt_entity_classes)
            simplices = []
            for c in classes:
                one_hot = np.zeros(self.n_entity_classes)
                one_hot[c] = 1.0
                simplices.append(one_hot)
        else:
            classes = [ent.detected_class for ent in image.entities]
            simplices = [ent.class_simplex for ent in image.entities]

        entity_reps = [
            entity_representation(ent, image.width, image.height, self.embed_table,
                                  self.f_e, class_override=classes[i])
            for i, ent in enumerate(image.entities)
        ]
        max_pairs = self.config.max_pairs or None
        scores = np.array([float(np.max(s)) for s in simplices])
        pairs = pair_entities(n, max_pairs=max_pairs, entity_scores=scores)
        predicate_reps = [
            predicate_representation(
                entity_reps[i], entity_reps[j],
                nm.Tensor(image.union_feature(i, j)), self.f_u, self.f_p)
            for i, j in pairs
        ]

        graph = BipartiteGraph(entity_reps, predicate_reps, pairs, simplices)
        graph, confidences = run_bgnn(
            graph, self.stages, self.gating,
            rce_per_iteration=self.config.rce_per_iteration)

        template_scores: list[list[nm.Tensor]] = []
        if self.relatedness_head is not None:
            # the draft head scores the refined features once per stage output
            template_scores.append([
                self.relatedness_head(
                    graph.entity_nodes[i], graph.entity_nodes[j],
                    graph.predicate_nodes[k])
                for k, (i, j) in enumerate(pairs)
            ])

        predicate_probs = []
        for k, (i, j) in enumerate(pairs):
            prior_slice = self.prior.slice_for(classes[i], classes[j])
            predicate_probs.append(
                predict_predicates(graph.predicate_nodes[k], self.rel_classifier,
                                   prior_slice))
        entity_probs = []
        for i, ent in enumerate(image.entities):
            visual = nm.Tensor(ent.visual_feature)
            if self.visual_proj is not None:
                visual = nm.matmul(visual, self.visual_proj.tensor())
            entity_probs.append(
                predict_entities(graph.entity_nodes[i], visual, self.ent_classifier,
                                 self.rho_raw.tensor()))

        return ForwardResult(
            pairs=pairs,
            entity_reps=graph.entity_nodes,
            predicate_reps=graph.predicate_nodes,
            entity_probs=entity_probs,
            predicate_probs=predicate_probs,
            confidences=confidences,
            template_scores=template_scores,
        )

    # -- training loss ------------------------------------------------------

    def compute_loss(self, image: ImageRecord, weights: LossWeights,
                     keep_mask: list[bool] | None = None,
                     lambda_relness: float = 1.0,
                     forward_result: ForwardResult | None = None,
                     ) -> tuple[nm.Tensor, dict[str, float]]:
        """Multitask loss for one (possibly resampled) image copy.

        ``keep_mask`` aligns with ``image.gt_triplets``; instances dropped
        by the sampler are excluded from every predicate-side loss rather
        than relabeled as background.
        """
        result = forward_result
        if result is None:
            result = self.forward(image, use_gt_classes=self.config.use_gt_classes)
        gt_index = {(s, o): t for t, (s, k, o) in enumerate(image.gt_triplets)}
        background = self.n_predicate_classes

        included = []  # (pair position, gt class or background)
        for pos, (i, j) in enumerate(result.pairs):
            t = gt_index.get((i, j))
            if t is None:
                included.append((pos, background))
            elif keep_mask is None or keep_mask[t]:
                included.append((pos, image.gt_triplets[t][1]))
            # dropped instances fall out of the loss entirely
        predicate_loss = cross_entropy_batch(
            [result.predicate_probs[pos] for pos, _ in included],
            [target for _, target in included])

        entity_loss = cross_entropy_batch(
            result.entity_probs, list(image.gt_entity_classes))

        one_hots = np.zeros((len(included), self.n_predicate_classes))
        positives = []
        for row, (_, target) in enumerate(included):
            if target != background:
                one_hots[row, target] = 1.0
                positives.append(1)
            else:
                positives.append(0)

        stage_multi, stage_binary = [], []
        for estimates in result.confidences:
            if not estimates:
                continue
            stage_multi.append(
                focal_multi_batch(
                    [estimates[pos].class_scores for pos, _ in included], one_hots,
                    weights.alpha_f, weights.gamma_f,
                    full_focal=weights.rce_full_focal))
            stage_binary.append(
                focal_binary_batch(
                    [estimates[pos].fused for pos, _ in included], positives,
                    weights.alpha_f, weights.gamma_f,
                    full_focal=weights.rce_full_focal))

        loss = total_loss(predicate_loss, entity_loss, stage_multi, stage_binary, weights)

        relness_value = 0.0
        if result.template_scores:
            targets = np.zeros((len(included), self.n_predicate_classes + 1))
            for row, (_, target) in enumerate(included):
                targets[row, target] = 1.0
            per_stage = [
                bce_relatedness_batch([templates[pos] for pos, _ in included], targets)
                for templates in result.template_scores
            ]
            relness = batch_mean(per_stage)
            loss = loss + lambda_relness * relness
            relness_value = relness.item()

        components = {
            "predicate": predicate_loss.item(),
            "entity": entity_loss.item(),
            "rce_multi": float(sum(t.item() for t in stage_multi)),
            "rce_binary": float(sum(t.item() for t in stage_binary)),
            "relness": relness_value,
            "total": loss.item(),
        }
        return loss, components
