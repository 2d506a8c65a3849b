"""Synthetic end-to-end harness.

Scenes live in feature space: each class owns a prototype vector, every
object is a box plus a noisy copy of its class prototype, and proposals are
the object boxes, jittered copies, and off-object background boxes with
objectness tracking their overlap. Known objects are annotated everywhere;
unknown objects are annotated only in test scenes, so training must discover
them through pseudo-labeling.

``train`` fits a small two-layer head with plain full-batch gradient
descent on the combined objective, switching from label-supervised to
self-supervised pair similarity after a warm-up. ``refine_pipeline`` then
clusters the embeddings of unknown-slot detections and relabels them by
cluster.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Box, ClassLabel, Detection, GroundTruthObject, Proposal, iou, label_for_class_id
from .losses import (
    LossWeights,
    SimilarityState,
    classification_loss,
    cosine_similarity_grad,
    l1_regression_loss,
    self_similarity_loss,
    similarity_loss,
    softmax,
    total_training_loss,
)
from .metrics import EvalConfig, nms
from .pseudo_label import UlpConfig, select_pseudo_labels
from .refinement import RefineResult, refine, select_cluster_count


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run depends on, seeds included."""

    seed: int = 0
    known_classes: int = 3
    unknown_slots: int = 8
    unknown_gt_classes: int = 3
    feature_dim: int = 16
    hidden_dim: int = 128
    train_scenes: int = 24
    test_scenes: int = 12
    min_objects: int = 3
    max_objects: int = 6
    image_size: float = 100.0
    feature_noise: float = 0.05
    jitter_per_object: int = 2
    background_per_scene: int = 3
    ulp: UlpConfig = field(default_factory=UlpConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lambda0: float = 0.0
    eta: float = 0.01
    epochs: int = 160
    warmup_epochs: Optional[int] = None
    learning_rate: float = 1.0
    weight_decay: float = 1e-3
    init_scale: float = 1.0
    inference_nms_threshold: float = 0.5
    refine_lr: float = 0.1
    refine_steps: int = 200
    target_update_interval: int = 10
    refine_update_embeddings: bool = True
    refine_clusters: Optional[int] = None
    iou_threshold: float = 0.5
    score_threshold: float = 0.05

    def __post_init__(self) -> None:
        if self.known_classes < 1:
            raise ValueError("need at least one known class")
        if self.unknown_slots < 0 or self.unknown_gt_classes < 0:
            raise ValueError("unknown counts must be non-negative")
        if self.feature_dim < self.known_classes + self.unknown_gt_classes:
            raise ValueError(
                "feature_dim must be at least known_classes + unknown_gt_classes "
                "so every class gets a separated prototype"
            )
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range is invalid")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.warmup_epochs is not None and not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError("warmup must lie within the epoch budget")

    def resolved_warmup(self) -> int:
        """Supervised warm-up length; defaults to half the epochs."""
        return self.epochs // 2 if self.warmup_epochs is None else self.warmup_epochs

    def head_width(self) -> int:
        return self.known_classes + self.unknown_slots + 1

    def eval_config(self) -> EvalConfig:
        return EvalConfig(iou_threshold=self.iou_threshold, score_threshold=self.score_threshold)


@dataclass
class SyntheticScene:
    """One image worth of synthetic data; ``features`` has one row per
    proposal."""

    image_id: int
    proposals: list[Proposal]
    gts: list[GroundTruthObject]
    features: np.ndarray

    def __post_init__(self) -> None:
        if len(self.features) != len(self.proposals):
            raise ValueError("each proposal needs exactly one feature row")


@dataclass
class SyntheticDataset:
    train: list[SyntheticScene]
    test: list[SyntheticScene]
    config: RunConfig

    def test_ground_truth(self) -> list[GroundTruthObject]:
        return [g for scene in self.test for g in scene.gts]


def class_prototypes(config: RunConfig) -> np.ndarray:
    """Unit-separated feature prototypes, one per class (known then
    unknown); scaled axis vectors give exact pairwise distance 1."""
    n_classes = config.known_classes + config.unknown_gt_classes
    prototypes = np.zeros((n_classes, config.feature_dim))
    np.fill_diagonal(prototypes[:, :n_classes], 1.0 / np.sqrt(2.0))
    return prototypes


def _sample_box(rng: np.random.Generator, config: RunConfig, placed: list[Box]) -> Box:
    """Random box overlapping already-placed boxes by at most 0.1 IoU; after
    100 attempts the least-overlapping candidate wins."""
    best = None
    best_overlap = np.inf
    for _ in range(100):
        w = rng.uniform(8.0, 16.0)
        h = rng.uniform(8.0, 16.0)
        cx = rng.uniform(w / 2.0, config.image_size - w / 2.0)
        cy = rng.uniform(h / 2.0, config.image_size - h / 2.0)
        box = Box(cx, cy, w, h)
        overlap = max((iou(box, other) for other in placed), default=0.0)
        if overlap <= 0.1:
            return box
        if overlap < best_overlap:
            best, best_overlap = box, overlap
    return best


def _build_scene(
    rng: np.random.Generator,
    image_id: int,
    object_classes: Sequence[int],
    config: RunConfig,
    prototypes: np.ndarray,
    labeled_unknowns: bool,
) -> SyntheticScene:
    boxes: list[Box] = []
    for _ in object_classes:
        boxes.append(_sample_box(rng, config, boxes))

    gts: list[GroundTruthObject] = []
    for class_id, box in zip(object_classes, boxes):
        if class_id < config.known_classes:
            gts.append(GroundTruthObject(image_id, ClassLabel.known(class_id), box))
        elif labeled_unknowns:
            gts.append(GroundTruthObject(image_id, ClassLabel.unknown(class_id), box))

    proposals: list[Proposal] = []
    features: list[np.ndarray] = []

    def add(box: Box, objectness: float, prototype: np.ndarray) -> None:
        proposals.append(Proposal(image_id, box, float(np.clip(objectness, 0.0, 1.0))))
        features.append(prototype + config.feature_noise * rng.standard_normal(config.feature_dim))

    for class_id, box in zip(object_classes, boxes):
        prototype = prototypes[class_id]
        add(box, 0.85 + 0.1 * rng.random(), prototype)
        for _ in range(config.jitter_per_object):
            jittered = Box(
                box.cx + rng.uniform(-0.15, 0.15) * box.w,
                box.cy + rng.uniform(-0.15, 0.15) * box.h,
                box.w * rng.uniform(0.9, 1.1),
                box.h * rng.uniform(0.9, 1.1),
            )
            add(jittered, iou(jittered, box) * (0.8 + 0.2 * rng.random()), prototype)

    background_prototype = np.zeros(config.feature_dim)
    for _ in range(config.background_per_scene):
        box = _sample_box(rng, config, boxes)
        add(box, 0.02 + 0.18 * rng.random(), background_prototype)

    return SyntheticScene(image_id, proposals, gts, np.array(features))


def _split_class_sequence(
    rng: np.random.Generator, counts: Sequence[int], n_classes: int
) -> list[list[int]]:
    """Object classes for each scene of a split, shuffled but guaranteed to
    cover every class at least once."""
    total = int(sum(counts))
    repeats = -(-total // n_classes)
    sequence = np.tile(np.arange(n_classes), repeats)[:total]
    rng.shuffle(sequence)
    out = []
    cursor = 0
    for count in counts:
        out.append([int(c) for c in sequence[cursor : cursor + count]])
        cursor += count
    return out


def generate_dataset(config: RunConfig, seed: Optional[int] = None) -> SyntheticDataset:
    """Sample the train and test scene lists. Training scenes leave unknown
    objects unannotated; test scenes annotate everything."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    prototypes = class_prototypes(config)
    n_classes = len(prototypes)

    splits: dict[str, list[SyntheticScene]] = {}
    next_image_id = 0
    for name, n_scenes, labeled_unknowns in (
        ("train", config.train_scenes, False),
        ("test", config.test_scenes, True),
    ):
        counts = [int(rng.integers(config.min_objects, config.max_objects + 1)) for _ in range(n_scenes)]
        per_scene_classes = _split_class_sequence(rng, counts, n_classes)
        scenes = []
        for classes in per_scene_classes:
            scenes.append(_build_scene(rng, next_image_id, classes, config, prototypes, labeled_unknowns))
            next_image_id += 1
        splits[name] = scenes
    return SyntheticDataset(train=splits["train"], test=splits["test"], config=config)


@dataclass
class HeadActivations:
    hidden_pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    deltas: np.ndarray


@dataclass
class ToyHead:
    """Two-layer embedding head: shared hidden layer with a rectifier,
    then a classification output (one logit per known class, unknown slot,
    and background) and a box-delta output."""

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray
    learning_rate: float
    weight_decay: float = 0.0

    @classmethod
    def create(
        cls,
        feature_dim: int,
        hidden_dim: int,
        n_logits: int,
        seed: int = 0,
        learning_rate: float = 1.0,
        weight_decay: float = 0.0,
        init_scale: float = 0.1,
    ) -> "ToyHead":
        rng = np.random.default_rng(seed)
        return cls(
            w_hidden=init_scale * rng.standard_normal((feature_dim, hidden_dim)),
            b_hidden=np.zeros(hidden_dim),
            w_cls=init_scale * rng.standard_normal((hidden_dim, n_logits)),
            b_cls=0.01 * rng.standard_normal(n_logits),
            w_reg=init_scale * rng.standard_normal((hidden_dim, 4)),
            b_reg=np.zeros(4),
            learning_rate=learning_rate,
            weight_decay=weight_decay,
        )

    @property
    def n_logits(self) -> int:
        return self.w_cls.shape[1]

    def forward(self, features: np.ndarray) -> HeadActivations:
        hidden_pre = features @ self.w_hidden + self.b_hidden
        hidden = np.maximum(hidden_pre, 0.0)
        return HeadActivations(
            hidden_pre=hidden_pre,
            hidden=hidden,
            logits=hidden @ self.w_cls + self.b_cls,
            deltas=hidden @ self.w_reg + self.b_reg,
        )

    def gradients(
        self,
        features: np.ndarray,
        acts: HeadActivations,
        grad_logits: np.ndarray,
        grad_deltas: np.ndarray,
    ) -> dict[str, np.ndarray]:
        grad_hidden = grad_logits @ self.w_cls.T + grad_deltas @ self.w_reg.T
        grad_hidden_pre = grad_hidden * (acts.hidden_pre > 0)
        return {
            "w_hidden": features.T @ grad_hidden_pre,
            "b_hidden": grad_hidden_pre.sum(axis=0),
            "w_cls": acts.hidden.T @ grad_logits,
            "b_cls": grad_logits.sum(axis=0),
            "w_reg": acts.hidden.T @ grad_deltas,
            "b_reg": grad_deltas.sum(axis=0),
        }

    def apply_gradients(self, grads: dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        step = self.learning_rate if lr is None else lr
        for name, grad in grads.items():
            value = getattr(self, name)
            if name.startswith("w_"):
                grad = grad + self.weight_decay * value
            setattr(self, name, value - step * grad)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "arrays": {
                name: getattr(self, name).tolist()
                for name in ("w_hidden", "b_hidden", "w_cls", "b_cls", "w_reg", "b_reg")
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ToyHead":
        arrays = {name: np.array(values, dtype=float) for name, values in payload["arrays"].items()}
        return cls(
            learning_rate=float(payload["learning_rate"]),
            weight_decay=float(payload.get("weight_decay", 0.0)),
            **arrays,
        )


@dataclass(frozen=True)
class TrainingRows:
    """Flattened training batch: proposal features with assigned labels and
    box-delta targets (valid only where ``has_box_target``)."""

    features: np.ndarray
    labels: tuple[ClassLabel, ...]
    delta_targets: np.ndarray
    has_box_target: np.ndarray
    n_pseudo: int


def build_training_rows(dataset: SyntheticDataset, config: RunConfig) -> TrainingRows:
    """Assign every training proposal a target: the best-overlapping known or
    pseudo ground truth at the IoU threshold, else background."""
    features = []
    labels: list[ClassLabel] = []
    deltas = []
    mask = []
    n_pseudo = 0
    for scene in dataset.train:
        known = [g for g in scene.gts if g.label.is_known]
        pseudo: list[GroundTruthObject] = []
        if config.unknown_slots > 0:
            pseudo = select_pseudo_labels(
                scene.proposals, known, config.ulp, unknown_id=config.known_classes
            )
        n_pseudo += len(pseudo)
        candidates = known + pseudo
        for row, proposal in enumerate(scene.proposals):
            best = None
            best_overlap = 0.0
            for gt in candidates:
                overlap = iou(proposal.box, gt.box)
                if overlap >= config.iou_threshold and overlap > best_overlap:
                    best, best_overlap = gt, overlap
            features.append(scene.features[row])
            if best is None:
                labels.append(ClassLabel.background())
                deltas.append(np.zeros(4))
                mask.append(False)
            else:
                labels.append(best.label)
                deltas.append(
                    np.array(
                        [
                            best.box.cx - proposal.box.cx,
                            best.box.cy - proposal.box.cy,
                            best.box.w - proposal.box.w,
                            best.box.h - proposal.box.h,
                        ]
                    )
                )
                mask.append(True)
    return TrainingRows(
        features=np.array(features),
        labels=tuple(labels),
        delta_targets=np.array(deltas),
        has_box_target=np.array(mask, dtype=bool),
        n_pseudo=n_pseudo,
    )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    phase: str
    classification: float
    regression: float
    pair: float
    penalty: float
    model_loss: float
    total: float
    lam: float


@dataclass
class TrainResult:
    head: ToyHead
    history: tuple[EpochStats, ...]
    rows: TrainingRows
    final_lambda: float


def train(config: RunConfig, dataset: SyntheticDataset) -> TrainResult:
    """Full-batch gradient descent on the combined objective.

    The pair-similarity term runs label-supervised for the warm-up epochs,
    then self-supervised with one lambda update per epoch until the
    threshold schedule terminates, after which it falls back to the
    label-supervised pairs. The recorded ``model_loss`` excludes the
    lambda penalty (which carries no parameter gradient); divergence to a
    non-finite loss raises with the epoch index.
    """
    rows = build_training_rows(dataset, config)
    head = ToyHead.create(
        config.feature_dim,
        config.hidden_dim,
        config.head_width(),
        seed=config.seed,
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        init_scale=config.init_scale,
    )
    state = SimilarityState(labels=list(rows.labels), lam=config.lambda0, eta=config.eta)
    warmup = config.resolved_warmup()
    history: list[EpochStats] = []

    for epoch in range(config.epochs):
        acts = head.forward(rows.features)
        cls_value, grad_logits = classification_loss(acts.logits, rows.labels, config.known_classes)

        reg_value, grad_selected = l1_regression_loss(
            acts.deltas[rows.has_box_target], rows.delta_targets[rows.has_box_target]
        )
        grad_deltas = np.zeros_like(acts.deltas)
        grad_deltas[rows.has_box_target] = grad_selected

        state.update_embeddings(acts.logits)
        self_supervised = epoch >= warmup and state.active
        if self_supervised:
            pair = state.pair_labels(self_supervised=True)
            sim_value, grad_sim = self_similarity_loss(pair, state.similarity, state.lam, state.schedule)
            penalty = state.schedule.penalty(state.lam)
            phase = "self"
        else:
            pair = state.pair_labels(self_supervised=False)
            sim_value, grad_sim = similarity_loss(pair, state.similarity)
            penalty = 0.0
            phase = "supervised" if epoch < warmup else "post"

        pair_value = sim_value - penalty
        model_loss = total_training_loss(cls_value, reg_value, pair_value, config.weights)
        total = total_training_loss(cls_value, reg_value, sim_value, config.weights)
        if not np.isfinite(total):
            raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
        history.append(
            EpochStats(epoch, phase, cls_value, reg_value, pair_value, penalty, model_loss, total, state.lam)
        )

        grad_logits_total = config.weights.alpha_cls * grad_logits
        if config.weights.alpha_sim > 0:
            grad_logits_total = grad_logits_total + config.weights.alpha_sim * cosine_similarity_grad(
                acts.logits, grad_sim
            )
        head.apply_gradients(head.gradients(rows.features, acts, grad_logits_total, config.weights.alpha_reg * grad_deltas))
        if self_supervised:
            state.step_lambda()

    return TrainResult(head=head, history=tuple(history), rows=rows, final_lambda=state.lam)


def detect_with_embeddings(
    head: ToyHead, scenes: Sequence[SyntheticScene], config: RunConfig
) -> tuple[list[Detection], np.ndarray]:
    """Run the head over scenes and emit per-class suppressed detections.

    Each proposal is classified by its argmax slot (background rows are
    dropped), scored by the softmax probability, and its box is shifted by
    the predicted deltas. Returns the detections plus their embedding rows,
    aligned index for index.
    """
    detections: list[Detection] = []
    embeddings: list[np.ndarray] = []
    for scene in scenes:
        if not scene.proposals:
            continue
        acts = head.forward(scene.features)
        probs = softmax(acts.logits, axis=1)
        predicted = probs.argmax(axis=1)
        background = head.n_logits - 1
        by_class: dict[int, list[int]] = {}
        for row, slot in enumerate(predicted):
            if slot != background:
                by_class.setdefault(int(slot), []).append(row)
        for slot in sorted(by_class):
            rows = by_class[slot]
            boxes = []
            for row in rows:
                proposal = scene.proposals[row]
                d = acts.deltas[row]
                boxes.append(
                    Box(
                        proposal.box.cx + d[0],
                        proposal.box.cy + d[1],
                        max(proposal.box.w + d[2], 1e-3),
                        max(proposal.box.h + d[3], 1e-3),
                    )
                )
            scored = [(box, float(probs[row, slot])) for box, row in zip(boxes, rows)]
            for kept in nms(scored, config.inference_nms_threshold):
                detections.append(
                    Detection(
                        image_id=scene.image_id,
                        label=label_for_class_id(slot, config.known_classes),
                        box=scored[kept][0],
                        score=scored[kept][1],
                    )
                )
                embeddings.append(acts.logits[rows[kept]])
    return detections, (np.array(embeddings) if embeddings else np.empty((0, head.n_logits)))


def detect(head: ToyHead, scenes: Sequence[SyntheticScene], config: RunConfig) -> list[Detection]:
    return detect_with_embeddings(head, scenes, config)[0]


@dataclass
class RefineOutcome:
    """Detections after cluster refinement, alongside the clustering
    itself. ``detections`` is the post-refinement output (relabeled and
    re-suppressed); ``refined_indices`` points at its unknown entries."""

    detections: list[Detection]
    refined_indices: list[int]
    result: RefineResult
    n_clusters: int


def _suppress_per_class(detections: list[Detection], threshold: float) -> list[int]:
    """Indices surviving per-image, per-class greedy NMS, in input order."""
    groups: dict[tuple, list[int]] = {}
    for i, det in enumerate(detections):
        key = (det.image_id, det.label.kind.value, det.label.class_id)
        groups.setdefault(key, []).append(i)
    keep: list[int] = []
    for key in sorted(groups):
        indices = groups[key]
        scored = [(detections[i].box, detections[i].score) for i in indices]
        keep.extend(indices[k] for k in nms(scored, threshold))
    return sorted(keep)


def refine_pipeline(
    head: ToyHead,
    dataset: SyntheticDataset,
    config: RunConfig,
    split: str = "test",
) -> RefineOutcome:
    """Cluster the embeddings of unknown-slot detections and relabel each
    detection with its cluster's unknown id.

    Embeddings are length-normalized before clustering (the similarity
    loss shapes angles, not norms). The cluster count defaults to the best
    mean silhouette over 2..unknown_slots, so a class split across slots
    can be consolidated and a merged slot pulled apart. Relabeling can
    land duplicate boxes in one class, so per-class suppression runs
    again afterwards. Raises when nothing was classified as unknown
    (lower the pseudo-label objectness floor or add unknown slots).
    """
    scenes = {"train": dataset.train, "test": dataset.test}[split]
    detections, embeddings = detect_with_embeddings(head, scenes, config)
    unknown_indices = [i for i, det in enumerate(detections) if det.label.is_unknown]
    if not unknown_indices:
        raise RuntimeError(
            "refinement found no detections in unknown slots; lower the "
            "pseudo-label objectness floor (ulp.delta) or add unknown slots"
        )
    points = embeddings[unknown_indices]
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    points = points / np.maximum(norms, 1e-12)

    n_clusters = config.refine_clusters
    if n_clusters is None:
        n_clusters = select_cluster_count(points, config.unknown_slots, seed=config.seed)
    if n_clusters > config.unknown_slots:
        raise ValueError(
            f"{n_clusters} clusters cannot be expressed with {config.unknown_slots} unknown slots"
        )
    n_clusters = min(n_clusters, len(unknown_indices))

    result = refine(
        points,
        n_clusters,
        steps=config.refine_steps,
        lr=config.refine_lr,
        seed=config.seed,
        target_interval=config.target_update_interval,
        update_embeddings=config.refine_update_embeddings,
    )
    relabeled = list(detections)
    for position, det_index in enumerate(unknown_indices):
        det = detections[det_index]
        cluster = int(result.assignments[position])
        relabeled[det_index] = dataclasses.replace(
            det, label=ClassLabel.unknown(config.known_classes + cluster)
        )
    surviving = _suppress_per_class(relabeled, config.inference_nms_threshold)
    final = [relabeled[i] for i in surviving]
    return RefineOutcome(
        detections=final,
        refined_indices=[i for i, det in enumerate(final) if det.label.is_unknown],
        result=result,
        n_clusters=n_clusters,
    )
