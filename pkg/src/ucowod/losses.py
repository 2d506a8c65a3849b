"""Training losses for unknown-aware detection heads.

Logit layout: a head over ``C`` known classes with ``U`` unknown slots emits
vectors of width ``C + U + 1``; slots ``[0, C)`` are known classes, slots
``[C, C + U)`` are unknown classes, and the last slot is background.

Three loss families live here:

- ``classification_loss``: cross-entropy where known and background rows see
  only the known+background slots, while unknown-labeled rows are trained on
  the single highest-scoring unknown slot. The restriction is implemented by
  masking invisible slots to a large negative logit before the softmax, which
  drives their probability (and gradient) to exactly zero in float64.
- pairwise similarity losses over an embedding cosine-similarity matrix,
  supervised by label agreement and, in the self-supervised phase, by
  thresholding the similarities themselves under a closing threshold pair.
- an elementwise L1 regression penalty and the weighted total.

Every loss returns ``(value, gradient)`` with analytic gradients.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ClassLabel

CLAMP_EPS = 1e-6
MASK_LOGIT = -1e4


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def classification_loss(
    logits: np.ndarray,
    labels: Sequence[ClassLabel],
    known_count: int,
) -> tuple[float, np.ndarray]:
    """Unknown-aware cross-entropy, averaged over rows.

    Known and background rows are scored over the ``C + 1`` known+background
    slots. Unknown-labeled rows (the pseudo ground truth) contribute
    ``-log p`` of their highest-scoring unknown slot, so only that slot
    receives gradient. Returns ``(mean loss, gradient wrt logits)``.
    """
    Z = np.asarray(logits, dtype=float)
    if Z.ndim != 2:
        raise ValueError(f"logits must be 2-d, got shape {Z.shape}")
    n, width = Z.shape
    if n == 0:
        raise ValueError("empty batch")
    if len(labels) != n:
        raise ValueError(f"{n} logit rows but {len(labels)} labels")
    unknown_slots = width - known_count - 1
    if unknown_slots < 0:
        raise ValueError(f"logit width {width} too small for {known_count} known classes")
    background = width - 1

    visible = np.zeros((n, width), dtype=bool)
    visible[:, :known_count] = True
    visible[:, background] = True
    targets = np.empty(n, dtype=int)
    for i, label in enumerate(labels):
        if label.is_known:
            if label.class_id >= known_count:
                raise ValueError(f"known id {label.class_id} out of range [0, {known_count})")
            targets[i] = label.class_id
        elif label.is_background:
            targets[i] = background
        else:
            if unknown_slots == 0:
                raise ValueError("unknown-labeled row but the head has no unknown slots")
            best = known_count + int(np.argmax(Z[i, known_count:background]))
            visible[i, best] = True
            targets[i] = best

    masked = np.where(visible, Z, MASK_LOGIT)
    row_max = masked.max(axis=1, keepdims=True)
    logsumexp = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    picked = masked[np.arange(n), targets]
    loss = float(np.mean(logsumexp - picked))

    probs = softmax(masked, axis=1)
    probs[np.arange(n), targets] -= 1.0
    return loss, probs / n


def similarity_matrix(embeddings: np.ndarray, eps: float = CLAMP_EPS) -> np.ndarray:
    """Pairwise cosine similarity, clamped into ``[eps, 1 - eps]``.

    The clamp keeps downstream log terms finite. Zero-norm rows have no
    direction and are rejected.
    """
    E = np.asarray(embeddings, dtype=float)
    if E.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got shape {E.shape}")
    norms = np.sqrt((E * E).sum(axis=1))
    dead = np.flatnonzero(norms == 0.0)
    if dead.size:
        raise ValueError(f"zero-norm embedding rows: {dead.tolist()}")
    unit = E / norms[:, None]
    raw = unit @ unit.T
    raw = (raw + raw.T) / 2.0
    return np.clip(raw, eps, 1.0 - eps)


def cosine_similarity_grad(
    embeddings: np.ndarray, upstream: np.ndarray, eps: float = CLAMP_EPS
) -> np.ndarray:
    """Backpropagate a gradient wrt the clamped similarity matrix onto the
    embedding rows. Entries pinned at the clamp bounds pass no gradient."""
    E = np.asarray(embeddings, dtype=float)
    G_in = np.asarray(upstream, dtype=float)
    norms = np.sqrt((E * E).sum(axis=1))
    unit = E / norms[:, None]
    raw = unit @ unit.T
    raw = (raw + raw.T) / 2.0
    active = (raw > eps) & (raw < 1.0 - eps)
    G = (G_in + G_in.T) * active
    return (G @ unit - (G * raw).sum(axis=1, keepdims=True) * unit) / norms[:, None]


@dataclass(frozen=True)
class PairLabelMatrix:
    """Tri-state pair supervision: each ordered pair is positive (same
    class), negative (different class), or not selected (no verdict)."""

    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self) -> None:
        pos, neg = self.positive, self.negative
        if pos.shape != neg.shape or pos.ndim != 2 or pos.shape[0] != pos.shape[1]:
            raise ValueError("pair matrices must be square and same-shaped")
        if (pos & neg).any():
            raise ValueError("a pair cannot be both positive and negative")
        if not (pos == pos.T).all() or not (neg == neg.T).all():
            raise ValueError("pair matrices must be symmetric")

    @property
    def selected(self) -> np.ndarray:
        return self.positive | self.negative

    def signed(self) -> np.ndarray:
        """+1 positive, -1 negative, 0 not selected."""
        return self.positive.astype(np.int8) - self.negative.astype(np.int8)

    def merge(self, other: "PairLabelMatrix") -> "PairLabelMatrix":
        """Union of two verdict sets; overlapping verdicts must not clash."""
        return PairLabelMatrix(
            positive=self.positive | other.positive,
            negative=self.negative | other.negative,
        )


def supervised_label_matrix(labels: Sequence[ClassLabel]) -> PairLabelMatrix:
    """Pair supervision from labels alone.

    Pairs of equal non-unknown labels are positive, pairs of differing labels
    are negative, and unknown-unknown pairs carry no verdict because no true
    unknown identity is available at training time.
    """
    codes = np.array(
        [-1 if lab.is_background else lab.class_id for lab in labels], dtype=int
    )
    is_unknown = np.array([lab.is_unknown for lab in labels], dtype=bool)
    equal = codes[:, None] == codes[None, :]
    labeled = ~is_unknown
    both_labeled = np.outer(labeled, labeled)
    both_unknown = np.outer(is_unknown, is_unknown)
    positive = equal & both_labeled
    negative = ~both_unknown & ~positive
    return PairLabelMatrix(positive=positive, negative=negative)


@dataclass(frozen=True)
class PairSelectionSchedule:
    """Linear upper/lower similarity thresholds steered by ``lam``.

    Unknown-unknown pairs above ``upper(lam)`` are self-labeled positive and
    pairs below ``lower(lam)`` negative. As ``lam`` grows the band between
    the thresholds narrows, admitting more pairs, until the thresholds cross
    and self-supervision terminates.
    """

    upper_intercept: float = 0.95
    upper_slope: float = 1.0
    lower_intercept: float = 0.455
    lower_slope: float = 0.1

    def upper(self, lam: float) -> float:
        return self.upper_intercept - self.upper_slope * lam

    def lower(self, lam: float) -> float:
        return self.lower_intercept + self.lower_slope * lam

    def penalty(self, lam: float) -> float:
        """Width of the undecided band; added to the self-supervised loss so
        shrinking the band is rewarded."""
        return self.upper(lam) - self.lower(lam)

    def penalty_slope(self) -> float:
        """d penalty / d lam, constant for linear thresholds."""
        return -(self.upper_slope + self.lower_slope)

    def terminated(self, lam: float) -> bool:
        return self.upper(lam) <= self.lower(lam)

    def steps_to_termination(self, lam0: float, eta: float) -> int:
        """Closed-form number of ``update_lambda`` steps until termination."""
        if eta <= 0:
            raise ValueError("eta must be positive to make progress")
        crossing = (self.upper_intercept - self.lower_intercept) / (
            self.upper_slope + self.lower_slope
        )
        per_step = eta * (self.upper_slope + self.lower_slope)
        remaining = crossing - lam0
        if remaining <= 0:
            return 0
        return int(np.ceil(remaining / per_step))


DEFAULT_SCHEDULE = PairSelectionSchedule()


def update_lambda(
    lam: float, eta: float, schedule: PairSelectionSchedule = DEFAULT_SCHEDULE
) -> float:
    """One gradient-descent step of ``lam`` against the band-width penalty."""
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    return lam - eta * schedule.penalty_slope()


def self_label_matrix(
    similarity: np.ndarray,
    labels: Sequence[ClassLabel],
    lam: float,
    schedule: PairSelectionSchedule = DEFAULT_SCHEDULE,
) -> PairLabelMatrix:
    """Self-supervised verdicts for unknown-unknown pairs.

    Similarities above the upper threshold become positive, below the lower
    threshold negative; the band between stays unselected. Raises once the
    schedule has terminated.
    """
    if schedule.terminated(lam):
        raise RuntimeError(
            f"self-supervision terminated: upper threshold {schedule.upper(lam):.4f} "
            f"<= lower threshold {schedule.lower(lam):.4f} at lam={lam}"
        )
    S = np.asarray(similarity, dtype=float)
    is_unknown = np.array([lab.is_unknown for lab in labels], dtype=bool)
    both_unknown = np.outer(is_unknown, is_unknown)
    positive = both_unknown & (S > schedule.upper(lam))
    negative = both_unknown & (S < schedule.lower(lam))
    return PairLabelMatrix(positive=positive, negative=negative)


def combined_label_matrix(
    self_labeled: PairLabelMatrix, labels: Sequence[ClassLabel]
) -> PairLabelMatrix:
    """Label-derived verdicts overlaid with self-supervised ones. The two
    sources touch disjoint pair sets, so no verdict can clash."""
    return supervised_label_matrix(labels).merge(self_labeled)


def similarity_loss(
    pair_labels: PairLabelMatrix, similarity: np.ndarray
) -> tuple[float, np.ndarray]:
    """Binary cross-entropy over selected pairs, mean-reduced.

    Positive pairs are pushed toward similarity 1, negative pairs toward 0.
    Returns ``(value, gradient wrt the similarity matrix)``; unselected
    entries get zero gradient. With no selected pairs the loss is 0 and a
    RuntimeWarning is issued.
    """
    S = np.asarray(similarity, dtype=float)
    selected = pair_labels.selected
    n_selected = int(selected.sum())
    if n_selected == 0:
        _warnings.warn("similarity loss saw no selected pairs", RuntimeWarning)
        return 0.0, np.zeros_like(S)
    if ((S <= 0.0) | (S >= 1.0))[selected].any():
        raise ValueError("selected similarities must lie strictly inside (0, 1); clamp first")
    M = pair_labels.positive.astype(float)
    terms = -(M * np.log(S) + (1.0 - M) * np.log(1.0 - S))
    loss = float(terms[selected].sum() / n_selected)
    grad = np.where(selected, (-M / S + (1.0 - M) / (1.0 - S)) / n_selected, 0.0)
    return loss, grad


def self_similarity_loss(
    pair_labels: PairLabelMatrix,
    similarity: np.ndarray,
    lam: float,
    schedule: PairSelectionSchedule = DEFAULT_SCHEDULE,
) -> tuple[float, np.ndarray]:
    """Pair cross-entropy plus the threshold band-width penalty.

    The penalty depends only on ``lam``, so the gradient wrt the similarity
    matrix is the plain pair-loss gradient.
    """
    base, grad = similarity_loss(pair_labels, similarity)
    return base + schedule.penalty(lam), grad


@dataclass
class SimilarityState:
    """Mutable bookkeeping for pairwise-similarity training: current
    embeddings and their similarity matrix, per-row labels, and the
    self-supervision parameters."""

    labels: list[ClassLabel]
    lam: float = 0.0
    eta: float = 0.01
    schedule: PairSelectionSchedule = field(default_factory=PairSelectionSchedule)
    embeddings: Optional[np.ndarray] = None
    similarity: Optional[np.ndarray] = None

    @property
    def active(self) -> bool:
        """Whether self-supervision may still run."""
        return not self.schedule.terminated(self.lam)

    def update_embeddings(self, embeddings: np.ndarray) -> None:
        self.embeddings = np.asarray(embeddings, dtype=float)
        self.similarity = similarity_matrix(self.embeddings)

    def pair_labels(self, self_supervised: bool) -> PairLabelMatrix:
        """Current pair verdicts; self-supervised mode folds in similarity
        thresholding and requires ``update_embeddings`` to have run."""
        if not self_supervised:
            return supervised_label_matrix(self.labels)
        if self.similarity is None:
            raise ValueError("no similarity matrix yet; call update_embeddings first")
        return combined_label_matrix(
            self_label_matrix(self.similarity, self.labels, self.lam, self.schedule),
            self.labels,
        )

    def step_lambda(self) -> None:
        self.lam = update_lambda(self.lam, self.eta, self.schedule)


def l1_regression_loss(
    predictions: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean absolute deviation over all coordinates, with the customary zero
    subgradient at exact zeros. Empty input costs nothing."""
    P = np.asarray(predictions, dtype=float)
    T = np.asarray(targets, dtype=float)
    if P.shape != T.shape:
        raise ValueError(f"shape mismatch: predictions {P.shape} vs targets {T.shape}")
    if P.size == 0:
        return 0.0, np.zeros_like(P)
    diff = P - T
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


@dataclass(frozen=True)
class LossWeights:
    """Term weights for the total objective. ``alpha_rpn`` is kept for
    config parity with full detectors but the synthetic harness has no
    proposal network to train."""

    alpha_rpn: float = 1.0
    alpha_cls: float = 1.0
    alpha_reg: float = 1.0
    alpha_sim: float = 0.5

    def __post_init__(self) -> None:
        for name in ("alpha_rpn", "alpha_cls", "alpha_reg", "alpha_sim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def total_training_loss(
    classification: float,
    regression: float,
    similarity: float,
    weights: LossWeights = LossWeights(),
) -> float:
    """Weighted sum of the three trainable terms."""
    return (
        weights.alpha_cls * classification
        + weights.alpha_reg * regression
        + weights.alpha_sim * similarity
    )
