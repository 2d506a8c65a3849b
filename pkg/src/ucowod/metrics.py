"""Detection metrics and the open-world evaluation protocol.

Matching convention used throughout: detections are processed in descending
score order (ties broken by ascending insertion index) and each detection
greedily claims the highest-IoU still-unmatched ground-truth object of its
class in its image, provided the IoU reaches the threshold. Every ground
truth is matched at most once.

Metrics:

- ``nms``: greedy non-maximum suppression over scored boxes.
- ``average_precision``: all-point interpolated AP for one class.
- ``match_known_detections``: pooled TP/FP/FN bookkeeping over known classes.
- ``absolute_open_set_error``: unknown ground-truth objects swallowed by
  known-labeled false positives.
- ``wilderness_impact``: open-set error rate relative to known predictions.
- ``hungarian_assign``: maximum-gain assignment (rectangular allowed).
- ``uc_map`` / ``uc_recall``: unknown-class mAP and recall, scored under the
  best matching between predicted unknown ids and true unknown classes.
- ``evaluate``: the full report.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Box, Detection, GroundTruthObject, iou

THREADS_ENV_VAR = "UCOWOD_THREADS"


def thread_cap() -> int:
    """Worker cap for data-parallel evaluation, from the environment."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
    return value


def nms(scored_boxes: Sequence[tuple[Box, float]], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes in processing (descending score) order. A
    box is kept iff its IoU with every already-kept box is <= the threshold,
    so no two survivors overlap more than the threshold. Score ties are
    broken by ascending insertion index.
    """
    order = sorted(range(len(scored_boxes)), key=lambda i: (-scored_boxes[i][1], i))
    kept: list[int] = []
    for i in order:
        box = scored_boxes[i][0]
        if all(iou(box, scored_boxes[j][0]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def _greedy_match(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float,
) -> tuple[list[int], list[bool], list[Optional[int]]]:
    """Match one class's detections against one class's ground truth.

    Returns (score-descending detection order, per-detection TP flag indexed
    like ``dets``, matched gt index or None indexed like ``dets``).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_by_image: dict[int, list[int]] = {}
    for j, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_id, []).append(j)
    taken = [False] * len(gts)
    is_tp = [False] * len(dets)
    matched: list[Optional[int]] = [None] * len(dets)
    for i in order:
        det = dets[i]
        best_j = None
        best_iou = 0.0
        for j in gt_by_image.get(det.image_id, ()):
            if taken[j]:
                continue
            overlap = iou(det.box, gts[j].box)
            # lowest gt index wins IoU ties because iteration is ascending
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j is not None:
            taken[best_j] = True
            is_tp[i] = True
            matched[i] = best_j
    return order, is_tp, matched


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated average precision for a single class.

    ``dets`` and ``gts`` must already be restricted to the class under
    evaluation; matching happens per image. A class with no ground truth
    scores 0 by convention.
    """
    npos = len(gts)
    if npos == 0:
        return 0.0
    if not dets:
        return 0.0
    order, is_tp, _ = _greedy_match(dets, gts, iou_threshold)
    tp = np.array([1.0 if is_tp[i] else 0.0 for i in order])
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / npos
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # monotone precision envelope over the recall curve
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass(frozen=True)
class MatchResult:
    """Pooled matching outcome over the known classes.

    ``detections`` holds the known-labeled detections that entered matching,
    with parallel ``is_tp`` flags and ``matched_gt`` indices into the full
    ground-truth list (None for false positives).
    """

    detections: tuple[Detection, ...]
    is_tp: tuple[bool, ...]
    matched_gt: tuple[Optional[int], ...]
    tp_known: int
    fp_known: int
    fn_known: int

    def __post_init__(self) -> None:
        if self.tp_known + self.fp_known != len(self.detections):
            raise ValueError("every known detection must be counted TP or FP")


def match_known_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Run per-class greedy matching over all known classes and pool counts."""
    known_gt_idx: dict[int, list[int]] = {}
    for j, gt in enumerate(gts):
        if gt.label.is_known:
            known_gt_idx.setdefault(gt.label.class_id, []).append(j)
    known_dets = [d for d in dets if d.label.is_known]
    det_idx_by_class: dict[int, list[int]] = {}
    for i, det in enumerate(known_dets):
        det_idx_by_class.setdefault(det.label.class_id, []).append(i)

    is_tp = [False] * len(known_dets)
    matched: list[Optional[int]] = [None] * len(known_dets)
    total_gt = sum(len(v) for v in known_gt_idx.values())
    for class_id, det_indices in det_idx_by_class.items():
        class_dets = [known_dets[i] for i in det_indices]
        gt_indices = known_gt_idx.get(class_id, [])
        class_gts = [gts[j] for j in gt_indices]
        _, flags, match_local = _greedy_match(class_dets, class_gts, iou_threshold)
        for local, flag, mj in zip(det_indices, flags, match_local):
            is_tp[local] = flag
            matched[local] = gt_indices[mj] if mj is not None else None
    tp = sum(is_tp)
    return MatchResult(
        detections=tuple(known_dets),
        is_tp=tuple(is_tp),
        matched_gt=tuple(matched),
        tp_known=tp,
        fp_known=len(known_dets) - tp,
        fn_known=total_gt - tp,
    )


def absolute_open_set_error(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float = 0.5,
) -> int:
    """Count unknown ground-truth objects covered by a known-labeled
    detection that is not a true positive for any known object. Each unknown
    ground truth is counted at most once."""
    match = match_known_detections(dets, gts, iou_threshold)
    false_known = [d for d, tp in zip(match.detections, match.is_tp) if not tp]
    count = 0
    for gt in gts:
        if not gt.label.is_unknown:
            continue
        if any(
            d.image_id == gt.image_id and iou(d.box, gt.box) >= iou_threshold
            for d in false_known
        ):
            count += 1
    return count


def wilderness_impact(match: MatchResult, open_set_errors: int) -> float:
    """Open-set errors per known-labeled prediction: A-OSE / (TP + FP).

    Returns 0 when there are no known-labeled detections; callers should
    treat that case as undefined rather than perfect.
    """
    denom = match.tp_known + match.fp_known
    if denom == 0:
        return 0.0
    return open_set_errors / denom


def hungarian_assign(gain: np.ndarray) -> list[tuple[int, int]]:
    """Assignment of rows to columns maximizing total gain.

    Rectangular matrices are padded internally with zero-gain dummy rows or
    columns, so the smaller side is always fully assigned. Returns (row,
    column) pairs sorted by row.
    """
    gain = np.asarray(gain, dtype=float)
    if gain.size == 0:
        return []
    if gain.ndim != 2:
        raise ValueError(f"gain matrix must be 2-d, got shape {gain.shape}")
    if not np.all(np.isfinite(gain)):
        raise ValueError("gain matrix must be finite")
    n_rows, n_cols = gain.shape
    size = max(n_rows, n_cols)
    padded = np.zeros((size, size), dtype=float)
    padded[:n_rows, :n_cols] = gain
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return sorted(
        (int(r), int(c)) for r, c in zip(rows, cols) if r < n_rows and c < n_cols
    )


def _unknown_class_sets(
    dets: Sequence[Detection], gts: Sequence[GroundTruthObject]
) -> tuple[list[int], list[int], dict[int, list[Detection]], dict[int, list[GroundTruthObject]]]:
    dets_by_class: dict[int, list[Detection]] = {}
    for d in dets:
        if d.label.is_unknown:
            dets_by_class.setdefault(d.label.class_id, []).append(d)
    gts_by_class: dict[int, list[GroundTruthObject]] = {}
    for g in gts:
        if g.label.is_unknown:
            gts_by_class.setdefault(g.label.class_id, []).append(g)
    return sorted(dets_by_class), sorted(gts_by_class), dets_by_class, gts_by_class


def uc_map(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float = 0.5,
) -> tuple[float, dict[int, int]]:
    """Unknown-class mAP: mean AP over true unknown classes under the best
    matching of predicted unknown ids to true unknown classes.

    The gain matrix holds the AP of each predicted unknown id scored against
    each true unknown class; the assignment maximizing total AP is chosen,
    unassigned true classes contribute 0, and the mean runs over all true
    unknown classes. Returns ``(value, {predicted_id: true_class_id})``.
    Raises if the ground truth contains no unknown objects.
    """
    pred_ids, gt_ids, dets_by_class, gts_by_class = _unknown_class_sets(dets, gts)
    if not gt_ids:
        raise ValueError("uc_map undefined: ground truth contains no unknown objects")
    if not pred_ids:
        return 0.0, {}
    gain = np.array(
        [
            [
                average_precision(dets_by_class[u], gts_by_class[v], iou_threshold)
                for v in gt_ids
            ]
            for u in pred_ids
        ]
    )
    pairs = hungarian_assign(gain)
    total = sum(gain[r, c] for r, c in pairs)
    permutation = {pred_ids[r]: gt_ids[c] for r, c in pairs}
    return float(total / len(gt_ids)), permutation


def uc_recall(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    permutation: dict[int, int],
    iou_threshold: float = 0.5,
) -> float:
    """Pooled recall of unknown ground truth under a fixed id matching.

    Each predicted unknown id is scored only against the true class the
    permutation assigns it; unassigned true classes contribute misses. The
    denominator is the total number of unknown ground-truth objects.
    """
    _, gt_ids, dets_by_class, gts_by_class = _unknown_class_sets(dets, gts)
    npos = sum(len(gts_by_class[v]) for v in gt_ids)
    if npos == 0:
        raise ValueError("uc_recall undefined: ground truth contains no unknown objects")
    tp = 0
    for pred_id, gt_id in permutation.items():
        class_dets = dets_by_class.get(pred_id, [])
        class_gts = gts_by_class.get(gt_id, [])
        if not class_dets or not class_gts:
            continue
        _, flags, _ = _greedy_match(class_dets, class_gts, iou_threshold)
        tp += sum(flags)
    return tp / npos


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.05

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError("iou threshold must lie in (0, 1]")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score threshold must lie in [0, 1]")


@dataclass(frozen=True)
class EvalReport:
    """Aggregate evaluation outcome.

    ``map_known`` averages AP over known classes present in the ground
    truth. ``permutation`` records the predicted-to-true unknown id matching
    behind ``uc_map`` and ``uc_recall``. ``warnings`` flags degenerate
    quantities that were reported as 0.
    """

    map_known: float
    wi: float
    a_ose: int
    uc_map: float
    uc_recall: float
    permutation: dict[int, int] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


def _known_ap(args: tuple[list[Detection], list[GroundTruthObject], float]) -> float:
    class_dets, class_gts, threshold = args
    return average_precision(class_dets, class_gts, threshold)


def evaluate(
    gts: Sequence[GroundTruthObject],
    dets: Sequence[Detection],
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Score detections against ground truth and assemble the full report.

    Detections below the score threshold are dropped before any metric is
    computed. Raises if the ground truth has no unknown objects, since the
    unknown-class metrics are undefined there.
    """
    kept = [d for d in dets if d.score >= config.score_threshold]
    warnings: list[str] = []

    known_classes = sorted({g.label.class_id for g in gts if g.label.is_known})
    if known_classes:
        jobs = [
            (
                [d for d in kept if d.label.is_known and d.label.class_id == c],
                [g for g in gts if g.label.is_known and g.label.class_id == c],
                config.iou_threshold,
            )
            for c in known_classes
        ]
        workers = min(thread_cap(), len(jobs))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                aps = list(pool.map(_known_ap, jobs))
        else:
            aps = [_known_ap(job) for job in jobs]
        map_known = float(np.mean(aps))
    else:
        map_known = 0.0
        warnings.append("map_known_degenerate_no_known_ground_truth")

    match = match_known_detections(kept, gts, config.iou_threshold)
    a_ose = absolute_open_set_error(kept, gts, config.iou_threshold)
    if match.tp_known + match.fp_known == 0:
        warnings.append("wi_degenerate_no_known_detections")
    wi = wilderness_impact(match, a_ose)

    uc_map_value, permutation = uc_map(kept, gts, config.iou_threshold)
    uc_recall_value = uc_recall(kept, gts, permutation, config.iou_threshold)

    return EvalReport(
        map_known=map_known,
        wi=wi,
        a_ose=a_ose,
        uc_map=uc_map_value,
        uc_recall=uc_recall_value,
        permutation=permutation,
        warnings=tuple(warnings),
    )
