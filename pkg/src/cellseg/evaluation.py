"""Best-match mIoU evaluation protocol.

For every ground-truth instance the prediction with the highest IoU is
selected (with replacement: one prediction may serve several GT instances).
The selected IoUs are accumulated globally across the dataset and divided
by the total ground-truth instance count. Predictions that are never the
best match for anything do not affect the score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import EmptyInput, UnknownImageId
from .instances import CLASS_WHOLE_CELL, Instance, PredictionSet
from .masks import iou

MODE_WHOLE_CELL = "whole_cell_binary"
MODE_CLASS_AWARE = "class_aware"
EVAL_MODES = (MODE_WHOLE_CELL, MODE_CLASS_AWARE)


@dataclass(frozen=True)
class GtMatch:
    image_id: str
    gt_instance_id: str
    best_pred_id: str | None
    best_iou: float


@dataclass
class EvalReport:
    per_gt: list[GtMatch]
    per_image_sum: dict[str, float] = field(default_factory=dict)
    total_gt_count: int = 0
    miou: float = 0.0


def _mode_instances(pset: PredictionSet, mode: str) -> list[Instance]:
    if mode == MODE_WHOLE_CELL:
        return pset.by_class(CLASS_WHOLE_CELL)
    if mode == MODE_CLASS_AWARE:
        return list(pset.instances)
    raise ValueError(f"unknown eval mode: {mode!r}")


def best_match(
    gt: Instance, preds: list[Instance], mode: str = MODE_WHOLE_CELL
) -> tuple[str | None, float]:
    """Prediction with the highest IoU against gt, or (None, 0.0).

    In class_aware mode only predictions sharing gt's class are candidates.
    Ties keep the earliest candidate in list order.
    """
    best_id: str | None = None
    best = 0.0
    for pred in preds:
        if mode == MODE_CLASS_AWARE and pred.class_label != gt.class_label:
            continue
        v = iou(gt.mask, pred.mask)
        if v > best:
            best = v
            best_id = pred.instance_id
    return best_id, best


def _evaluate_image(
    gt_set: PredictionSet,
    candidates: list[Instance],
    mode: str,
    with_replacement: bool,
) -> list[GtMatch]:
    matches: list[GtMatch] = []
    candidates = list(candidates)
    for gt_inst in _mode_instances(gt_set, mode):
        pred_id, best = best_match(gt_inst, candidates, mode)
        if not with_replacement and pred_id is not None:
            candidates = [c for c in candidates if c.instance_id != pred_id]
        matches.append(GtMatch(gt_set.image_id, gt_inst.instance_id, pred_id, best))
    return matches


def evaluate_dataset(
    gt_sets: list[PredictionSet],
    pred_sets: list[PredictionSet],
    mode: str = MODE_WHOLE_CELL,
    with_replacement: bool = True,
    threads: int = 1,
) -> EvalReport:
    """Score predictions against ground truth and build the full report.

    Images with no predictions contribute zero IoU for each of their GT
    instances. with_replacement=False enables a greedy ablation mode where
    each prediction may be consumed by at most one GT instance. Per-image
    work runs on up to `threads` workers; the report is always reduced in
    image_id order, so the result never depends on thread count.
    """
    gt_by_image = {s.image_id: s for s in gt_sets}
    preds_by_image: dict[str, list[Instance]] = {iid: [] for iid in gt_by_image}
    for pset in pred_sets:
        if pset.image_id not in gt_by_image:
            raise UnknownImageId(
                f"prediction set references unknown image {pset.image_id!r}"
            )
        preds_by_image[pset.image_id].extend(_mode_instances(pset, mode))

    image_ids = sorted(gt_by_image)
    jobs = [
        (gt_by_image[iid], preds_by_image[iid], mode, with_replacement)
        for iid in image_ids
    ]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda j: _evaluate_image(*j), jobs))
    else:
        results = [_evaluate_image(*j) for j in jobs]

    per_gt: list[GtMatch] = []
    per_image_sum: dict[str, float] = {}
    total = 0.0
    count = 0
    for image_id, matches in zip(image_ids, results):
        image_sum = 0.0
        for m in matches:
            per_gt.append(m)
            image_sum += m.best_iou
            count += 1
        per_image_sum[image_id] = image_sum
        total += image_sum

    if count == 0:
        raise EmptyInput("no ground-truth instances to evaluate")
    return EvalReport(
        per_gt=per_gt,
        per_image_sum=per_image_sum,
        total_gt_count=count,
        miou=total / count,
    )


def worst_k(report: EvalReport, k: int) -> list[GtMatch]:
    """The k ground-truth entries with the lowest best IoU, ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(
        report.per_gt, key=lambda e: (e.best_iou, e.image_id, e.gt_instance_id)
    )
    return ordered[:k]
