"""Reference-anchored majority-voting ensemble.

One prediction set is the reference. Each of its whole-cell instances is
matched against every other model's best-IoU candidate (gated by a minimum
IoU) and refined by strict per-pixel majority voting over the matched
masks. Predictions never used by any vote pass through to the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import (
    DimensionMismatch,
    EmptyInput,
    FewerThanTwoSets,
    MissingReference,
)
from .instances import CLASS_WHOLE_CELL, Instance, PredictionSet
from .masks import iou, majority_vote

REUSE_WITH_REPLACEMENT = "with_replacement"
REUSE_WITHOUT_REPLACEMENT = "without_replacement"

ENSEMBLE_SOURCE = "ensemble"


@dataclass(frozen=True)
class EnsembleConfig:
    reference_source: str
    min_iou: float = 0.5
    include_reference_in_vote: bool = True
    fallback_to_reference: bool = True
    reuse_policy: str = REUSE_WITHOUT_REPLACEMENT

    def __post_init__(self):
        if not 0.0 <= self.min_iou <= 1.0:
            raise ValueError(f"min_iou must be in [0, 1], got {self.min_iou}")
        if self.reuse_policy not in (REUSE_WITH_REPLACEMENT, REUSE_WITHOUT_REPLACEMENT):
            raise ValueError(f"unknown reuse_policy: {self.reuse_policy!r}")


@dataclass
class EnsembleOutput:
    refined: PredictionSet
    # refined instance_id -> contributing (source, instance_id) pairs
    used_map: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    passthrough: list[Instance] = field(default_factory=list)


def match_for_reference(
    ref_inst: Instance,
    candidates: PredictionSet,
    min_iou: float,
    consumed: set[str] | None = None,
) -> Instance | None:
    """Best same-class candidate by IoU, if it clears the threshold.

    consumed holds instance_ids already used under the without-replacement
    policy. Equal-IoU ties go to the higher-score candidate, then the
    lower instance_id.
    """
    best: Instance | None = None
    best_iou = -1.0
    for cand in candidates.instances:
        if cand.class_label != ref_inst.class_label:
            continue
        if consumed is not None and cand.instance_id in consumed:
            continue
        v = iou(ref_inst.mask, cand.mask)
        better = (
            best is None
            or v > best_iou
            or (v == best_iou and cand.score > best.score)
            or (
                v == best_iou
                and cand.score == best.score
                and cand.instance_id < best.instance_id
            )
        )
        if better:
            best = cand
            best_iou = v
    if best is None or best_iou < min_iou or best_iou == 0.0:
        return None
    return best


def refine_instance(
    ref_inst: Instance, participants: list[Instance], cfg: EnsembleConfig
) -> Instance:
    """Majority-vote the participant masks; class and score come from the reference."""
    voters = [p.mask for p in participants]
    if not voters:
        if cfg.fallback_to_reference:
            return replace(ref_inst, source=ENSEMBLE_SOURCE)
        raise EmptyInput("no voting participants and reference excluded")
    voted = majority_vote(voters)
    if not voted.any() and cfg.fallback_to_reference:
        voted = ref_inst.mask
    return replace(ref_inst, mask=voted, source=ENSEMBLE_SOURCE)


def ensemble_predictions(
    sets: list[PredictionSet], cfg: EnsembleConfig
) -> EnsembleOutput:
    """Ensemble the prediction sets of one image.

    Reference whole-cell instances are processed in descending score order;
    non-whole-cell reference instances ride through unchanged. Every
    non-reference instance ends up either in used_map or in passthrough.
    """
    if len(sets) < 2:
        raise FewerThanTwoSets(f"need at least 2 prediction sets, got {len(sets)}")
    refs = [s for s in sets if s.source == cfg.reference_source]
    if len(refs) != 1:
        raise MissingReference(
            f"reference source {cfg.reference_source!r} matches {len(refs)} sets"
        )
    ref = refs[0]
    others = [s for s in sets if s is not refs[0]]
    for s in sets:
        if (s.height, s.width) != (ref.height, ref.width):
            raise DimensionMismatch(
                f"set {s.source!r} size {(s.height, s.width)} differs from "
                f"reference {(ref.height, ref.width)}"
            )

    consumed: dict[str, set[str]] = {s.source: set() for s in others}
    used_map: dict[str, list[tuple[str, str]]] = {}
    refined_instances: list[Instance] = []

    ref_cells = sorted(
        ref.by_class(CLASS_WHOLE_CELL), key=lambda i: (-i.score, i.instance_id)
    )
    for ref_inst in ref_cells:
        contributions: list[tuple[str, str]] = [(ref.source, ref_inst.instance_id)]
        matched: list[Instance] = []
        for other in sorted(others, key=lambda s: s.source):
            skip = (
                consumed[other.source]
                if cfg.reuse_policy == REUSE_WITHOUT_REPLACEMENT
                else None
            )
            cand = match_for_reference(ref_inst, other, cfg.min_iou, skip)
            if cand is not None:
                matched.append(cand)
                consumed[other.source].add(cand.instance_id)
                contributions.append((other.source, cand.instance_id))
        participants = matched + ([ref_inst] if cfg.include_reference_in_vote else [])
        refined_instances.append(refine_instance(ref_inst, participants, cfg))
        used_map[ref_inst.instance_id] = contributions

    # Non-whole-cell reference instances ride through to class merging.
    for inst in ref.instances:
        if inst.class_label != CLASS_WHOLE_CELL:
            refined_instances.append(replace(inst, source=ENSEMBLE_SOURCE))
            used_map[inst.instance_id] = [(ref.source, inst.instance_id)]

    passthrough: list[Instance] = []
    for other in sorted(others, key=lambda s: s.source):
        for inst in other.instances:
            if inst.instance_id not in consumed[other.source]:
                # tag with the owning set's source so passthrough ids stay unique
                passthrough.append(replace(inst, source=other.source))

    refined = PredictionSet(
        image_id=ref.image_id,
        source=ENSEMBLE_SOURCE,
        height=ref.height,
        width=ref.width,
        instances=refined_instances,
    )
    return EnsembleOutput(refined=refined, used_map=used_map, passthrough=passthrough)


def ensemble_datasets(
    model_sets: list[list[PredictionSet]], cfg: EnsembleConfig, threads: int = 1
) -> dict[str, EnsembleOutput]:
    """Run the ensemble per image across multi-image documents.

    model_sets holds one list of per-image PredictionSets per model. Only
    images present in the reference model are ensembled; a model missing
    an image simply contributes no votes there. Per-image work may run on
    up to `threads` workers; results are keyed and ordered by image_id.
    """
    by_image: dict[str, list[PredictionSet]] = {}
    for sets in model_sets:
        for pset in sets:
            by_image.setdefault(pset.image_id, []).append(pset)
    ref_images = sorted(
        {s.image_id for sets in model_sets for s in sets if s.source == cfg.reference_source}
    )
    if not ref_images:
        raise MissingReference(f"no sets from reference source {cfg.reference_source!r}")
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda iid: ensemble_predictions(by_image[iid], cfg), ref_images)
            )
    else:
        results = [ensemble_predictions(by_image[iid], cfg) for iid in ref_images]
    return dict(zip(ref_images, results))


def submission_set(output: EnsembleOutput) -> PredictionSet:
    """Refined instances plus passthrough, as one submission-style set.

    Passthrough instance ids are prefixed with their source to stay unique.
    """
    instances = list(output.refined.instances)
    for inst in output.passthrough:
        instances.append(
            replace(inst, instance_id=f"passthrough.{inst.source}.{inst.instance_id}")
        )
    return replace(output.refined, instances=instances)
