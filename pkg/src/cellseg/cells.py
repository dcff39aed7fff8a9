"""Whole-cell / nucleus pairing and the final two-class result.

A Cell is the paired output: the whole-cell mask plus a nucleus sub-mask
(clipped to the cell) and the cytoplasm derived as cell minus nucleus.
The set-difference construction guarantees the partition invariants by
construction; cytoplasm-class predictions are not consulted for the masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .instances import (
    CLASS_NUCLEUS,
    CLASS_WHOLE_CELL,
    Instance,
    PredictionSet,
)
from .masks import as_mask, difference, intersection

DEFAULT_CONTAINMENT_MIN = 0.5


@dataclass
class Cell:
    cell_id: str
    cell_mask: np.ndarray
    nucleus_mask: np.ndarray  # empty when no nucleus paired
    cytoplasm_mask: np.ndarray
    score: float
    nucleus_id: str | None = None

    @property
    def has_nucleus(self) -> bool:
        return self.nucleus_id is not None


def pair_nucleus(
    cell_inst: Instance,
    nucleus_preds: list[Instance],
    containment_min: float = DEFAULT_CONTAINMENT_MIN,
) -> Instance | None:
    """Nucleus maximizing overlap with the cell, gated by containment.

    A candidate qualifies when at least containment_min of its own area
    lies inside the cell. Among qualifiers the largest intersection wins;
    ties go to the lower instance_id.
    """
    if cell_inst.class_label != CLASS_WHOLE_CELL:
        raise ValueError(f"expected a whole_cell instance, got {cell_inst.class_label!r}")
    cell = as_mask(cell_inst.mask)
    best: Instance | None = None
    best_inter = 0
    for cand in nucleus_preds:
        if cand.class_label != CLASS_NUCLEUS:
            raise ValueError(f"expected nucleus instances, got {cand.class_label!r}")
        n = as_mask(cand.mask)
        if n.shape != cell.shape:
            raise DimensionMismatch(
                f"nucleus {cand.instance_id!r} shape {n.shape} vs cell {cell.shape}"
            )
        n_area = int(np.count_nonzero(n))
        inter = int(np.count_nonzero(n & cell))
        if n_area == 0 or inter / n_area < containment_min:
            continue
        if inter > best_inter or (
            inter == best_inter and best is not None and cand.instance_id < best.instance_id
        ):
            best = cand
            best_inter = inter
    return best


def compose_cell(cell_inst: Instance, nucleus: Instance | None) -> Cell:
    """Build a Cell; the nucleus is clipped to the cell mask."""
    cell = as_mask(cell_inst.mask)
    if nucleus is not None:
        nucleus_mask = intersection(cell, nucleus.mask)
        nucleus_id = nucleus.instance_id
    else:
        nucleus_mask = np.zeros_like(cell)
        nucleus_id = None
    return Cell(
        cell_id=cell_inst.instance_id,
        cell_mask=cell,
        nucleus_mask=nucleus_mask,
        cytoplasm_mask=difference(cell, nucleus_mask),
        score=cell_inst.score,
        nucleus_id=nucleus_id,
    )


def merge_classes(
    whole_cells: PredictionSet,
    nuclei: PredictionSet,
    cytoplasms: PredictionSet | None = None,
    containment_min: float = DEFAULT_CONTAINMENT_MIN,
) -> list[Cell]:
    """One Cell per whole-cell instance; each nucleus consumed at most once.

    Cells are processed greedily in descending score order (ties by lower
    instance_id) so a shared nucleus candidate goes to the stronger cell.
    Cytoplasm-class predictions are accepted for audit but do not shape
    the output masks.
    """
    del cytoplasms  # retained in caller metadata only
    cell_insts = sorted(
        whole_cells.by_class(CLASS_WHOLE_CELL),
        key=lambda i: (-i.score, i.instance_id),
    )
    available = list(nuclei.by_class(CLASS_NUCLEUS))
    cells: list[Cell] = []
    for cell_inst in cell_insts:
        chosen = pair_nucleus(cell_inst, available, containment_min)
        if chosen is not None:
            available = [n for n in available if n.instance_id != chosen.instance_id]
        cells.append(compose_cell(cell_inst, chosen))
    return cells


def semantic_union(
    instances: list[Instance], shape: tuple[int, int] | None = None
) -> np.ndarray:
    """Pixel-wise union of all instance masks.

    This is the image-level binary target for a semantic branch covering
    every cell instance at once. shape is required when instances is empty
    (an all-background mask of that shape is returned).
    """
    out: np.ndarray | None = None
    for inst in instances:
        m = as_mask(inst.mask)
        if out is None:
            out = m.copy()
        elif m.shape != out.shape:
            raise DimensionMismatch(f"mask shapes differ: {m.shape} vs {out.shape}")
        else:
            out |= m
    if out is None:
        if shape is None:
            raise ValueError("shape is required for an empty instance list")
        return np.zeros(shape, dtype=bool)
    return out
