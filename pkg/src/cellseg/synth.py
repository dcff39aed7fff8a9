"""Synthetic microscopy-like fixtures with known ground truth.

Cells are ellipse pairs (nucleus inside a larger cell ellipse). perturb()
simulates noisy model predictions: smooth boundary jitter, occasional
cytoplasm dropout (the cell collapses to its nucleus) and nucleus merging
(two neighbouring cells predicted as one). All randomness derives from
explicit seeds, so generation is reproducible and embarrassingly parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .errors import PlacementFailure
from .instances import (
    CLASS_CYTOPLASM,
    CLASS_NUCLEUS,
    CLASS_WHOLE_CELL,
    Instance,
    PredictionSet,
)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    min_cells: int = 1
    max_cells: int = 5
    min_radius: int = 8
    max_radius: int = 16
    # nucleus linear size relative to the cell ellipse axes
    nucleus_ratio: tuple[float, float] = (0.4, 0.7)
    # fraction of a new cell's area allowed to overlap existing cells
    overlap_allowance: float = 0.1
    max_retries: int = 80


@dataclass(frozen=True)
class ModelKnobs:
    """Noise model for one simulated prediction source."""

    jitter_sigma: float = 1.5  # boundary displacement, pixels
    jitter_smoothing: float = 4.0  # spatial scale of the displacement field
    dropout_prob: float = 0.05  # cytoplasm omitted, cell collapses to nucleus
    merge_prob: float = 0.05  # cell merged with its nearest neighbour


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def gen_image(spec: SynthSpec, index: int) -> tuple[np.ndarray, PredictionSet]:
    """Deterministic synthetic image and its GT prediction set."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    h, w = spec.height, spec.width
    n_cells = int(rng.integers(spec.min_cells, spec.max_cells + 1))

    occupied = np.zeros((h, w), dtype=bool)
    cells: list[tuple[np.ndarray, np.ndarray]] = []  # (whole, nucleus)
    for _ in range(n_cells):
        placed = False
        for _ in range(spec.max_retries):
            ry = float(rng.uniform(spec.min_radius, spec.max_radius))
            rx = float(rng.uniform(spec.min_radius, spec.max_radius))
            cy = float(rng.uniform(ry, h - 1 - ry))
            cx = float(rng.uniform(rx, w - 1 - rx))
            angle = float(rng.uniform(0.0, np.pi))
            cell = _ellipse(h, w, cy, cx, ry, rx, angle)
            cell_area = int(cell.sum())
            if cell_area == 0:
                continue
            overlap = int((cell & occupied).sum())
            if overlap > spec.overlap_allowance * cell_area:
                continue
            ratio = float(rng.uniform(*spec.nucleus_ratio))
            # nucleus offset within the cell, well inside the boundary
            ocy = cy + float(rng.uniform(-0.2, 0.2)) * ry
            ocx = cx + float(rng.uniform(-0.2, 0.2)) * rx
            nucleus = _ellipse(h, w, ocy, ocx, ry * ratio, rx * ratio, angle) & cell
            if not nucleus.any():
                continue
            occupied |= cell
            cells.append((cell, nucleus))
            placed = True
            break
        if not placed:
            raise PlacementFailure(
                f"could not place cell {len(cells) + 1}/{n_cells} "
                f"after {spec.max_retries} retries (image index {index})"
            )

    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = (225, 225, 235)  # pale background
    instances: list[Instance] = []
    for k, (cell, nucleus) in enumerate(cells, start=1):
        cytoplasm = cell & ~nucleus
        image[cytoplasm] = (170, 150, 210)
        image[nucleus] = (90, 60, 140)
        instances.append(Instance(f"{k}.{CLASS_WHOLE_CELL}", CLASS_WHOLE_CELL, cell, 1.0, "gt"))
        instances.append(Instance(f"{k}.{CLASS_NUCLEUS}", CLASS_NUCLEUS, nucleus, 1.0, "gt"))
        if cytoplasm.any():
            instances.append(
                Instance(f"{k}.{CLASS_CYTOPLASM}", CLASS_CYTOPLASM, cytoplasm, 1.0, "gt")
            )
    noise = rng.integers(-6, 7, size=image.shape)
    image = np.clip(image.astype(np.int16) + noise, 0, 255).astype(np.uint8)

    image_id = f"synth_{index:05d}"
    gt = PredictionSet(image_id=image_id, source="gt", height=h, width=w, instances=instances)
    return image, gt


def _jitter_mask(mask: np.ndarray, sigma: float, smoothing: float, rng) -> np.ndarray:
    """Perturb the mask boundary by a smooth random field of ~sigma pixels."""
    if sigma <= 0.0 or not mask.any():
        return mask.copy()
    signed = distance_transform_edt(mask) - distance_transform_edt(~mask)
    field = gaussian_filter(rng.standard_normal(mask.shape), smoothing)
    std = field.std()
    if std > 0:
        field *= sigma / std
    out = (signed + field) > 0
    if not out.any():  # never emit a degenerate prediction
        return mask.copy()
    return out


def perturb(gt: PredictionSet, knobs: ModelKnobs, seed: int, source: str = "model") -> PredictionSet:
    """Simulated model predictions for one image's ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    by_k: dict[int, dict[str, np.ndarray]] = {}
    for inst in gt.instances:
        k_str, _, cls = inst.instance_id.partition(".")
        by_k.setdefault(int(k_str), {})[cls] = inst.mask

    ks = sorted(by_k)
    merged_into: dict[int, int] = {}
    for k in ks:
        if k in merged_into:
            continue
        if knobs.merge_prob > 0 and rng.random() < knobs.merge_prob:
            partner = _nearest_neighbor(k, ks, by_k, merged_into)
            if partner is not None:
                merged_into[partner] = k

    instances: list[Instance] = []
    for k in ks:
        if k in merged_into:
            continue
        cell = by_k[k][CLASS_WHOLE_CELL]
        nucleus = by_k[k].get(CLASS_NUCLEUS, np.zeros_like(cell))
        for donor, receiver in merged_into.items():
            if receiver == k:
                cell = cell | by_k[donor][CLASS_WHOLE_CELL]
                nucleus = nucleus | by_k[donor].get(CLASS_NUCLEUS, np.zeros_like(cell))
        cell = _jitter_mask(cell, knobs.jitter_sigma, knobs.jitter_smoothing, rng)
        nucleus = _jitter_mask(nucleus, knobs.jitter_sigma, knobs.jitter_smoothing, rng) & cell
        if not nucleus.any():
            nucleus = by_k[k].get(CLASS_NUCLEUS, np.zeros_like(cell)) & cell
        if knobs.dropout_prob > 0 and rng.random() < knobs.dropout_prob and nucleus.any():
            cell = nucleus.copy()  # cytoplasm omitted entirely
        score = float(rng.uniform(0.5, 1.0))
        instances.append(Instance(f"{k}.{CLASS_WHOLE_CELL}", CLASS_WHOLE_CELL, cell, score, source))
        if nucleus.any():
            instances.append(Instance(f"{k}.{CLASS_NUCLEUS}", CLASS_NUCLEUS, nucleus, score, source))
        cytoplasm = cell & ~nucleus
        if cytoplasm.any():
            instances.append(
                Instance(f"{k}.{CLASS_CYTOPLASM}", CLASS_CYTOPLASM, cytoplasm, score, source)
            )
    return PredictionSet(
        image_id=gt.image_id, source=source, height=gt.height, width=gt.width, instances=instances
    )


def _nearest_neighbor(
    k: int, ks: list[int], by_k: dict, merged_into: dict[int, int]
) -> int | None:
    """Closest other cell by centroid distance, not already merged away."""
    base = by_k[k][CLASS_WHOLE_CELL]
    cy, cx = (c.mean() for c in np.nonzero(base))
    best, best_d = None, np.inf
    for other in ks:
        if other == k or other in merged_into:
            continue
        m = by_k[other][CLASS_WHOLE_CELL]
        oy, ox = (c.mean() for c in np.nonzero(m))
        d = (oy - cy) ** 2 + (ox - cx) ** 2
        if d < best_d:
            best, best_d = other, d
    return best
