"""Binary mask kernel: RLE codec, set algebra, IoU, flips, majority voting.

Masks are immutable-by-convention 2-D boolean numpy arrays (row 0 at the
top, col 0 at the left). Every operation here is a pure function, so they
are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, MalformedRuns, SizeMismatch

FLIP_HORIZONTAL = "horizontal"
FLIP_VERTICAL = "vertical"
FLIP_DIAGONAL = "diagonal"  # 180 degree rotation: horizontal then vertical
FLIP_AXES = (FLIP_HORIZONTAL, FLIP_VERTICAL, FLIP_DIAGONAL)


@dataclass(frozen=True)
class Rle:
    """Column-major run-length counts for a binary mask.

    Pixels are enumerated down each column, columns left to right. Counts
    alternate background/foreground starting with background; only the
    first count may be zero.
    """

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]


def as_mask(arr) -> np.ndarray:
    """Coerce to a 2-D bool array, validating dimensions."""
    m = np.asarray(arr)
    if m.ndim != 2:
        raise DimensionMismatch(f"mask must be 2-D, got {m.ndim}-D")
    h, w = m.shape
    if h < 1 or w < 1:
        raise DimensionMismatch(f"mask dimensions must be positive, got {h}x{w}")
    return m.astype(bool, copy=False)


def area(mask) -> int:
    return int(np.count_nonzero(as_mask(mask)))


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")


def rle_encode(mask) -> Rle:
    m = as_mask(mask)
    h, w = m.shape
    flat = m.ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    if flat[0]:
        counts = (0, *runs.tolist())
    else:
        counts = tuple(runs.tolist())
    return Rle(size=(h, w), counts=counts)


def rle_decode(rle: Rle) -> np.ndarray:
    h, w = rle.size
    if h < 1 or w < 1:
        raise DimensionMismatch(f"RLE size must be positive, got {h}x{w}")
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise MalformedRuns("RLE counts must be a non-empty sequence")
    if np.any(counts < 0):
        raise MalformedRuns("negative run length")
    if np.any(counts[1:] == 0):
        raise MalformedRuns("zero-length run after the first count")
    total = int(counts.sum())
    if total != h * w:
        raise SizeMismatch(f"counts sum to {total}, expected {h}x{w}={h * w}")
    values = np.arange(counts.size) % 2  # 0 = background, 1 = foreground
    flat = np.repeat(values, counts).astype(bool)
    return flat.reshape((h, w), order="F")


def intersection(a, b) -> np.ndarray:
    a, b = as_mask(a), as_mask(b)
    _require_same_shape(a, b)
    return a & b


def union(a, b) -> np.ndarray:
    a, b = as_mask(a), as_mask(b)
    _require_same_shape(a, b)
    return a | b


def difference(a, b) -> np.ndarray:
    """Pixels in a but not in b."""
    a, b = as_mask(a), as_mask(b)
    _require_same_shape(a, b)
    return a & ~b


def set_ops(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(intersection, union, a minus b) in one call."""
    return intersection(a, b), union(a, b), difference(a, b)


def iou(a, b) -> float:
    """|A∩B| / |A∪B|; 0.0 when both masks are empty."""
    a, b = as_mask(a), as_mask(b)
    _require_same_shape(a, b)
    inter = int(np.count_nonzero(a & b))
    uni = int(np.count_nonzero(a)) + int(np.count_nonzero(b)) - inter
    if uni == 0:
        return 0.0
    return inter / uni


def majority_vote(masks) -> np.ndarray:
    """Pixel set iff set in strictly more than half of the input masks."""
    masks = [as_mask(m) for m in masks]
    if not masks:
        raise EmptyInput("majority_vote needs at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        _require_same_shape(masks[0], m)
    k = len(masks)
    votes = np.zeros(shape, dtype=np.int32)
    for m in masks:
        votes += m
    return votes * 2 > k


def flip(mask, axis: str) -> np.ndarray:
    m = as_mask(mask)
    if axis == FLIP_HORIZONTAL:
        return m[:, ::-1].copy()
    if axis == FLIP_VERTICAL:
        return m[::-1, :].copy()
    if axis == FLIP_DIAGONAL:
        return m[::-1, ::-1].copy()
    raise ValueError(f"unknown flip axis: {axis!r}")
