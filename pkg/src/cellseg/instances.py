"""Instance and per-image prediction containers shared by eval, ensemble and I/O."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, SchemaViolation
from .masks import as_mask

CLASS_NUCLEUS = "nucleus"
CLASS_CYTOPLASM = "cytoplasm"
CLASS_WHOLE_CELL = "whole_cell"
CLASS_LABELS = (CLASS_NUCLEUS, CLASS_CYTOPLASM, CLASS_WHOLE_CELL)


@dataclass
class Instance:
    """One predicted or ground-truth object."""

    instance_id: str
    class_label: str
    mask: np.ndarray
    score: float
    source: str

    def with_mask(self, mask: np.ndarray) -> "Instance":
        return replace(self, mask=mask)


@dataclass
class PredictionSet:
    """All instances for one image from one source (model, TTA variant, ensemble)."""

    image_id: str
    source: str
    height: int
    width: int
    instances: list[Instance] = field(default_factory=list)

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise SchemaViolation(
                f"image {self.image_id!r}: non-positive size {self.height}x{self.width}"
            )
        seen = set()
        for inst in self.instances:
            if inst.class_label not in CLASS_LABELS:
                raise SchemaViolation(
                    f"image {self.image_id!r}: unknown class {inst.class_label!r}"
                )
            if not 0.0 <= inst.score <= 1.0:
                raise SchemaViolation(
                    f"image {self.image_id!r}: score {inst.score} out of [0, 1]"
                )
            if inst.instance_id in seen:
                raise SchemaViolation(
                    f"image {self.image_id!r}: duplicate instance_id {inst.instance_id!r}"
                )
            seen.add(inst.instance_id)
            m = as_mask(inst.mask)
            if m.shape != (self.height, self.width):
                raise DimensionMismatch(
                    f"image {self.image_id!r}: instance {inst.instance_id!r} mask "
                    f"{m.shape} does not match image {(self.height, self.width)}"
                )

    def by_class(self, class_label: str) -> list[Instance]:
        return [i for i in self.instances if i.class_label == class_label]
