"""Dataset ingestion, prediction interchange and report serialization.

Ground truth lives on disk as one image file plus one grayscale PNG per
instance ("<image_id>_<k>.png", k starting at 1), where nucleus pixels
carry one configured label value and cytoplasm pixels another. Prediction
interchange is a canonical JSON document with uncompressed column-major
RLE counts. Loaders reject malformed input rather than repairing it.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import random
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    DimensionMismatch,
    InputError,
    IoFailure,
    MissingMask,
    SchemaViolation,
    UnexpectedLabelValue,
)
from .evaluation import EvalReport
from .instances import (
    CLASS_CYTOPLASM,
    CLASS_NUCLEUS,
    CLASS_WHOLE_CELL,
    Instance,
    PredictionSet,
)
from .masks import Rle, rle_decode, rle_encode

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_NUCLEUS_VALUE = 40
DEFAULT_CYTOPLASM_VALUE = 20

_MASK_NAME = re.compile(r"^(?P<image_id>.+)_(?P<k>\d+)\.png$")


@dataclass(frozen=True)
class DatasetLayout:
    images_dir: Path
    masks_dir: Path
    nucleus_value: int = DEFAULT_NUCLEUS_VALUE
    cytoplasm_value: int = DEFAULT_CYTOPLASM_VALUE


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"failed writing {path}: {exc}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_image(path: Path, img: np.ndarray) -> None:
    """PNG-encode an RGB image (or grayscale label mask) atomically."""
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise IoFailure(f"PNG encoding failed for {path}")
    _atomic_write_bytes(Path(path), buf.tobytes())


def read_image(path: Path) -> np.ndarray:
    data = np.fromfile(str(path), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_COLOR)
    if img is None:
        raise IoFailure(f"could not decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _read_gray(path: Path) -> np.ndarray:
    data = np.fromfile(str(path), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise IoFailure(f"could not decode mask {path}")
    return img


def load_ground_truth(layout: DatasetLayout) -> list[PredictionSet]:
    """One PredictionSet per image: per instance a whole_cell mask plus
    nucleus / cytoplasm sub-instances (when non-empty)."""
    images_dir = Path(layout.images_dir)
    masks_dir = Path(layout.masks_dir)
    if not images_dir.is_dir():
        raise InputError(f"images directory not found: {images_dir}")
    if not masks_dir.is_dir():
        raise InputError(f"masks directory not found: {masks_dir}")

    mask_files: dict[str, dict[int, Path]] = {}
    for path in sorted(masks_dir.iterdir()):
        m = _MASK_NAME.match(path.name)
        if m is None:
            continue
        mask_files.setdefault(m["image_id"], {})[int(m["k"])] = path

    image_paths = sorted(p for p in images_dir.iterdir() if p.suffix == ".png")
    if not image_paths:
        log.warning("no images found in %s; returning empty dataset", images_dir)
        return []

    sets: list[PredictionSet] = []
    for img_path in image_paths:
        image_id = img_path.stem
        img = read_image(img_path)
        h, w = img.shape[:2]
        per_image = mask_files.get(image_id, {})
        if not per_image:
            log.warning("image %s has no instance masks", image_id)
            sets.append(PredictionSet(image_id=image_id, source="gt", height=h, width=w))
            continue
        expected = set(range(1, max(per_image) + 1))
        missing = expected - set(per_image)
        if missing:
            raise MissingMask(
                f"image {image_id!r}: mask indices not contiguous, missing {sorted(missing)}"
            )
        instances: list[Instance] = []
        for k in sorted(per_image):
            instances.extend(
                _instances_from_mask_file(per_image[k], image_id, k, (h, w), layout)
            )
        pset = PredictionSet(
            image_id=image_id, source="gt", height=h, width=w, instances=instances
        )
        pset.validate()
        sets.append(pset)
    return sets


def _instances_from_mask_file(
    path: Path, image_id: str, k: int, shape: tuple[int, int], layout: DatasetLayout
) -> list[Instance]:
    raw = _read_gray(path)
    if raw.shape != shape:
        raise DimensionMismatch(
            f"{path.name}: mask shape {raw.shape} does not match image {shape}"
        )
    allowed = {0, layout.nucleus_value, layout.cytoplasm_value}
    values = set(np.unique(raw).tolist())
    bad = values - allowed
    if bad:
        raise UnexpectedLabelValue(f"{path.name}: unexpected pixel values {sorted(bad)}")
    nucleus = raw == layout.nucleus_value
    cytoplasm = raw == layout.cytoplasm_value
    whole = nucleus | cytoplasm
    if not whole.any():
        raise UnexpectedLabelValue(f"{path.name}: empty ground-truth mask")
    out = [
        Instance(f"{k}.{CLASS_WHOLE_CELL}", CLASS_WHOLE_CELL, whole, 1.0, "gt")
    ]
    if nucleus.any():
        out.append(Instance(f"{k}.{CLASS_NUCLEUS}", CLASS_NUCLEUS, nucleus, 1.0, "gt"))
    if cytoplasm.any():
        out.append(
            Instance(f"{k}.{CLASS_CYTOPLASM}", CLASS_CYTOPLASM, cytoplasm, 1.0, "gt")
        )
    return out


def split_train_val(
    image_ids: list[str], val_fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """Deterministic disjoint split; |val| = round(val_fraction * N)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    ids = list(image_ids)
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_val = round(val_fraction * len(ids))
    val = sorted(ids[:n_val])
    train = sorted(ids[n_val:])
    return train, val


def write_ground_truth_image(
    layout: DatasetLayout, image: np.ndarray, gt_set: PredictionSet
) -> None:
    """Write one image plus its per-instance label masks in layout form.

    GT instance ids must follow the "<k>.<class>" convention so the
    nucleus/cytoplasm sub-instances of cell k land in the same mask file.
    """
    write_image(Path(layout.images_dir) / f"{gt_set.image_id}.png", image)
    by_k: dict[int, dict[str, np.ndarray]] = {}
    for inst in gt_set.instances:
        k_str, _, cls = inst.instance_id.partition(".")
        by_k.setdefault(int(k_str), {})[cls] = inst.mask
    for k in sorted(by_k):
        parts = by_k[k]
        label = np.zeros((gt_set.height, gt_set.width), dtype=np.uint8)
        if CLASS_CYTOPLASM in parts:
            label[parts[CLASS_CYTOPLASM]] = layout.cytoplasm_value
        if CLASS_NUCLEUS in parts:
            label[parts[CLASS_NUCLEUS]] = layout.nucleus_value
        write_image(Path(layout.masks_dir) / f"{gt_set.image_id}_{k}.png", label)


# --- prediction interchange -------------------------------------------------


def _instance_to_entry(inst: Instance) -> dict:
    rle = rle_encode(inst.mask)
    return {
        "instance_id": inst.instance_id,
        "class_label": inst.class_label,
        "score": inst.score,
        "source": inst.source,
        "rle": {"size": list(rle.size), "counts": list(rle.counts)},
    }


def sets_to_document(sets: list[PredictionSet]) -> dict:
    images = []
    for pset in sorted(sets, key=lambda s: s.image_id):
        pset.validate()
        images.append(
            {
                "image_id": pset.image_id,
                "source": pset.source,
                "height": pset.height,
                "width": pset.width,
                "instances": [_instance_to_entry(inst) for inst in pset.instances],
            }
        )
    return {"schema_version": SCHEMA_VERSION, "images": images}


def document_to_sets(doc: dict) -> list[PredictionSet]:
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaViolation(
            f"expected schema_version {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
        )
    sets = []
    for entry in doc.get("images", []):
        try:
            image_id = entry["image_id"]
            h, w = int(entry["height"]), int(entry["width"])
            instances = []
            for raw in entry["instances"]:
                rle = Rle(
                    size=tuple(raw["rle"]["size"]), counts=tuple(raw["rle"]["counts"])
                )
                try:
                    mask = rle_decode(rle)
                except InputError as exc:
                    raise SchemaViolation(f"image {image_id!r}: bad RLE: {exc}") from exc
                instances.append(
                    Instance(
                        instance_id=str(raw["instance_id"]),
                        class_label=str(raw["class_label"]),
                        mask=mask,
                        score=float(raw["score"]),
                        source=str(raw["source"]),
                    )
                )
            pset = PredictionSet(
                image_id=image_id,
                source=str(entry["source"]),
                height=h,
                width=w,
                instances=instances,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(f"malformed prediction entry: {exc}") from exc
        pset.validate()
        sets.append(pset)
    return sets


def serialize_predictions(sets: list[PredictionSet]) -> bytes:
    """Canonical bytes: sorted image ids, stable instance order, sorted keys."""
    doc = sets_to_document(sets)
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()


def write_predictions(sets: list[PredictionSet], path: Path) -> None:
    _atomic_write_bytes(Path(path), serialize_predictions(sets))


def read_predictions(path: Path) -> list[PredictionSet]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"prediction file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: invalid JSON at line {exc.lineno}") from exc
    return document_to_sets(doc)


# --- reports ------------------------------------------------------------------


def format_miou(miou: float) -> str:
    return f"{miou:.4f}"


def report_to_document(report: EvalReport) -> dict:
    return {
        "miou": report.miou,
        "miou_text": format_miou(report.miou),
        "total_gt_count": report.total_gt_count,
        "per_image_sum": {k: report.per_image_sum[k] for k in sorted(report.per_image_sum)},
        "per_gt": [
            {
                "image_id": e.image_id,
                "gt_instance_id": e.gt_instance_id,
                "best_pred_id": e.best_pred_id,
                "best_iou": e.best_iou,
            }
            for e in report.per_gt
        ],
    }


def write_report(report: EvalReport, path: Path, csv_path: Path | None = None) -> None:
    """Structured JSON document plus a flat CSV of per-GT rows."""
    path = Path(path)
    doc = report_to_document(report)
    _atomic_write_bytes(path, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode())
    if csv_path is None:
        csv_path = path.with_suffix(".csv")
    rows = [["image_id", "gt_instance_id", "best_pred_id", "best_iou"]]
    rows += [
        [e.image_id, e.gt_instance_id, e.best_pred_id or "", f"{e.best_iou:.12g}"]
        for e in report.per_gt
    ]
    fd, tmp = tempfile.mkstemp(dir=Path(csv_path).parent, prefix=f".{Path(csv_path).name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            csv.writer(f).writerows(rows)
        os.replace(tmp, csv_path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
