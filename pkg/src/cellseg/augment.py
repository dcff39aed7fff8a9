"""Seeded offline augmentation and flip-based test-time augmentation.

Every augmented output derives its randomness solely from
(plan seed, image index, output index), so rendering is reproducible
regardless of execution order or thread count. Geometric transforms are
applied identically to the image (bilinear) and to every instance mask
(nearest neighbor, so masks stay binary).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateTransform, DimensionMismatch
from .instances import PredictionSet
from .masks import FLIP_DIAGONAL, FLIP_HORIZONTAL, FLIP_VERTICAL, as_mask, flip

TTA_NONE = "none"
TTA_VARIANTS = (TTA_NONE, FLIP_HORIZONTAL, FLIP_VERTICAL, FLIP_DIAGONAL)

# Sampling ranges; the single place magnitudes are configured.
DEFAULT_RANGES = {
    "scale": (0.8, 1.2),
    "rotation_deg": (-45.0, 45.0),
    "perspective_frac": 0.1,  # corner jitter as a fraction of each side
    "elastic_alpha": (10.0, 40.0),
    "elastic_sigma": (5.0, 8.0),
    "brightness_delta": (-0.25, 0.25),  # fraction of 255
    "grayscale_blend": (0.0, 1.0),
    "hue_shift": (-18.0, 18.0),  # degrees
    "sat_scale": (0.7, 1.3),
    "clahe_clip": (1.0, 4.0),
    "gamma": (0.7, 1.5),
    "contrast_slope": (0.75, 1.25),
    "gaussian_blur_sigma": (0.5, 2.0),
    "median_kernel": (3, 7),  # odd values
    "motion_length": (3, 7),
    "sharpen_strength": (0.5, 1.5),
    "emboss_strength": (0.5, 1.5),
    "noise_sigma": (2.0, 10.0),  # 8-bit units, <= 10/255 in [0,1] scale
}
GROUP_PROBABILITY = 0.5


@dataclass(frozen=True)
class GeometricParams:
    scale: float = 1.0
    rotation_deg: float = 0.0
    flip_horizontal: bool = False
    flip_vertical: bool = False
    # per-corner (dx, dy) offsets in pixels: tl, tr, br, bl
    perspective: tuple[float, ...] | None = None
    elastic_alpha: float = 0.0
    elastic_sigma: float = 6.0
    elastic_seed: int = 0

    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and self.rotation_deg == 0.0
            and not self.flip_horizontal
            and not self.flip_vertical
            and self.perspective is None
            and self.elastic_alpha == 0.0
        )


@dataclass(frozen=True)
class PhotometricParams:
    brightness_delta: float = 0.0  # fraction of 255
    grayscale_blend: float = 0.0
    hue_shift: float = 0.0
    sat_scale: float = 1.0
    clahe_clip: float | None = None
    gamma: float = 1.0
    contrast_slope: float = 1.0

    def is_identity(self) -> bool:
        return (
            self.brightness_delta == 0.0
            and self.grayscale_blend == 0.0
            and self.hue_shift == 0.0
            and self.sat_scale == 1.0
            and self.clahe_clip is None
            and self.gamma == 1.0
            and self.contrast_slope == 1.0
        )


@dataclass(frozen=True)
class FilterParams:
    blur_kind: str | None = None  # gaussian | median | motion
    blur_value: float = 0.0
    motion_angle: float = 0.0
    conv_kind: str | None = None  # sharpen | emboss
    conv_strength: float = 0.0
    noise_sigma: float = 0.0  # 8-bit units
    noise_seed: int = 0

    def is_identity(self) -> bool:
        return self.blur_kind is None and self.conv_kind is None and self.noise_sigma == 0.0


@dataclass(frozen=True)
class TransformParams:
    image_index: int
    output_index: int
    geometric: GeometricParams = GeometricParams()
    photometric: PhotometricParams = PhotometricParams()
    filtering: FilterParams = FilterParams()


@dataclass
class AugmentationPlan:
    seed: int
    n_images: int
    per_image: int
    outputs: list[TransformParams] = field(default_factory=list)

    @property
    def total_outputs(self) -> int:
        """Augmented outputs plus the untouched originals."""
        return self.n_images * (self.per_image + 1)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPlan":
        raw = json.loads(text)
        outputs = []
        for o in raw["outputs"]:
            geo = dict(o["geometric"])
            if geo["perspective"] is not None:
                geo["perspective"] = tuple(geo["perspective"])
            outputs.append(
                TransformParams(
                    image_index=o["image_index"],
                    output_index=o["output_index"],
                    geometric=GeometricParams(**geo),
                    photometric=PhotometricParams(**o["photometric"]),
                    filtering=FilterParams(**o["filtering"]),
                )
            )
        return cls(
            seed=raw["seed"],
            n_images=raw["n_images"],
            per_image=raw["per_image"],
            outputs=outputs,
        )


def _rng_for(seed: int, image_index: int, output_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, image_index, output_index]))


def _sample_params(seed: int, i: int, j: int, ranges: dict) -> TransformParams:
    rng = _rng_for(seed, i, j)

    def u(key):
        lo, hi = ranges[key]
        return float(rng.uniform(lo, hi))

    geometric = GeometricParams()
    if rng.random() < GROUP_PROBABILITY:
        perspective = None
        if rng.random() < 0.5:
            frac = ranges["perspective_frac"]
            perspective = tuple(float(v) for v in rng.uniform(-frac, frac, size=8))
        elastic = rng.random() < 0.5
        geometric = GeometricParams(
            scale=u("scale"),
            rotation_deg=u("rotation_deg"),
            flip_horizontal=bool(rng.random() < 0.5),
            flip_vertical=bool(rng.random() < 0.5),
            perspective=perspective,
            elastic_alpha=u("elastic_alpha") if elastic else 0.0,
            elastic_sigma=u("elastic_sigma"),
            elastic_seed=int(rng.integers(0, 2**31 - 1)),
        )

    photometric = PhotometricParams()
    if rng.random() < GROUP_PROBABILITY:
        photometric = PhotometricParams(
            brightness_delta=u("brightness_delta"),
            grayscale_blend=u("grayscale_blend") if rng.random() < 0.3 else 0.0,
            hue_shift=u("hue_shift"),
            sat_scale=u("sat_scale"),
            clahe_clip=u("clahe_clip") if rng.random() < 0.3 else None,
            gamma=u("gamma"),
            contrast_slope=u("contrast_slope"),
        )

    filtering = FilterParams()
    if rng.random() < GROUP_PROBABILITY:
        blur_kind = None
        blur_value = 0.0
        motion_angle = 0.0
        if rng.random() < 0.5:
            blur_kind = str(rng.choice(["gaussian", "median", "motion"]))
            if blur_kind == "gaussian":
                blur_value = u("gaussian_blur_sigma")
            elif blur_kind == "median":
                lo, hi = ranges["median_kernel"]
                blur_value = float(rng.choice(np.arange(lo, hi + 1, 2)))
            else:
                lo, hi = ranges["motion_length"]
                blur_value = float(rng.integers(lo, hi + 1))
                motion_angle = float(rng.uniform(0.0, 180.0))
        conv_kind = None
        conv_strength = 0.0
        if rng.random() < 0.5:
            conv_kind = str(rng.choice(["sharpen", "emboss"]))
            conv_strength = u(f"{conv_kind}_strength")
        filtering = FilterParams(
            blur_kind=blur_kind,
            blur_value=blur_value,
            motion_angle=motion_angle,
            conv_kind=conv_kind,
            conv_strength=conv_strength,
            noise_sigma=u("noise_sigma") if rng.random() < 0.5 else 0.0,
            noise_seed=int(rng.integers(0, 2**31 - 1)),
        )

    return TransformParams(
        image_index=i, output_index=j, geometric=geometric,
        photometric=photometric, filtering=filtering,
    )


def build_plan(
    seed: int, n_images: int, per_image: int, ranges: dict | None = None
) -> AugmentationPlan:
    """Sample every output's transform parameters up front, deterministically."""
    if per_image < 1:
        raise ValueError("per_image must be >= 1")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    outputs = [
        _sample_params(seed, i, j, ranges)
        for i in range(n_images)
        for j in range(per_image)
    ]
    return AugmentationPlan(seed=seed, n_images=n_images, per_image=per_image, outputs=outputs)


def _as_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DimensionMismatch("image must be HxWx3 uint8")
    return img


def apply_geometric(
    img, masks: list, params: GeometricParams
) -> tuple[np.ndarray, list[np.ndarray], list[int]]:
    """Warp image and masks together.

    Returns (image, surviving masks, indices of masks dropped because the
    transform moved them fully outside the frame).
    """
    img = _as_image(img)
    masks = [as_mask(m) for m in masks]
    for m in masks:
        if m.shape != img.shape[:2]:
            raise DimensionMismatch(f"mask shape {m.shape} vs image {img.shape[:2]}")
    if params.scale <= 0.0:
        raise DegenerateTransform(f"scale must be positive, got {params.scale}")
    if params.is_identity():
        return img.copy(), [m.copy() for m in masks], []

    h, w = img.shape[:2]
    matrix = _projective_matrix(h, w, params)
    if matrix is not None:
        img = cv2.warpPerspective(img, matrix, (w, h), flags=cv2.INTER_LINEAR)
        masks = [
            cv2.warpPerspective(
                m.astype(np.uint8), matrix, (w, h), flags=cv2.INTER_NEAREST
            ).astype(bool)
            for m in masks
        ]
    if params.flip_horizontal:
        img = img[:, ::-1].copy()
        masks = [flip(m, FLIP_HORIZONTAL) for m in masks]
    if params.flip_vertical:
        img = img[::-1, :].copy()
        masks = [flip(m, FLIP_VERTICAL) for m in masks]
    if params.elastic_alpha > 0.0:
        img, masks = elastic_transform(
            img, masks, params.elastic_alpha, params.elastic_sigma, params.elastic_seed
        )

    kept, dropped = [], []
    for idx, m in enumerate(masks):
        if m.any():
            kept.append(m)
        else:
            dropped.append(idx)
    return img, kept, dropped


def _projective_matrix(h: int, w: int, params: GeometricParams) -> np.ndarray | None:
    """3x3 matrix for the scale + rotation + perspective part, or None if identity.

    Positive rotation is counter-clockwise in the displayed image; the
    pivot is the pixel-center of the frame.
    """
    if params.scale == 1.0 and params.rotation_deg == 0.0 and params.perspective is None:
        return None
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    affine = cv2.getRotationMatrix2D((cx, cy), -params.rotation_deg, params.scale)
    matrix = np.vstack([affine, [0.0, 0.0, 1.0]])
    if params.perspective is not None:
        src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float32)
        offs = np.asarray(params.perspective, dtype=np.float32).reshape(4, 2)
        dst = src + offs * np.array([w, h], dtype=np.float32)
        persp = cv2.getPerspectiveTransform(src, dst).astype(np.float64)
        matrix = persp @ matrix
    return matrix


def elastic_transform(
    img, masks: list, alpha: float, sigma: float, seed: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gaussian-smoothed random displacement field, shared by image and masks."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    img = _as_image(img)
    masks = [as_mask(m) for m in masks]
    if alpha == 0.0:
        return img.copy(), [m.copy() for m in masks]
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    dx = gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    dy = gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    xx, yy = np.meshgrid(np.arange(w), np.arange(h))
    map_x = (xx + dx).astype(np.float32)
    map_y = (yy + dy).astype(np.float32)
    out_img = cv2.remap(img, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    out_masks = [
        cv2.remap(
            m.astype(np.uint8), map_x, map_y, cv2.INTER_NEAREST,
            borderMode=cv2.BORDER_CONSTANT, borderValue=0,
        ).astype(bool)
        for m in masks
    ]
    return out_img, out_masks


def apply_photometric(img, params: PhotometricParams) -> np.ndarray:
    """Color / contrast adjustments; masks are never touched."""
    img = _as_image(img)
    if params.is_identity():
        return img.copy()
    out = img.astype(np.float64)
    if params.brightness_delta != 0.0:
        out = out + params.brightness_delta * 255.0
    if params.grayscale_blend > 0.0:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = (1.0 - params.grayscale_blend) * out + params.grayscale_blend * gray[..., None]
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if params.hue_shift != 0.0 or params.sat_scale != 1.0:
        hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV).astype(np.float64)
        hsv[..., 0] = (hsv[..., 0] + params.hue_shift / 2.0) % 180.0  # cv2 hue is deg/2
        hsv[..., 1] = np.clip(hsv[..., 1] * params.sat_scale, 0, 255)
        out = cv2.cvtColor(np.rint(hsv).astype(np.uint8), cv2.COLOR_HSV2RGB)
    if params.clahe_clip is not None:
        clahe = cv2.createCLAHE(clipLimit=params.clahe_clip, tileGridSize=(8, 8))
        lab = cv2.cvtColor(out, cv2.COLOR_RGB2LAB)
        lab[..., 0] = clahe.apply(lab[..., 0])
        out = cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)
    if params.gamma != 1.0:
        scaled = out.astype(np.float64) / 255.0
        out = np.clip(np.rint(255.0 * np.power(scaled, params.gamma)), 0, 255).astype(np.uint8)
    if params.contrast_slope != 1.0:
        shifted = params.contrast_slope * (out.astype(np.float64) - 128.0) + 128.0
        out = np.clip(np.rint(shifted), 0, 255).astype(np.uint8)
    return out


def _motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    k = np.zeros((length, length), dtype=np.float64)
    k[length // 2, :] = 1.0
    rot = cv2.getRotationMatrix2D(((length - 1) / 2.0, (length - 1) / 2.0), angle_deg, 1.0)
    k = cv2.warpAffine(k, rot, (length, length))
    s = k.sum()
    return k / s if s > 0 else k


def apply_filtering(img, params: FilterParams) -> np.ndarray:
    """Blur, sharpen/emboss and gaussian noise corruption."""
    img = _as_image(img)
    if params.is_identity():
        return img.copy()
    out = img
    if params.blur_kind == "gaussian":
        out = cv2.GaussianBlur(out, (0, 0), params.blur_value)
    elif params.blur_kind == "median":
        out = cv2.medianBlur(out, int(params.blur_value))
    elif params.blur_kind == "motion":
        out = cv2.filter2D(out, -1, _motion_kernel(int(params.blur_value), params.motion_angle))
    elif params.blur_kind is not None:
        raise ValueError(f"unknown blur kind: {params.blur_kind!r}")
    if params.conv_kind == "sharpen":
        s = params.conv_strength
        kernel = np.array([[0, -s, 0], [-s, 1 + 4 * s, -s], [0, -s, 0]])
        out = cv2.filter2D(out, -1, kernel)
    elif params.conv_kind == "emboss":
        s = params.conv_strength
        kernel = np.array([[-s, -s, 0], [-s, 1, s], [0, s, s]])
        out = cv2.filter2D(out, -1, kernel)
    elif params.conv_kind is not None:
        raise ValueError(f"unknown conv kind: {params.conv_kind!r}")
    if params.noise_sigma > 0.0:
        rng = np.random.default_rng(params.noise_seed)
        noise = rng.normal(0.0, params.noise_sigma, out.shape)
        out = np.clip(np.rint(out.astype(np.float64) + noise), 0, 255).astype(np.uint8)
    return out.copy() if out is img else out


def render_output(
    img, masks: list, params: TransformParams
) -> tuple[np.ndarray, list[np.ndarray], list[int]]:
    """Apply one plan entry: geometric, then photometric, then filtering."""
    out, out_masks, dropped = apply_geometric(img, masks, params.geometric)
    out = apply_photometric(out, params.photometric)
    out = apply_filtering(out, params.filtering)
    return out, out_masks, dropped


def tta_expand(img) -> list[tuple[str, np.ndarray]]:
    """The four flip variants in fixed order: none, horizontal, vertical, diagonal."""
    img = _as_image(img)
    variants = [(TTA_NONE, img.copy())]
    for axis in (FLIP_HORIZONTAL, FLIP_VERTICAL, FLIP_DIAGONAL):
        variants.append((axis, _flip_image(img, axis)))
    return variants


def _flip_image(img: np.ndarray, axis: str) -> np.ndarray:
    if axis == FLIP_HORIZONTAL:
        return img[:, ::-1].copy()
    if axis == FLIP_VERTICAL:
        return img[::-1, :].copy()
    if axis == FLIP_DIAGONAL:
        return img[::-1, ::-1].copy()
    raise ValueError(f"unknown flip axis: {axis!r}")


def tta_invert(preds: PredictionSet, variant: str) -> PredictionSet:
    """Map predictions made on a flipped image back to the original frame.

    Each flip is self-inverse, so inverting twice restores the input.
    """
    if variant == TTA_NONE:
        return replace(preds, instances=list(preds.instances))
    if variant not in TTA_VARIANTS:
        raise ValueError(f"unknown TTA variant: {variant!r}")
    inverted = [inst.with_mask(flip(inst.mask, variant)) for inst in preds.instances]
    return replace(preds, instances=inverted)
