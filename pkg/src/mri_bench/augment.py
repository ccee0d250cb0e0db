"""Image loading, geometric augmentation, and backbone-specific normalization.

Pixel data moves through three value ranges in one direction only:
raw 0..255 -> unit 0..1 -> backbone-normalized. `PixelTensor` carries the
current range alongside the array so mixups fail loudly instead of training
on silently mis-scaled input.

Augmentation is restricted to lossless dihedral moves (multiples of 90
degrees plus axis flips), so augmented tensors stay in the raw domain with
no interpolation artifacts.
"""

import enum
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import cv2
import numpy as np
from PIL import Image

from .backbones import get_backbone

ROTATION_DEGREES = (0, 90, 180, 270)


class ValueRange(enum.Enum):
    RAW_0_255 = "raw_0_255"
    UNIT_0_1 = "unit_0_1"
    BACKBONE_NORMALIZED = "backbone_normalized"


@dataclass(frozen=True)
class PixelTensor:
    """An H x W x 3 image array tagged with its value range."""

    data: np.ndarray
    value_range: ValueRange

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 array, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"empty spatial dims in shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AugmentationSpec:
    """Which dihedral moves the training pipeline may draw.

    `rotation_choices` is the pool for the uniform rotation draw; it must
    include 0 so the identity stays reachable. Flips are applied after the
    rotation, each independently with probability one half when enabled.
    """

    enabled: bool = True
    rotation_choices: Tuple[int, ...] = ROTATION_DEGREES
    h_flip: bool = True
    v_flip: bool = True

    def __post_init__(self):
        choices = tuple(sorted(set(self.rotation_choices)))
        object.__setattr__(self, "rotation_choices", choices)
        if not self.enabled:
            return
        bad = [c for c in choices if c not in ROTATION_DEGREES]
        if bad:
            raise ValueError(f"rotations must be drawn from {ROTATION_DEGREES}, got {bad}")
        if not choices:
            raise ValueError("rotation_choices must not be empty when augmentation is enabled")
        if 0 not in choices:
            raise ValueError("rotation_choices must include 0 (identity)")


def disabled_augmentation() -> AugmentationSpec:
    return AugmentationSpec(enabled=False, rotation_choices=(0,),
                            h_flip=False, v_flip=False)


def load_image(path) -> PixelTensor:
    """Read an image file as raw-range RGB, replicating grayscale to 3 channels."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        data = np.asarray(rgb, dtype=np.uint8)
    return PixelTensor(data=data, value_range=ValueRange.RAW_0_255)


def resize(image: PixelTensor, height: int, width: int) -> PixelTensor:
    """Bilinear resize. A same-size resize returns the pixels unchanged."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    if (image.height, image.width) == (height, width):
        return replace(image, data=image.data.copy())
    out = cv2.resize(image.data, (width, height), interpolation=cv2.INTER_LINEAR)
    return replace(image, data=out)


# Counterclockwise rotations; flips mirror across the named axis.
_TRANSFORMS = {
    "identity": lambda a: a,
    "rot90": lambda a: np.rot90(a, k=1),
    "rot180": lambda a: np.rot90(a, k=2),
    "rot270": lambda a: np.rot90(a, k=3),
    "hflip": np.fliplr,
    "vflip": np.flipud,
}

TRANSFORM_NAMES = tuple(_TRANSFORMS)


def transform_by_name(image: PixelTensor, name: str) -> PixelTensor:
    try:
        fn = _TRANSFORMS[name]
    except KeyError:
        raise ValueError(f"unknown transform {name!r}; known: {', '.join(TRANSFORM_NAMES)}") from None
    return replace(image, data=np.ascontiguousarray(fn(image.data)))


def _rotation_name(degrees: int) -> str:
    return "identity" if degrees == 0 else f"rot{degrees}"


def apply_augmentation(image: PixelTensor, spec: AugmentationSpec,
                       rng: np.random.Generator) -> PixelTensor:
    """Draw one augmentation from `spec` and apply it.

    Draw order is fixed (rotation, then horizontal flip, then vertical
    flip) so a given rng state always yields the same composite move.
    """
    if not spec.enabled:
        return image
    degrees = spec.rotation_choices[rng.integers(len(spec.rotation_choices))]
    out = transform_by_name(image, _rotation_name(degrees))
    if spec.h_flip and rng.random() < 0.5:
        out = transform_by_name(out, "hflip")
    if spec.v_flip and rng.random() < 0.5:
        out = transform_by_name(out, "vflip")
    return out


def enumerate_dihedral(image: PixelTensor, spec: AugmentationSpec) -> Sequence[PixelTensor]:
    """All distinct images reachable from `spec` (used for invariance checks)."""
    seen = {}
    flips = [[]]
    if spec.h_flip:
        flips += [f + ["hflip"] for f in list(flips)]
    if spec.v_flip:
        flips += [f + ["vflip"] for f in list(flips)]
    for degrees in spec.rotation_choices:
        for flip_ops in flips:
            out = transform_by_name(image, _rotation_name(degrees))
            for op in flip_ops:
                out = transform_by_name(out, op)
            seen.setdefault(out.data.tobytes(), out)
    return list(seen.values())


def normalize_for_backbone(image: PixelTensor, backbone_id: str) -> PixelTensor:
    """Map a raw-range RGB tensor to the input domain of `backbone_id`.

    Scales to unit range, reorders channels if the backbone consumes BGR,
    then applies the registry's per-channel shift and scale.
    """
    if image.value_range is not ValueRange.RAW_0_255:
        raise ValueError(
            f"normalize_for_backbone expects raw_0_255 input, got {image.value_range.value}"
        )
    info = get_backbone(backbone_id)
    unit = image.data.astype(np.float32) / np.float32(255.0)
    if info.channel_order == "bgr":
        unit = unit[:, :, ::-1]
    mean = np.asarray(info.norm_mean, dtype=np.float32)
    std = np.asarray(info.norm_std, dtype=np.float32)
    out = (unit - mean) / std
    return PixelTensor(data=np.ascontiguousarray(out),
                       value_range=ValueRange.BACKBONE_NORMALIZED)
