"""Intensity-grid image type and basic spatial operations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Left-right axis: horizontal flips in 2-D and sagittal flips in 3-D both
# mirror axis 1 (phantoms lay the ventricle pair across it in either case).
FLIP_AXIS = 1


@dataclass(frozen=True)
class Image:
    """A 2-D or 3-D intensity grid with values in [0, 1].

    Data is stored as float32. ``spacing`` is the physical voxel size along
    each axis and defaults to isotropic 1.0.
    """

    data: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim not in (2, 3):
            raise ValueError(f"expected a 2-D or 3-D grid, got ndim={data.ndim}")
        if data.size == 0:
            raise ValueError("image must not be empty")
        if not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        lo, hi = float(data.min()), float(data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image intensities must lie in [0, 1], got [{lo}, {hi}]")
        object.__setattr__(self, "data", data)
        spacing = self.spacing if self.spacing is not None else (1.0,) * data.ndim
        if len(spacing) != data.ndim:
            raise ValueError("spacing length must match dimensionality")
        if any((not np.isfinite(s)) or s <= 0 for s in spacing):
            raise ValueError("spacing entries must be positive and finite")
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim


def center_crop(image: Image, target_shape: tuple[int, ...]) -> Image:
    """Crop symmetrically to ``target_shape``.

    Odd margins remove the extra voxel from the high-index side of the axis.
    """
    if len(target_shape) != image.ndim:
        raise ValueError(
            f"target shape has {len(target_shape)} axes, image has {image.ndim}"
        )
    slices = []
    for axis, (size, want) in enumerate(zip(image.shape, target_shape)):
        if want <= 0 or want > size:
            raise ValueError(
                f"crop target {want} invalid for axis {axis} of extent {size}"
            )
        margin = size - want
        low = margin // 2
        slices.append(slice(low, low + want))
    return Image(image.data[tuple(slices)], spacing=image.spacing)


def augment(image: Image, flip: bool = False, blur_sigma: float = 0.0, rng=None) -> Image:
    """Left-right flip and/or Gaussian blur.

    Deterministic given its arguments; ``rng`` is accepted so augmentation
    pipelines can pass their generator through uniformly, but the random
    policy (whether to flip, which sigma) is the caller's decision.
    """
    if blur_sigma < 0:
        raise ValueError("blur_sigma must be non-negative")
    data = image.data
    if flip:
        data = np.flip(data, axis=FLIP_AXIS)
    if blur_sigma > 0:
        data = ndimage.gaussian_filter(data.astype(np.float64), sigma=blur_sigma)
        data = np.clip(data, 0.0, 1.0)
    return Image(np.ascontiguousarray(data, dtype=np.float32), spacing=image.spacing)
