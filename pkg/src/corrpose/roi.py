"""Square regions of interest and the crop <-> image pixel mapping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .geometry import CameraIntrinsics


@dataclass(frozen=True)
class RoI:
    """Square crop with continuous center (pixels) and side length (pixels).

    A crop resampled to ``S x S`` maps crop pixel ``(col, row)`` to the image
    point ``left + (col + 0.5) * side / S`` (and likewise for rows).
    """

    center: tuple[float, float]
    side: float
    source: Literal["detector", "ground-truth-mask", "refined", "manifest"] = "manifest"

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("RoI side must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "side", float(self.side))

    @property
    def left(self) -> float:
        return self.center[0] - 0.5 * self.side

    @property
    def top(self) -> float:
        return self.center[1] - 0.5 * self.side

    def intersects(self, width: int, height: int) -> bool:
        return (
            self.left < width - 0.5
            and self.left + self.side > -0.5
            and self.top < height - 0.5
            and self.top + self.side > -0.5
        )

    def crop_intrinsics(self, K: CameraIntrinsics, size: int) -> CameraIntrinsics:
        return K.crop(self.left, self.top, self.side, size)

    def to_image(self, crop_px: np.ndarray, size: int) -> np.ndarray:
        """Crop pixel coordinates (x, y) to full-image pixel coordinates."""
        scale = self.side / size
        crop_px = np.asarray(crop_px, dtype=float)
        return np.stack(
            [self.left + (crop_px[..., 0] + 0.5) * scale, self.top + (crop_px[..., 1] + 0.5) * scale],
            axis=-1,
        )

    def to_crop(self, image_px: np.ndarray, size: int) -> np.ndarray:
        scale = size / self.side
        image_px = np.asarray(image_px, dtype=float)
        return np.stack(
            [(image_px[..., 0] - self.left) * scale - 0.5, (image_px[..., 1] - self.top) * scale - 0.5],
            axis=-1,
        )

    @classmethod
    def from_mask(cls, mask: np.ndarray, pad: float = 0.1, source="ground-truth-mask") -> "RoI":
        """Square box around a mask's pixel bounds, padded by ``pad`` of the longer side."""
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            raise ValueError("empty mask")
        x0, x1 = cols.min() - 0.5, cols.max() + 0.5
        y0, y1 = rows.min() - 0.5, rows.max() + 0.5
        side = max(x1 - x0, y1 - y0) * (1.0 + 2.0 * pad)
        return cls(center=(0.5 * (x0 + x1), 0.5 * (y0 + y1)), side=side, source=source)


def crop_image(image: np.ndarray, roi: RoI, size: int) -> np.ndarray:
    """Resample the RoI to ``size x size`` with bilinear interpolation (zeros outside)."""
    import cv2

    scale = roi.side / size
    # crop pixel -> image pixel: x = left + (c + 0.5) * scale
    M = np.array(
        [[scale, 0.0, roi.left + 0.5 * scale], [0.0, scale, roi.top + 0.5 * scale]], dtype=np.float64
    )
    return cv2.warpAffine(
        image,
        M,
        (size, size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
