"""Boxes, IoU, and the coordinate transforms between frame, crop, and output grid.

Conventions used throughout the package:
  - Frame coordinates are continuous pixels; pixel (r, c) of an image array
    occupies the unit square [c, c+1] x [r, r+1], so its center is (c+0.5, r+0.5).
  - A crop is always square in frame space and resampled to out_size x out_size.
  - The output grid divides the crop into cells of `stride` crop pixels; the
    center of cell (i, j) sits at crop pixel ((j+0.5)*stride, (i+0.5)*stride).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when an operation needs a positive-area box and got none."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned bounding box in frame pixels, corners inclusive of area."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box: {self}")

    def width(self) -> float:
        return self.x_max - self.x_min

    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width() * self.height()

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def size_factor(self) -> float:
        """(width + height) / 2; the displacement normalizer used by the sweeps."""
        return 0.5 * (self.width() + self.height())

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float) -> "Box":
        return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes and for two zero-area boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return inter / union


def intersects(a: Box, b: Box) -> bool:
    """Positive-area overlap test (shares iou's boundary convention)."""
    return (min(a.x_max, b.x_max) - max(a.x_min, b.x_min) > 0
            and min(a.y_max, b.y_max) - max(a.y_min, b.y_min) > 0)


@dataclass(frozen=True)
class CropSpec:
    """A square crop of a frame: where it is, and how it is resampled.

    center, side are frame pixels; out_size is the resampled edge in pixels.
    """

    center: tuple[float, float]
    side: float
    out_size: int

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"crop side must be positive, got {self.side}")
        if self.out_size <= 0:
            raise ValueError(f"crop out_size must be positive, got {self.out_size}")

    def scale(self) -> float:
        """Frame pixels -> crop pixels multiplier."""
        return self.out_size / self.side

    def origin(self) -> tuple[float, float]:
        """Frame coordinates of the crop's top-left corner."""
        return (self.center[0] - 0.5 * self.side, self.center[1] - 0.5 * self.side)

    def footprint(self) -> Box:
        """The square frame region this crop covers."""
        ox, oy = self.origin()
        return Box(ox, oy, ox + self.side, oy + self.side)

    def with_center(self, cx: float, cy: float) -> "CropSpec":
        return CropSpec((cx, cy), self.side, self.out_size)

    def with_side(self, side: float) -> "CropSpec":
        return CropSpec(self.center, side, self.out_size)


def context_side(box: Box) -> float:
    """Side of the aspect-preserving context crop: sqrt((w+p)(h+p)), p=(w+h)/2."""
    w, h = box.width(), box.height()
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"degenerate annotation: {box}")
    p = 0.5 * (w + h)
    return math.sqrt((w + p) * (h + p))


def make_target_crop_spec(box: Box, out_size: int) -> CropSpec:
    """Square context crop around the target box (template geometry)."""
    return CropSpec(box.center(), context_side(box), out_size)


def make_search_crop_spec(box: Box, out_size: int, search_to_target_ratio: float) -> CropSpec:
    """Search crop: same center as the target crop, side scaled by the ratio."""
    if search_to_target_ratio < 1:
        raise ValueError(f"search/target ratio must be >= 1, got {search_to_target_ratio}")
    return CropSpec(box.center(), context_side(box) * search_to_target_ratio, out_size)


def frame_to_crop(xy, spec: CropSpec):
    """Map frame coordinates to continuous crop-pixel coordinates."""
    ox, oy = spec.origin()
    s = spec.scale()
    x, y = xy
    return ((x - ox) * s, (y - oy) * s)


def crop_to_frame(xy, spec: CropSpec):
    """Inverse of frame_to_crop."""
    ox, oy = spec.origin()
    s = spec.scale()
    x, y = xy
    return (x / s + ox, y / s + oy)


def box_to_crop(box: Box, spec: CropSpec) -> Box:
    x0, y0 = frame_to_crop((box.x_min, box.y_min), spec)
    x1, y1 = frame_to_crop((box.x_max, box.y_max), spec)
    return Box(x0, y0, x1, y1)


def box_from_crop(box: Box, spec: CropSpec) -> Box:
    x0, y0 = crop_to_frame((box.x_min, box.y_min), spec)
    x1, y1 = crop_to_frame((box.x_max, box.y_max), spec)
    return Box(x0, y0, x1, y1)


def grid_to_frame(cell: tuple[float, float], spec: CropSpec, stride: int) -> tuple[float, float]:
    """Frame coordinates of a grid cell center.

    `cell` is (col, row) and may be fractional; cell (0, 0) covers crop pixels
    [0, stride)^2 so its center is at crop pixel (stride/2, stride/2).
    """
    cx, cy = cell
    return crop_to_frame(((cx + 0.5) * stride, (cy + 0.5) * stride), spec)


def frame_to_grid(xy, spec: CropSpec, stride: int) -> tuple[float, float]:
    """Continuous grid coordinates (col, row) of a frame point; inverse of grid_to_frame."""
    x, y = frame_to_crop(xy, spec)
    return (x / stride - 0.5, y / stride - 0.5)


def clip_box(box: Box, bounds: Box) -> Box:
    """Clip to bounds; collapses to a zero-extent edge box when fully outside."""
    x0 = min(max(box.x_min, bounds.x_min), bounds.x_max)
    y0 = min(max(box.y_min, bounds.y_min), bounds.y_max)
    x1 = min(max(box.x_max, bounds.x_min), bounds.x_max)
    y1 = min(max(box.y_max, bounds.y_min), bounds.y_max)
    return Box(x0, y0, x1, y1)


def crop_and_resize(image: np.ndarray, spec: CropSpec, pad_value) -> np.ndarray:
    """Bilinearly resample the crop region of an (H, W, C) image.

    Out-of-frame samples read `pad_value` (per-channel sequence or scalar).
    Returns float32 (out_size, out_size, C).
    """
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h == 0 or w == 0:
        raise ValueError("empty image")
    pad = np.broadcast_to(np.asarray(pad_value, dtype=np.float32), (c,))

    n = spec.out_size
    ox, oy = spec.origin()
    step = spec.side / n
    # centers of output pixels in frame coordinates
    xs = ox + (np.arange(n, dtype=np.float64) + 0.5) * step
    ys = oy + (np.arange(n, dtype=np.float64) + 0.5) * step

    # sample positions relative to source pixel centers
    u = xs - 0.5
    v = ys - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = (u - x0).astype(np.float32)
    fy = (v - y0).astype(np.float32)

    # pad the source by one pixel of pad_value; clipping then lands any
    # out-of-frame tap on a padding row/column
    src = np.empty((h + 2, w + 2, c), dtype=np.float32)
    src[:] = pad
    src[1:-1, 1:-1] = image.astype(np.float32)
    x0c = np.clip(x0 + 1, 0, w + 1)
    x1c = np.clip(x0 + 2, 0, w + 1)
    y0c = np.clip(y0 + 1, 0, h + 1)
    y1c = np.clip(y0 + 2, 0, h + 1)

    g00 = src[y0c[:, None], x0c[None, :]]
    g01 = src[y0c[:, None], x1c[None, :]]
    g10 = src[y1c[:, None], x0c[None, :]]
    g11 = src[y1c[:, None], x1c[None, :]]
    wx = fx[None, :, None]
    wy = fy[:, None, None]
    out = (g00 * (1 - wx) + g01 * wx) * (1 - wy) + (g10 * (1 - wx) + g11 * wx) * wy
    return out.astype(np.float32)


def channel_means(image: np.ndarray) -> np.ndarray:
    """Per-channel mean of a frame, the standard crop padding value."""
    if image.ndim == 2:
        return np.asarray([float(image.mean())], dtype=np.float32)
    return image.reshape(-1, image.shape[-1]).mean(axis=0).astype(np.float32)


@dataclass(frozen=True)
class CropSizes:
    """Resampled crop sizes shared by the whole pipeline.

    Desk profile is 64/128; the sizes used in the source experiments are
    127/255. The search field of view is target_size scaled by ratio().
    """

    target_size: int = 64
    search_size: int = 128
    stride: int = 4

    def ratio(self) -> float:
        return self.search_size / self.target_size

    def target_grid(self) -> int:
        return ceil_div(self.target_size, self.stride)

    def search_grid(self) -> int:
        return ceil_div(self.search_size, self.stride)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
