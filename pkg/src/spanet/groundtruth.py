"""Training targets and auxiliary input channels derived from instance
label maps: centroid detection maps, per-pixel bounding-box embeddings,
binary masks, coordinate planes, and color-space channels.

Conventions: label maps are H x W integer arrays with 0 = background;
x indexes columns (width W), y indexes rows (height H).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import rgb_to_hsv as _mpl_rgb_to_hsv


@dataclass
class PositionalTensor:
    """Per-pixel 6-vector of normalized bounding-box coordinates plus the
    foreground mask marking which pixels carry a value."""

    grid: np.ndarray    # H x W x 6, float32, zeros on background
    mask: np.ndarray    # H x W, bool


def instance_ids(instances: np.ndarray) -> np.ndarray:
    """Sorted positive ids present in a label map."""
    ids = np.unique(instances)
    return ids[ids > 0]


def instance_centroid(instances: np.ndarray, instance_id: int) -> tuple[float, float]:
    """Arithmetic mean (x, y) of an instance's pixel coordinates."""
    ys, xs = np.nonzero(instances == instance_id)
    if xs.size == 0:
        raise ValueError(f"instance {instance_id} has no pixels")
    return float(xs.mean()), float(ys.mean())


def detection_gt(instances: np.ndarray, beta: float = 0.01, radius: float = 8.0) -> np.ndarray:
    """Centroid detection target: an inverse-distance peak per nucleus.

    Each nucleus contributes 1 / (1 + beta * d) inside the disk of the
    given radius around its mass centroid (rounded to the nearest pixel so
    the peak value is exactly 1) and 0 outside; overlapping disks resolve
    by per-pixel maximum. Returned as float64, the precision the values
    are defined in; cast down at the consumer if needed.
    """
    if beta <= 0 or radius <= 0:
        raise ValueError("beta and radius must be positive")
    h, w = instances.shape
    out = np.zeros((h, w), dtype=np.float64)
    rr = int(np.ceil(radius))
    for n in instance_ids(instances):
        cx, cy = instance_centroid(instances, n)
        cx, cy = float(np.rint(cx)), float(np.rint(cy))
        x0, x1 = max(0, int(cx) - rr), min(w, int(cx) + rr + 1)
        y0, y1 = max(0, int(cy) - rr), min(h, int(cy) + rr + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        peak = np.where(d <= radius, 1.0 / (1.0 + beta * d), 0.0)
        np.maximum(out[y0:y1, x0:x1], peak, out=out[y0:y1, x0:x1])
    return out


def positional_gt(instances: np.ndarray) -> PositionalTensor:
    """Bounding-box embedding target.

    Every pixel of a nucleus receives the same 6-vector
    (cx/W, cy/H, lx/W, ly/H, rx/W, ry/H) built from the nucleus bounding
    box: (lx, ly) top-left, (rx, ry) bottom-right, (cx, cy) the box
    center. Coordinates are normalized by the image width/height;
    background pixels are zero.
    """
    h, w = instances.shape
    grid = np.zeros((h, w, 6), dtype=np.float32)
    mask = instances > 0
    for n in instance_ids(instances):
        sel = instances == n
        ys, xs = np.nonzero(sel)
        lx, rx = xs.min(), xs.max()
        ly, ry = ys.min(), ys.max()
        cx, cy = (lx + rx) / 2.0, (ly + ry) / 2.0
        vec = np.array(
            [cx / w, cy / h, lx / w, ly / h, rx / w, ry / h], dtype=np.float32
        )
        grid[sel] = vec
    return PositionalTensor(grid=grid, mask=mask)


def binary_mask(instances: np.ndarray) -> np.ndarray:
    """Foreground mask: 1 where any instance, else 0."""
    return (instances > 0).astype(np.float32)


def coordinate_maps(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pixel coordinate planes M_x, M_y in [0, 1].

    M_x varies along columns (x / (W-1)), M_y along rows (y / (H-1));
    degenerate single-row/column maps are constant 0.
    """
    if h < 1 or w < 1:
        raise ValueError(f"invalid grid {h}x{w}")
    mx = np.zeros((h, w), dtype=np.float32)
    my = np.zeros((h, w), dtype=np.float32)
    if w > 1:
        mx[:] = (np.arange(w, dtype=np.float32) / (w - 1))[None, :]
    if h > 1:
        my[:] = (np.arange(h, dtype=np.float32) / (h - 1))[:, None]
    return mx, my


def rgb_to_hsv(patch: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV on an H x W x 3 array in [0, 1], hue scaled to [0, 1]."""
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected HxWx3 input, got {patch.shape}")
    return _mpl_rgb_to_hsv(patch.astype(np.float64)).astype(np.float32)


def build_instance_input(rgb: np.ndarray, seg_pred: np.ndarray) -> np.ndarray:
    """Assemble the 9-channel input of the embedding network.

    Channel order: R, G, B, H, S, V, predicted segmentation, M_x, M_y.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 rgb, got {rgb.shape}")
    seg = np.asarray(seg_pred)
    if seg.ndim == 3 and seg.shape[2] == 1:
        seg = seg[:, :, 0]
    if seg.shape != rgb.shape[:2]:
        raise ValueError(
            f"segmentation shape {seg.shape} does not match image {rgb.shape[:2]}"
        )
    h, w = seg.shape
    mx, my = coordinate_maps(h, w)
    hsv = rgb_to_hsv(rgb)
    return np.dstack([rgb.astype(np.float32), hsv, seg.astype(np.float32), mx, my])
