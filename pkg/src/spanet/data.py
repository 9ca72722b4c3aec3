"""Dataset plumbing: image/instance-map I/O, patch extraction, and a
seeded synthetic nuclei generator used for desk-scale verification.

On-disk layout for a dataset root:

    images/<id>.png   8-bit RGB
    masks/<id>.png    16-bit single-channel instance labels, 0 = background
    meta.csv          optional; columns id, organ, split
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MAX_INSTANCE_ID = 65535


class DataError(Exception):
    """Raised for malformed datasets, files, or infeasible requests."""


@dataclass
class Sample:
    """One image with its instance label map."""

    image: np.ndarray        # H x W x 3 float32 in [0, 1]
    instances: np.ndarray    # H x W integer labels, 0 = background
    id: str
    organ_tag: str | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"sample {self.id!r}: image must be HxWx3, got {self.image.shape}")
        if self.instances.shape != self.image.shape[:2]:
            raise DataError(
                f"sample {self.id!r}: image {self.image.shape[:2]} and mask "
                f"{self.instances.shape} shapes differ"
            )


@dataclass
class SynthConfig:
    """Knobs for the synthetic nuclei generator."""

    canvas: tuple[int, int] = (128, 128)
    n_nuclei: tuple[int, int] = (8, 14)       # inclusive range
    radius: tuple[float, float] = (4.0, 9.0)  # semi-axis range, pixels
    clump_fraction: float = 0.3               # fraction placed in overlapping pairs/triples
    clump_min_sep: float = 6.0                # centroid separation floor within a clump
    texture_noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        h, w = self.canvas
        if h % 8 or w % 8:
            raise DataError(f"canvas must be divisible by 8, got {self.canvas}")
        if self.radius[0] < 2.0 or self.radius[1] < self.radius[0]:
            raise DataError(f"radii must satisfy 2 <= lo <= hi, got {self.radius}")
        if not 0 <= self.n_nuclei[0] <= self.n_nuclei[1]:
            raise DataError(f"bad nucleus count range {self.n_nuclei}")
        if not 0.0 <= self.clump_fraction <= 1.0:
            raise DataError(f"clump_fraction must lie in [0, 1], got {self.clump_fraction}")
        if self.clump_min_sep <= 0:
            raise DataError(f"clump_min_sep must be positive, got {self.clump_min_sep}")


# ---------------------------------------------------------------------------
# image / mask files


def write_image(image: np.ndarray, path) -> None:
    """8-bit RGB PNG from floats in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_instance_map(instances: np.ndarray, path) -> None:
    """16-bit single-channel PNG; ids above 65535 do not fit."""
    arr = np.asarray(instances)
    if arr.ndim != 2:
        raise DataError(f"instance map must be 2-D, got shape {arr.shape}")
    if arr.min() < 0:
        raise DataError("instance ids must be non-negative")
    if arr.max() > MAX_INSTANCE_ID:
        raise DataError(
            f"instance id {int(arr.max())} exceeds the 16-bit limit of {MAX_INSTANCE_ID}"
        )
    Image.fromarray(arr.astype(np.uint16)).save(path)


def read_instance_map(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("I", "I;16", "I;16B"):
            raise DataError(f"{path}: expected a 16-bit single-channel mask, got mode {img.mode!r}")
        arr = np.asarray(img)
    return arr.astype(np.int32)


# ---------------------------------------------------------------------------
# dataset directories


def _read_meta(path: Path) -> dict[str, str]:
    tags = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if "id" in row and row.get("organ"):
                tags[row["id"]] = row["organ"]
    return tags


def load_dataset(root_path) -> list[Sample]:
    """Read every image/mask pair under a dataset root, sorted by id."""
    root = Path(root_path)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")

    tags = {}
    meta = root / "meta.csv"
    if meta.is_file():
        tags = _read_meta(meta)

    ids = sorted(p.stem for p in images_dir.glob("*.png"))
    if not ids:
        warnings.warn(f"{root}: no images found", stacklevel=2)
        return []

    samples = []
    for sample_id in ids:
        mask_path = masks_dir / f"{sample_id}.png"
        if not mask_path.is_file():
            raise DataError(f"sample {sample_id!r}: missing mask {mask_path}")
        try:
            image = read_image(images_dir / f"{sample_id}.png")
            instances = read_instance_map(mask_path)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"sample {sample_id!r}: {exc}") from exc
        samples.append(
            Sample(image=image, instances=instances, id=sample_id, organ_tag=tags.get(sample_id))
        )
    return samples


def write_sample(sample: Sample, root) -> None:
    """Write one sample under a dataset root, creating subdirectories."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_image(sample.image, root / "images" / f"{sample.id}.png")
    write_instance_map(sample.instances, root / "masks" / f"{sample.id}.png")


# ---------------------------------------------------------------------------
# patch extraction


def relabel_contiguous(instances: np.ndarray) -> np.ndarray:
    """Map the instance ids present to 1..K, preserving ascending order."""
    out = np.zeros_like(instances, dtype=np.int32)
    ids = np.unique(instances)
    ids = ids[ids > 0]
    for new_id, old_id in enumerate(ids, start=1):
        out[instances == old_id] = new_id
    return out


def _window_anchors(length: int, size: int, stride: int) -> list[int]:
    anchors = list(range(0, length - size + 1, stride))
    if anchors[-1] != length - size:
        anchors.append(length - size)
    return anchors


def extract_patches(
    sample: Sample,
    size: int = 256,
    stride: int | None = None,
    rng: np.random.Generator | None = None,
    n_random: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sliding-window crops (last row/column anchored to the border) plus
    optional random crops. Instances are relabeled per patch to local
    contiguous ids; border-clipped nuclei keep their clipped geometry.
    """
    if size % 8:
        raise DataError(f"patch size must be divisible by 8, got {size}")
    h, w = sample.instances.shape
    if h < size or w < size:
        raise DataError(f"sample {sample.id!r} ({h}x{w}) is smaller than patch size {size}")
    stride = size if stride is None else stride
    if stride < 1:
        raise DataError(f"stride must be positive, got {stride}")

    anchors = [(y, x) for y in _window_anchors(h, size, stride)
               for x in _window_anchors(w, size, stride)]
    if n_random:
        if rng is None:
            raise DataError("random crops need an rng")
        for _ in range(n_random):
            anchors.append((int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))))

    patches = []
    for y, x in anchors:
        img = sample.image[y:y + size, x:x + size]
        inst = relabel_contiguous(sample.instances[y:y + size, x:x + size])
        patches.append((img, inst))
    return patches


# ---------------------------------------------------------------------------
# synthetic generator


def _ellipse_pixels(shape, cy, cx, a, b, theta):
    """Pixel coordinates inside an ellipse plus each pixel's normalized
    elliptical radius in [0, 1]."""
    h, w = shape
    r = max(a, b) + 1.0
    y0, y1 = max(0, int(np.floor(cy - r))), min(h, int(np.ceil(cy + r)) + 1)
    x0, x1 = max(0, int(np.floor(cx - r))), min(w, int(np.ceil(cx + r)) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dy = ys - cy
    dx = xs - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    rho2 = (u / a) ** 2 + (v / b) ** 2
    inside = rho2 <= 1.0
    return ys[inside], xs[inside], np.sqrt(rho2[inside])


_DILATE = ndimage.generate_binary_structure(2, 2)   # 3x3, gives >=2 px gaps after 2 iterations


def _sample_geometry(rng: np.random.Generator, cfg: SynthConfig, margin: float):
    h, w = cfg.canvas
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    a = rng.uniform(*cfg.radius)
    b = rng.uniform(*cfg.radius)
    theta = rng.uniform(0.0, np.pi)
    return cy, cx, a, b, theta


def generate_synthetic(cfg: SynthConfig) -> Sample:
    """Seeded synthetic sample: dark elliptical nuclei on a light textured
    background. A clump_fraction of the nuclei is placed in overlapping
    pairs or triples, each overlapping the group it joins by 20-50% of
    its own area; overlaps resolve later-placed-on-top. If packing fails
    after bounded retries the sample carries fewer nuclei and a warning
    reports the shortfall.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.canvas
    margin = cfg.radius[1] + 1.0

    n_requested = int(rng.integers(cfg.n_nuclei[0], cfg.n_nuclei[1] + 1))
    n_clumped = int(round(cfg.clump_fraction * n_requested))
    group_sizes: list[int] = []
    remaining = n_clumped
    while remaining >= 2:
        size = int(rng.integers(2, 4)) if remaining >= 3 else 2
        group_sizes.append(size)
        remaining -= size
    group_sizes += [1] * (n_requested - sum(group_sizes))

    instances = np.zeros((h, w), dtype=np.int32)
    blocked = np.zeros((h, w), dtype=bool)      # dilated union of earlier groups
    placed = []                                 # (id, ys, xs, rho) per nucleus, placement order
    next_id = 1
    max_tries = 100

    for group in group_sizes:
        group_mask = np.zeros((h, w), dtype=bool)
        centers: list[tuple[float, float]] = []
        members = 0
        for member in range(group):
            for _ in range(max_tries):
                if member == 0:
                    cy, cx, a, b, theta = _sample_geometry(rng, cfg, margin)
                else:
                    # lean on the previous member so the overlap lands in range
                    py, px = centers[-1]
                    ang = rng.uniform(0.0, 2.0 * np.pi)
                    mean_r = float(np.mean(cfg.radius))
                    dist = rng.uniform(
                        max(0.8 * mean_r, cfg.clump_min_sep),
                        max(1.6 * mean_r, 1.5 * cfg.clump_min_sep),
                    )
                    cy, cx = py + dist * np.sin(ang), px + dist * np.cos(ang)
                    if not (margin <= cy <= h - 1 - margin and margin <= cx <= w - 1 - margin):
                        continue
                    a = rng.uniform(*cfg.radius)
                    b = rng.uniform(*cfg.radius)
                    theta = rng.uniform(0.0, np.pi)
                ys, xs, rho = _ellipse_pixels((h, w), cy, cx, a, b, theta)
                if ys.size < 5 or blocked[ys, xs].any():
                    continue
                if member > 0:
                    overlap = group_mask[ys, xs].mean()
                    if not 0.2 <= overlap <= 0.5:
                        continue
                    min_sep2 = cfg.clump_min_sep ** 2
                    if any((cy - qy) ** 2 + (cx - qx) ** 2 < min_sep2 for qy, qx in centers):
                        continue   # keep clump centroids apart so their peaks resolve
                instances[ys, xs] = next_id
                group_mask[ys, xs] = True
                centers.append((cy, cx))
                placed.append((next_id, ys, xs, rho))
                next_id += 1
                members += 1
                break
        if members:
            blocked |= ndimage.binary_dilation(group_mask, structure=_DILATE, iterations=2)

    # later-placed-on-top can shave earlier members; drop any remnant too
    # small to count as a nucleus (and skip it when rendering, so image and
    # labels stay consistent)
    kept = set()
    for inst_id in (i for i in np.unique(instances) if i > 0):
        if (instances == inst_id).sum() < 5:
            instances[instances == inst_id] = 0
        else:
            kept.add(int(inst_id))
    instances = relabel_contiguous(instances)
    n_placed = int(instances.max())
    if n_placed < n_requested:
        warnings.warn(
            f"synthetic packing placed {n_placed} of {n_requested} nuclei (seed {cfg.seed})",
            stacklevel=2,
        )

    # render: light textured background, dome-shaded purple nuclei
    base = np.array([0.93, 0.90, 0.95])
    low = rng.normal(0.0, 1.0, (h // 8, w // 8, 3))
    texture = ndimage.zoom(low, (8, 8, 1), order=1)
    image = base[None, None, :] + cfg.texture_noise * texture

    for inst_id, ys, xs, rho in placed:
        if inst_id not in kept:
            continue
        color = np.array([0.42, 0.26, 0.56]) + rng.uniform(-0.06, 0.06, 3)
        shade = 0.55 + 0.45 * rho   # darker core marks the centroid
        image[ys, xs] = color[None, :] * shade[:, None]

    image = ndimage.gaussian_filter(image, sigma=(0.7, 0.7, 0.0))
    image += rng.normal(0.0, cfg.texture_noise, image.shape)
    image = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)

    return Sample(
        image=image.astype(np.float32) / 255.0,
        instances=instances,
        id=f"synth_{cfg.seed:05d}",
    )
