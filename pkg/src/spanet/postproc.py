"""Post-processing: from (segmentation, detection, embedding) maps to a
labeled instance map. Clumps come from connected components of the
binarized segmentation; the detection map's local maxima set the cluster
count per clump; pixel embeddings are split by spectral clustering with
an RBF affinity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class PostprocParams:
    """All post-processing knobs; defaults follow the declared pipeline
    configuration (threshold 0.3, min area 5)."""

    threshold: float = 0.3
    min_area: int = 5
    maxima_window: int = 3      # half-width m; peaks compare against a (2m+1)^2 neighborhood
    maxima_min_dist: float = 4.0
    maxima_height: float = 0.2
    rbf_gamma: float | None = None   # None = median-distance heuristic per clump
    max_clump_pixels: int = 2000
    seed: int = 0


@dataclass
class Clump:
    """One connected component: its pixel coordinates and, once
    estimated, the number of nuclei it is believed to contain."""

    ys: np.ndarray
    xs: np.ndarray
    component_id: int
    estimated_k: int | None = None

    @property
    def area(self) -> int:
        return len(self.ys)


def binarize_mask(seg: np.ndarray, threshold: float = 0.3, min_area: int = 5) -> np.ndarray:
    """Strict threshold then removal of small 8-connected objects."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    mask = seg > threshold
    if min_area > 1 and mask.any():
        labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        areas = np.bincount(labels.ravel())
        small = np.nonzero(areas < min_area)[0]
        small = small[small > 0]
        if small.size:
            mask &= ~np.isin(labels, small)
    return mask


def connected_components(mask: np.ndarray) -> list[Clump]:
    """8-connected components of a binary mask, in label order."""
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    clumps = []
    for component_id, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = np.nonzero(labels[sl] == component_id)
        clumps.append(
            Clump(ys=ys + sl[0].start, xs=xs + sl[1].start, component_id=component_id)
        )
    return clumps


def count_local_maxima(
    det: np.ndarray,
    clump: Clump,
    window: int = 3,
    min_dist: float = 4.0,
    height: float = 0.2,
) -> int:
    """Number of detection-map peaks inside a clump, at least 1.

    The map is zeroed outside the clump; a peak must dominate its
    (2*window+1)^2 neighborhood, exceed the height threshold, and lie at
    least min_dist pixels from every stronger (or equal, earlier-ranked)
    peak.
    """
    pad = window + 1
    y0 = max(0, int(clump.ys.min()) - pad)
    y1 = min(det.shape[0], int(clump.ys.max()) + pad + 1)
    x0 = max(0, int(clump.xs.min()) - pad)
    x1 = min(det.shape[1], int(clump.xs.max()) + pad + 1)
    local = np.zeros((y1 - y0, x1 - x0), dtype=np.float64)
    local[clump.ys - y0, clump.xs - x0] = det[clump.ys, clump.xs]

    footprint = ndimage.maximum_filter(local, size=2 * window + 1, mode="constant")
    cand = (local >= footprint) & (local > height)
    cys, cxs = np.nonzero(cand)
    if cys.size == 0:
        return 1
    vals = local[cys, cxs]
    order = np.lexsort((cxs, cys, -vals))
    kept_y: list[int] = []
    kept_x: list[int] = []
    min_d2 = min_dist * min_dist
    for idx in order:
        y, x = int(cys[idx]), int(cxs[idx])
        ok = True
        for ky, kx in zip(kept_y, kept_x):
            if (ky - y) ** 2 + (kx - x) ** 2 < min_d2:
                ok = False
                break
        if ok:
            kept_y.append(y)
            kept_x.append(x)
    return max(len(kept_y), 1)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            n_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters are
    reseeded to the farthest point, so every label in [0, k) is used."""
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[int(rng.integers(n))]
        else:
            centers[c] = points[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for c in range(k):
            sel = new_labels == c
            if sel.any():
                centers[c] = points[sel].mean(axis=0)
            else:
                far = int(dists.min(axis=1).argmax())
                centers[c] = points[far]
                new_labels[far] = c
        if (new_labels == labels).all():
            break
        labels = new_labels
    return labels


def rbf_affinity(points: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """exp(-gamma * squared distance); gamma defaults to 1/(2*sigma^2)
    with sigma the median pairwise distance (scale-free)."""
    diff = points[:, None, :] - points[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    if gamma is None:
        n = len(points)
        if n < 2:
            gamma = 1.0
        else:
            iu = np.triu_indices(n, k=1)
            sigma = float(np.median(np.sqrt(d2[iu])))
            gamma = 1.0 / (2.0 * sigma * sigma) if sigma > 0 else 1.0
    return np.exp(-gamma * d2)


def spectral_cluster(points, k: int, gamma: float | None = None, seed: int = 0) -> np.ndarray:
    """Normalized-cut spectral clustering of embedding vectors.

    Builds the RBF affinity, takes the k smallest eigenvectors of the
    symmetric normalized Laplacian, row-normalizes them, and clusters the
    rows with seeded k-means. Returns labels in [0, k).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected (n, dim) points, got shape {points.shape}")
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n points, got k={k}, n={n}")
    if not np.isfinite(points).all():
        raise ValueError("points contain non-finite values")
    if k == 1:
        return np.zeros(n, dtype=np.int64)

    affinity = rbf_affinity(points, gamma)
    inv_sqrt_deg = 1.0 / np.sqrt(affinity.sum(axis=1))
    laplacian = np.eye(n) - inv_sqrt_deg[:, None] * affinity * inv_sqrt_deg[None, :]
    _, vecs = np.linalg.eigh(laplacian)
    embedding = vecs[:, :k]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = embedding / np.maximum(norms, 1e-12)
    return _kmeans(embedding, k, np.random.default_rng(seed))


def instance_segment(
    seg: np.ndarray,
    det: np.ndarray,
    emb: np.ndarray,
    params: PostprocParams | None = None,
) -> np.ndarray:
    """Full post-processing: binarize, find clumps, estimate each clump's
    nucleus count from detection peaks, and split multi-nucleus clumps by
    clustering their embedding vectors. Output ids are contiguous from 1;
    foreground support equals the binarized mask exactly.
    """
    params = params or PostprocParams()
    if seg.shape != det.shape or emb.shape[:2] != seg.shape:
        raise ValueError("seg, det and emb must share the spatial grid")
    mask = binarize_mask(seg, params.threshold, params.min_area)
    out = np.zeros(seg.shape, dtype=np.int32)
    next_id = 1
    for clump in connected_components(mask):
        k = count_local_maxima(
            det, clump,
            window=params.maxima_window,
            min_dist=params.maxima_min_dist,
            height=params.maxima_height,
        )
        clump.estimated_k = k
        k = min(k, clump.area)
        if k == 1:
            out[clump.ys, clump.xs] = next_id
            next_id += 1
            continue

        pts = emb[clump.ys, clump.xs].astype(np.float64)
        rng = np.random.default_rng(params.seed + clump.component_id)
        if clump.area > params.max_clump_pixels:
            sub = np.sort(rng.choice(clump.area, size=params.max_clump_pixels, replace=False))
        else:
            sub = np.arange(clump.area)
        try:
            sub_labels = spectral_cluster(pts[sub], k, gamma=params.rbf_gamma, seed=params.seed)
        except np.linalg.LinAlgError:
            out[clump.ys, clump.xs] = next_id   # degenerate clump: single instance
            next_id += 1
            continue

        labels = np.empty(clump.area, dtype=np.int64)
        labels[sub] = sub_labels
        rest = np.setdiff1d(np.arange(clump.area), sub, assume_unique=True)
        if rest.size:
            means = np.stack([pts[sub][sub_labels == c].mean(axis=0) for c in range(k)])
            d = ((pts[rest][:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
            labels[rest] = d.argmin(axis=1)

        for c in range(k):
            sel = labels == c
            if not sel.any():
                continue
            out[clump.ys[sel], clump.xs[sel]] = next_id
            next_id += 1
    return out
