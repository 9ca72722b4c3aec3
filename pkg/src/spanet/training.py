"""Two-stage training with stochastic weight averaging.

Stage one fits the dual-head network (mask + centroid map) with a smooth
Jaccard plus MSE objective; stage two fits the positional-embedding
network on 9-channel inputs assembled from stage one's predictions. Both
use SGD under a cyclic learning rate, snapshot the weights at every cycle
end, average the snapshots, and recalibrate normalization statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib import colors as mcolors
from scipy import ndimage

from .checkpoint import CheckpointError, ModelWeights
from .data import Sample, extract_patches
from .groundtruth import binary_mask, build_instance_input, detection_gt, positional_gt
from .losses import masked_smooth_l1, mse, smooth_jaccard
from .networks import NetworkConfig, SpaNet


class DivergenceError(Exception):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class SWASchedule:
    """Cyclic learning-rate schedule with weight averaging at cycle ends."""

    alpha1: float = 0.01
    alpha2: float = 0.0001
    cycle: int = 20
    total_epochs: int = 100

    def __post_init__(self):
        if not self.alpha1 > self.alpha2 > 0:
            raise ValueError(f"need alpha1 > alpha2 > 0, got {self.alpha1}, {self.alpha2}")
        if self.cycle < 1:
            raise ValueError(f"cycle length must be >= 1, got {self.cycle}")
        if self.total_epochs < 1 or self.total_epochs % self.cycle:
            raise ValueError(
                f"total_epochs must be a positive multiple of cycle, "
                f"got {self.total_epochs} with cycle {self.cycle}"
            )

    @property
    def n_snapshots(self) -> int:
        return self.total_epochs // self.cycle


def cyclic_lr(epoch: int, sched: SWASchedule) -> float:
    """Learning rate for a 1-indexed epoch: linear from near alpha1 down
    to alpha2 within each cycle, restarting every `cycle` epochs."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-indexed, got {epoch}")
    t = ((epoch - 1) % sched.cycle + 1) / sched.cycle
    return (1.0 - t) * sched.alpha1 + t * sched.alpha2


@dataclass
class TrainConfig:
    patch_size: int = 256
    batch_size: int = 2
    schedule: SWASchedule = field(default_factory=SWASchedule)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.patch_size % 8:
            raise ValueError(f"patch_size must be divisible by 8, got {self.patch_size}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    final: ModelWeights            # SWA weights with recalibrated statistics
    snapshots: list[ModelWeights]  # one per cycle end
    log: list[dict]                # per-epoch entries: epoch, lr, losses


# ---------------------------------------------------------------------------
# augmentation


def augment(
    rgb: np.ndarray,
    instances: np.ndarray,
    rng: np.random.Generator,
    *,
    flip_p: float = 0.5,
    rot_p: float = 0.5,
    hsv_p: float = 0.5,
    blur_p: float = 0.25,
    noise_p: float = 0.25,
):
    """Paired augmentation. Geometric ops (flips, right-angle rotations)
    hit both arrays; photometric ops (HSV jitter, blur, noise) only the
    image. Each op fires independently; with every probability at zero
    the pair passes through unchanged."""
    img, inst = rgb, instances
    if rng.random() < flip_p:
        img, inst = img[:, ::-1], inst[:, ::-1]
    if rng.random() < flip_p:
        img, inst = img[::-1], inst[::-1]
    if rng.random() < rot_p:
        k = int(rng.integers(1, 4))
        img, inst = np.rot90(img, k), np.rot90(inst, k)
    if rng.random() < hsv_p:
        hsv = mcolors.rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-0.04, 0.04)) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] + rng.uniform(-0.1, 0.1), 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] + rng.uniform(-0.1, 0.1), 0.0, 1.0)
        img = mcolors.hsv_to_rgb(hsv)
    if rng.random() < blur_p:
        sigma = rng.uniform(0.0, 1.0)
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0.0))
    if rng.random() < noise_p:
        img = img + rng.normal(0.0, 0.01, img.shape)
    img = np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=np.float32)
    return img, np.ascontiguousarray(inst)


# ---------------------------------------------------------------------------
# weight averaging


def swa_average(snapshots: list[ModelWeights]) -> ModelWeights:
    """Elementwise mean of the snapshots' parameters (accumulated in
    float64). Normalization statistics are taken from the last snapshot
    as placeholders; callers must recalibrate them."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    ref = snapshots[0]
    ref_json = ref.config.canonical_json()
    for snap in snapshots[1:]:
        if snap.config.canonical_json() != ref_json:
            raise CheckpointError("snapshots come from different network configs")
        if list(snap.params) != list(ref.params):
            raise CheckpointError("snapshots disagree on parameter names")

    params = type(ref.params)()
    for name, first in ref.params.items():
        acc = first.astype(np.float64).copy()
        for snap in snapshots[1:]:
            acc += snap.params[name]
        params[name] = (acc / len(snapshots)).astype(first.dtype)
    last = snapshots[-1]
    stats = type(last.stats)((name, arr.copy()) for name, arr in last.stats.items())
    meta = dict(last.meta)
    meta["swa_of"] = len(snapshots)
    return ModelWeights(config=ref.config, params=params, stats=stats, meta=meta)


def recalibrate_norm_stats(model: SpaNet, batches) -> SpaNet:
    """Recompute BatchNorm running statistics with one cumulative-average
    sweep over the given input batches. Parameters are untouched."""
    norm_layers = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved_momentum = [m.momentum for m in norm_layers]
    for m in norm_layers:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    n_batches = 0
    with torch.no_grad():
        for batch in batches:
            model(batch)
            n_batches += 1
    for m, mom in zip(norm_layers, saved_momentum):
        m.momentum = mom
    model.eval()
    if n_batches == 0:
        raise ValueError("recalibration needs at least one batch")
    return model


# ---------------------------------------------------------------------------
# tensor plumbing


def _to_nchw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)


def _iter_minibatches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _guard_finite(loss: torch.Tensor, epoch: int):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at epoch {epoch}")


def _patch_pool(samples: list[Sample], patch_size: int):
    patches = []
    for sample in samples:
        patches.extend(extract_patches(sample, size=patch_size, stride=patch_size))
    if not patches:
        raise ValueError("no training patches")
    return patches


# ---------------------------------------------------------------------------
# stage one: segmentation + detection


def train_segdet(
    samples: list[Sample],
    cfg: TrainConfig,
    net: NetworkConfig | None = None,
    beta: float = 0.01,
    radius: float = 8.0,
) -> TrainResult:
    """Fit the dual-head network on (mask, centroid map) targets with
    smooth Jaccard + MSE under the SWA regime."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = NetworkConfig(in_channels=3, out_channels=1, head="dual")
    model = SpaNet(net)
    patches = _patch_pool(samples, cfg.patch_size)

    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.schedule.alpha1,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    snapshots: list[ModelWeights] = []
    log: list[dict] = []
    model.train()
    for epoch in range(1, cfg.schedule.total_epochs + 1):
        lr = cyclic_lr(epoch, cfg.schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(patches))
        seg_sum = det_sum = 0.0
        n_batches = 0
        for idx_batch in _iter_minibatches(len(patches), cfg.batch_size, order):
            imgs, masks, dets = [], [], []
            for i in idx_batch:
                img, inst = patches[i]
                if cfg.augment:
                    img, inst = augment(img, inst, rng)
                imgs.append(_to_nchw(img))
                masks.append(torch.from_numpy(binary_mask(inst).astype(np.float32)))
                dets.append(torch.from_numpy(detection_gt(inst, beta=beta, radius=radius).astype(np.float32)))
            x = torch.stack(imgs)
            mask_t = torch.stack(masks).unsqueeze(1)
            det_t = torch.stack(dets).unsqueeze(1)

            opt.zero_grad()
            seg_pred, det_pred = model(x)
            loss_seg = smooth_jaccard(seg_pred, mask_t).value
            loss_det = mse(det_pred, det_t).value
            loss = loss_seg + loss_det
            _guard_finite(loss, epoch)
            loss.backward()
            opt.step()
            seg_sum += float(loss_seg.detach())
            det_sum += float(loss_det.detach())
            n_batches += 1
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss_seg": seg_sum / n_batches,
            "loss_det": det_sum / n_batches,
            "loss": (seg_sum + det_sum) / n_batches,
        }
        log.append(entry)
        if epoch % cfg.schedule.cycle == 0:
            snapshots.append(ModelWeights.from_model(model, meta={"epoch": epoch}))

    averaged = swa_average(snapshots)
    swa_model = averaged.build_model()
    recalibrate_norm_stats(swa_model, _recal_batches_rgb(patches, cfg.batch_size))
    final = ModelWeights.from_model(swa_model, meta={"epoch": cfg.schedule.total_epochs, "swa_of": len(snapshots)})
    return TrainResult(final=final, snapshots=snapshots, log=log)


def _recal_batches_rgb(patches, batch_size: int):
    for start in range(0, len(patches), batch_size):
        yield torch.stack([_to_nchw(img) for img, _ in patches[start:start + batch_size]])


# ---------------------------------------------------------------------------
# stage two: positional embeddings


def train_instance(
    samples: list[Sample],
    segdet: ModelWeights,
    cfg: TrainConfig,
    net: NetworkConfig | None = None,
) -> TrainResult:
    """Fit the embedding network on 9-channel inputs built from the
    stage-one model's segmentation predictions, against positional
    ground truth under a foreground-masked smoothed L1."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = NetworkConfig(in_channels=9, out_channels=6, head="single")
    model = SpaNet(net)
    seg_model = segdet.build_model()
    patches = _patch_pool(samples, cfg.patch_size)

    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.schedule.alpha1,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
    snapshots: list[ModelWeights] = []
    log: list[dict] = []
    model.train()
    for epoch in range(1, cfg.schedule.total_epochs + 1):
        lr = cyclic_lr(epoch, cfg.schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(patches))
        loss_sum = 0.0
        n_batches = 0
        for idx_batch in _iter_minibatches(len(patches), cfg.batch_size, order):
            xs, targets, masks = [], [], []
            for i in idx_batch:
                img, inst = patches[i]
                if cfg.augment:
                    img, inst = augment(img, inst, rng)
                seg_pred = _predict_seg(seg_model, img)
                xs.append(_to_nchw(build_instance_input(img, seg_pred)))
                targets.append(_to_nchw(positional_gt(inst).grid))
                masks.append(torch.from_numpy(inst > 0))
            x = torch.stack(xs)
            target = torch.stack(targets)
            mask = torch.stack(masks)

            opt.zero_grad()
            pred = model(x)
            loss = masked_smooth_l1(pred, target, mask).value
            _guard_finite(loss, epoch)
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach())
            n_batches += 1
        log.append({"epoch": epoch, "lr": lr, "loss_emb": loss_sum / n_batches,
                    "loss": loss_sum / n_batches})
        if epoch % cfg.schedule.cycle == 0:
            snapshots.append(ModelWeights.from_model(model, meta={"epoch": epoch}))

    averaged = swa_average(snapshots)
    swa_model = averaged.build_model()
    recalibrate_norm_stats(
        swa_model, _recal_batches_instance(patches, cfg.batch_size, seg_model)
    )
    final = ModelWeights.from_model(swa_model, meta={"epoch": cfg.schedule.total_epochs, "swa_of": len(snapshots)})
    return TrainResult(final=final, snapshots=snapshots, log=log)


def _predict_seg(seg_model: SpaNet, img: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        seg, _ = seg_model(_to_nchw(img).unsqueeze(0))
    return seg[0, 0].numpy()


def _recal_batches_instance(patches, batch_size: int, seg_model: SpaNet):
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        yield torch.stack([
            _to_nchw(build_instance_input(img, _predict_seg(seg_model, img)))
            for img, _ in chunk
        ])
