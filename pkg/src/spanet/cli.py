"""Command-line entry points: synthesize data, train both stages, run
inference with post-processing, evaluate predictions, and report model
size. Every command takes --config/--seed and leaves a resolved config
next to its outputs, so runs are reproducible from the directory alone.

Exit codes: 0 ok, 2 config/usage error, 3 data or checkpoint error,
4 training divergence.
"""

from __future__ import annotations

import csv
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointError, ModelWeights
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    read_image,
    read_instance_map,
    write_instance_map,
    write_sample,
)
from .groundtruth import build_instance_input
from .metrics import evaluate
from .networks import NetworkConfig, SpaNet, count_parameters
from .postproc import PostprocParams, instance_segment
from .training import (
    DivergenceError,
    SWASchedule,
    TrainConfig,
    train_instance,
    train_segdet,
)

EMB_FORMAT_TAG = "spanet-emb-v1"


@click.group()
def cli():
    """Proposal-free nuclear instance segmentation pipeline."""


def main(argv=None) -> int:
    """Console entry point mapping failures onto stable exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 130
    except click.ClickException as exc:
        exc.show()
        return 2
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except (DataError, CheckpointError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 3
    except DivergenceError as exc:
        click.echo(f"divergence: {exc}", err=True)
        return 4


# ---------------------------------------------------------------------------
# shared plumbing


def _load_config(config_path, seed) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg = cfg.with_overrides({"seed": seed})
    return cfg


def _prepare_out(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _net_config(cfg: RunConfig, stage: str) -> NetworkConfig:
    levels = cfg["net.levels"]
    common = dict(
        levels=levels,
        stem_channels=cfg["net.stem_channels"],
        growth_rate=cfg["net.growth_rate"],
        reduce_rate=cfg["net.reduce_rate"],
        repetitions=(cfg["net.repetitions"],) * (2 * levels - 1),
    )
    if stage == "segdet":
        return NetworkConfig(in_channels=3, out_channels=1, head="dual", **common)
    return NetworkConfig(in_channels=9, out_channels=6, head="single", **common)


def _post_params(cfg: RunConfig) -> PostprocParams:
    gamma = cfg["post.rbf_gamma"]
    return PostprocParams(
        threshold=cfg["post.threshold"],
        min_area=cfg["post.min_area"],
        maxima_window=cfg["post.maxima_window"],
        maxima_min_dist=cfg["post.maxima_min_dist"],
        maxima_height=cfg["post.maxima_height"],
        rbf_gamma=None if gamma == 0 else gamma,
        max_clump_pixels=cfg["post.max_clump_pixels"],
        seed=cfg["seed"],
    )


def _write_map16(arr: np.ndarray, path: Path) -> None:
    """Quantize a [0, 1] map to 16 bits and write it losslessly."""
    q = (np.clip(arr, 0.0, 1.0) * 65535.0).round().astype(np.uint16)
    Image.fromarray(q).save(path)


def _write_embedding(emb: np.ndarray, path: Path) -> None:
    h, w, c = emb.shape
    header = f"{EMB_FORMAT_TAG} h={h} w={w} c={c} dtype=float32\n"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    """Counterpart of the embedding container written by infer."""
    with open(path, "rb") as fh:
        header = fh.readline().decode().strip().split()
        if not header or header[0] != EMB_FORMAT_TAG:
            raise DataError(f"{path}: not a {EMB_FORMAT_TAG} container")
        fields = dict(part.split("=", 1) for part in header[1:])
        h, w, c = int(fields["h"]), int(fields["w"]), int(fields["c"])
        raw = fh.read()
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).copy()


# ---------------------------------------------------------------------------
# synth


@cli.command("synth")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config overriding defaults.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def cmd_synth(config_path, seed, out_dir, force):
    """Generate a synthetic train/test dataset under OUT."""
    cfg = _load_config(config_path, seed)
    out = _prepare_out(out_dir, force)
    base = cfg["seed"]
    counts = {"train": cfg["synth.n_train"], "test": cfg["synth.n_test"]}
    for split_index, (split, count) in enumerate(counts.items()):
        root = out / split
        rows = []
        for i in range(count):
            synth_cfg = SynthConfig(
                canvas=(cfg["synth.canvas_h"], cfg["synth.canvas_w"]),
                n_nuclei=(cfg["synth.n_min"], cfg["synth.n_max"]),
                radius=(cfg["synth.radius_min"], cfg["synth.radius_max"]),
                clump_fraction=cfg["synth.clump_fraction"],
                clump_min_sep=cfg["synth.clump_min_sep"],
                texture_noise=cfg["synth.texture_noise"],
                seed=base * 100000 + split_index * 10000 + i,
            )
            sample = generate_synthetic(synth_cfg)
            sample.id = f"{split}_{i:03d}"
            write_sample(sample, root)
            rows.append((sample.id, "synthetic", split))
        with open(root / "meta.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "organ", "split"])
            writer.writerows(rows)
    cfg.save(out / "config.json")
    (out / "manifest.txt").write_text(
        f"config_hash {cfg.config_hash()}\n"
        + "".join(f"{split} {count}\n" for split, count in counts.items())
    )
    click.echo(f"wrote {counts['train']} train + {counts['test']} test samples to {out}")


# ---------------------------------------------------------------------------
# train


@cli.command("train")
@click.argument("dataset_dir", type=click.Path())
@click.option("--stage", type=click.Choice(["segdet", "instance"]), required=True)
@click.option("--segdet-ckpt", type=click.Path(), default=None,
              help="Stage-one checkpoint (required for --stage instance).")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--force", is_flag=True)
def cmd_train(dataset_dir, stage, segdet_ckpt, config_path, seed, out_dir, force):
    """Train one stage on the dataset under DATASET_DIR."""
    cfg = _load_config(config_path, seed)
    samples = load_dataset(dataset_dir)
    if not samples:
        raise DataError(f"{dataset_dir}: no samples to train on")
    out = _prepare_out(out_dir, force)

    schedule = SWASchedule(
        alpha1=cfg["train.alpha1"],
        alpha2=cfg["train.alpha2"],
        cycle=cfg["train.cycle"],
        total_epochs=cfg["train.epochs"],
    )
    batch_key = "train.batch_size_segdet" if stage == "segdet" else "train.batch_size_instance"
    train_cfg = TrainConfig(
        patch_size=cfg["train.patch_size"],
        batch_size=cfg[batch_key],
        schedule=schedule,
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        augment=cfg["train.augment"],
        seed=cfg["seed"],
    )
    net = _net_config(cfg, stage)

    if stage == "segdet":
        result = train_segdet(
            samples, train_cfg, net=net, beta=cfg["gt.beta"], radius=cfg["gt.radius"]
        )
    else:
        if not segdet_ckpt:
            raise click.UsageError("--stage instance requires --segdet-ckpt")
        weights = ModelWeights.load(segdet_ckpt)
        result = train_instance(samples, weights, train_cfg, net=net)

    for index, snap in enumerate(result.snapshots, start=1):
        snap.save(out / f"cycle_{index:02d}.ckpt")
    result.final.save(out / "swa.ckpt")
    lines = []
    for entry in result.log:
        parts = [f"epoch={entry['epoch']}", f"lr={entry['lr']!r}"]
        parts += [f"{k}={entry[k]:.6f}" for k in sorted(entry) if k.startswith("loss")]
        lines.append(" ".join(parts))
    (out / "train_log.txt").write_text("".join(line + "\n" for line in lines))
    cfg.save(out / "config.json")
    click.echo(
        f"{stage}: {len(result.snapshots)} cycle checkpoints + swa.ckpt in {out} "
        f"(final loss {result.log[-1]['loss']:.4f})"
    )


# ---------------------------------------------------------------------------
# infer


def _pad_to_divisor(arr: np.ndarray, divisor: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="reflect")


def _infer_one(image_path: Path, seg_model: SpaNet, inst_model: SpaNet,
               post: PostprocParams, out: Path) -> str:
    rgb = read_image(image_path)
    h, w = rgb.shape[:2]
    divisor = 2 ** (seg_model.cfg.levels - 1)
    padded = _pad_to_divisor(rgb, divisor)

    x = torch.from_numpy(padded).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        seg_t, det_t = seg_model(x)
        nine = build_instance_input(padded, seg_t[0, 0].numpy())
        emb_t = inst_model(torch.from_numpy(nine).permute(2, 0, 1).unsqueeze(0))

    seg = seg_t[0, 0].numpy()[:h, :w]
    det = det_t[0, 0].numpy()[:h, :w]
    emb = emb_t[0].permute(1, 2, 0).numpy()[:h, :w]
    labels = instance_segment(seg, det, emb, post)

    stem = image_path.stem
    _write_map16(seg, out / "seg" / f"{stem}.png")
    _write_map16(det, out / "det" / f"{stem}.png")
    _write_embedding(emb, out / "emb" / f"{stem}.bin")
    write_instance_map(labels, out / "instances" / f"{stem}.png")
    _write_overlay(rgb, labels, out / "overlay" / f"{stem}.png")
    return stem


def _write_overlay(rgb: np.ndarray, labels: np.ndarray, path: Path) -> None:
    """Instance boundaries in distinct colors over the input image."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt
    from scipy import ndimage

    dilated = ndimage.grey_dilation(labels, size=(3, 3))
    eroded = ndimage.grey_erosion(labels, size=(3, 3))
    boundary = (labels > 0) & ((dilated != labels) | (eroded != labels))

    overlay = np.zeros((*labels.shape, 4))
    cmap = plt.get_cmap("tab20")
    for inst_id in np.unique(labels[boundary]):
        sel = boundary & (labels == inst_id)
        overlay[sel] = (*cmap(int(inst_id) % 20)[:3], 1.0)

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(rgb)
    ax.imshow(overlay)
    ax.set_axis_off()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


@cli.command("infer")
@click.argument("image_path", type=click.Path())
@click.option("--segdet-ckpt", type=click.Path(), required=True)
@click.option("--instance-ckpt", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--force", is_flag=True)
def cmd_infer(image_path, segdet_ckpt, instance_ckpt, config_path, seed, out_dir, force):
    """Segment instances in IMAGE_PATH (one image or a directory)."""
    cfg = _load_config(config_path, seed)
    seg_model = ModelWeights.load(segdet_ckpt).build_model()
    inst_model = ModelWeights.load(instance_ckpt).build_model()
    if seg_model.cfg.head != "dual":
        raise CheckpointError("--segdet-ckpt must hold a dual-head model")
    if inst_model.cfg.in_channels != 9 or inst_model.cfg.out_channels != 6:
        raise CheckpointError("--instance-ckpt must hold a 9-in/6-out model")

    source = Path(image_path)
    if source.is_dir():
        paths = sorted(source.glob("*.png"))
    elif source.is_file():
        paths = [source]
    else:
        raise DataError(f"{source}: no such image or directory")
    if not paths:
        raise DataError(f"{source}: no images found")

    out = _prepare_out(out_dir, force)
    for sub in ("seg", "det", "emb", "instances", "overlay"):
        (out / sub).mkdir()
    post = _post_params(cfg)

    workers = int(os.environ.get("SPANET_NUM_WORKERS", "1") or "1")
    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stems = list(pool.map(
                lambda p: _infer_one(p, seg_model, inst_model, post, out), paths
            ))
    else:
        stems = [_infer_one(p, seg_model, inst_model, post, out) for p in paths]
    cfg.save(out / "config.json")
    click.echo(f"segmented {len(stems)} image(s) into {out}")


# ---------------------------------------------------------------------------
# eval


@cli.command("eval")
@click.argument("pred_dir", type=click.Path())
@click.argument("gt_dir", type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Report file (default: metrics_report.txt inside PRED_DIR).")
def cmd_eval(pred_dir, gt_dir, config_path, out_path):
    """Score predicted instance maps in PRED_DIR against GT_DIR."""
    cfg = _load_config(config_path, None)
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    pred_ids = sorted(p.stem for p in pred_root.glob("*.png"))
    gt_ids = sorted(p.stem for p in gt_root.glob("*.png"))
    if not gt_ids:
        raise DataError(f"{gt_root}: no ground-truth maps found")
    missing = sorted(set(gt_ids) - set(pred_ids))
    extra = sorted(set(pred_ids) - set(gt_ids))
    if missing or extra:
        raise DataError(
            f"unmatched ids: missing predictions {missing}, missing ground truth {extra}"
        )

    pairs = [
        (read_instance_map(gt_root / f"{i}.png"), read_instance_map(pred_root / f"{i}.png"))
        for i in gt_ids
    ]
    report = evaluate(pairs, ids=gt_ids, iou_threshold=cfg["metrics.iou_threshold"])
    text = report.to_text()
    target = Path(out_path) if out_path else pred_root / "metrics_report.txt"
    target.write_text(text)
    click.echo(text, nl=False)


# ---------------------------------------------------------------------------
# params


@cli.command("params")
@click.option("--config", "config_path", type=click.Path(), default=None)
def cmd_params(config_path):
    """Report parameter counts for both networks under the config."""
    cfg = _load_config(config_path, None)
    for stage, label in (("segdet", "segdet (dual head, 3 in)"),
                         ("instance", "instance (single head, 9 in / 6 out)")):
        model = SpaNet(_net_config(cfg, stage))
        click.echo(f"{label}: {count_parameters(model)}")


if __name__ == "__main__":
    sys.exit(main())
