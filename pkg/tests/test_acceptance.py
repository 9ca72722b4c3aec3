"""Acceptance gate: nine release criteria, one printed PASS/FAIL line each.

Fast criteria run against independent oracles written from the
definitions; the two end-to-end criteria drive the installed command
line twice in subprocesses and check overfit quality plus bitwise
reproducibility. Thresholds for the scaled-down end-to-end run were
frozen after the first baseline (train aji 97.09 / f1 98.80, test aji
88.37 on this configuration).
"""

import json
import math
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from spanet.blocks import (DownTransition, MSBConfig, MSDUConfig,
                           MultiScaleBlock, MultiScaleDenseUnit,
                           TransitionConfig, UpTransition, receptive_field)
from spanet.cli import main
from spanet.data import SynthConfig, generate_synthetic
from spanet.groundtruth import binary_mask, detection_gt, positional_gt
from spanet.losses import masked_smooth_l1, mse, smooth_jaccard
from spanet.metrics import aji, f1_instances
from spanet.postproc import (PostprocParams, instance_segment, rbf_affinity,
                             spectral_cluster)
from spanet.training import SWASchedule, cyclic_lr, swa_average

FROZEN_E2E = {
    "seed": 7,
    "synth.n_train": 20, "synth.n_test": 6,
    "synth.radius_min": 6.0, "synth.radius_max": 10.0,
    "synth.clump_min_sep": 13.0,
    "net.levels": 3, "net.stem_channels": 16,
    "net.growth_rate": 16, "net.repetitions": 2,
    "gt.radius": 5.0,
    "train.patch_size": 128, "train.cycle": 5, "train.epochs": 20,
    "train.batch_size_segdet": 1, "train.batch_size_instance": 2,
    "train.augment": False,
    "post.maxima_window": 5, "post.maxima_min_dist": 11.0,
    "post.maxima_height": 0.5,
}

THRESH_TRAIN_AJI = 70.0
THRESH_TRAIN_F1 = 85.0
THRESH_TEST_AJI = 50.0


def _verdict(n, name, capsys, ok, detail=""):
    suffix = f" ({detail})" if detail else ""
    with capsys.disabled():
        print(f"[criterion {n}] {name}: {'PASS' if ok else 'FAIL'}{suffix}")
    assert ok, f"criterion {n} ({name}) failed{suffix}"


# -- 1: receptive-field reproduction ------------------------------------------


def test_receptive_field_reproduction(capsys):
    wide = [receptive_field(k, d) for k, d in zip((3, 3, 5, 7), (1, 4, 6, 8))]
    narrow = [receptive_field(k, d) for k, d in zip((3, 5, 3, 3), (1, 1, 4, 6))]
    ok = wide == [3, 9, 25, 49] and narrow == [3, 5, 9, 13]
    _verdict(1, "receptive fields", capsys, ok, f"{wide} / {narrow}")


# -- 2: detection target oracle -----------------------------------------------


def test_detection_target_oracle(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        h, w = int(rng.integers(24, 49)), int(rng.integers(24, 49))
        cy0, cx0 = rng.uniform(8, h - 9), rng.uniform(8, w - 9)
        a, b = rng.uniform(3, 6), rng.uniform(3, 6)
        yy, xx = np.mgrid[0:h, 0:w]
        inst = ((((xx - cx0) / a) ** 2 + ((yy - cy0) / b) ** 2) <= 1.0).astype(np.int32)
        beta = float(rng.uniform(0.005, 0.05))
        r = float(rng.uniform(4.0, 10.0))
        got = detection_gt(inst, beta=beta, radius=r)

        ys, xs = np.nonzero(inst)
        ccx, ccy = float(np.rint(xs.mean())), float(np.rint(ys.mean()))
        expected = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                d = math.sqrt((x - ccx) ** 2 + (y - ccy) ** 2)
                if d <= r:
                    expected[y, x] = 1.0 / (1.0 + beta * d)
        worst = max(worst, float(np.abs(got - expected).max()))
        assert got[int(ccy), int(ccx)] == 1.0
        assert (got[expected == 0.0] == 0.0).all()
    _verdict(2, "detection target vs per-pixel oracle", capsys,
             worst <= 1e-12, f"worst abs diff {worst:.1e}")


# -- 3: gradient suite ---------------------------------------------------------


def _numeric_vs_analytic(fn, x, h=1e-6):
    """Max relative error of central differences against autograd."""
    xg = x.clone().requires_grad_(True)
    fn(xg).backward()
    analytic = xg.grad.detach()
    numeric = torch.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        nflat[i] = (up - down) / (2 * h)
    denom = analytic.abs().max().clamp_min(1e-8)
    return ((numeric - analytic).abs().max() / denom).item()


def test_gradient_suite(capsys):
    gen = torch.Generator().manual_seed(33)

    def rand(shape):
        return torch.randn(shape, generator=gen, dtype=torch.float64)

    blocks = (
        ("msb", MultiScaleBlock(3, MSBConfig(4, (3, 3, 5, 7), (1, 4, 6, 8))), (1, 3, 6, 6)),
        ("msdu", MultiScaleDenseUnit(
            4, MSDUConfig(4, (3, 5, 3, 3), (1, 1, 4, 6), repetitions=2)), (1, 4, 6, 6)),
        ("dtb", DownTransition(5, TransitionConfig(0.5)), (1, 5, 6, 6)),
        ("utb", UpTransition(4, TransitionConfig(0.5)), (1, 4, 4, 4)),
    )
    errors = {}
    for name, module, shape in blocks:
        module = module.double().eval()
        x = rand(shape)
        with torch.no_grad():
            proj = rand(module(x).shape)
        errors[name] = _numeric_vs_analytic(
            lambda t, m=module, p=proj: (m(t) * p).sum(), x)

    target = torch.rand((5, 5), generator=gen, dtype=torch.float64)
    pred = (target + rand((5, 5)) * 0.1).clamp(0.05, 0.95)
    errors["jaccard"] = _numeric_vs_analytic(lambda t: smooth_jaccard(t, target).value, pred)
    errors["mse"] = _numeric_vs_analytic(lambda t: mse(t, target).value, pred)

    mask = rand((5, 5)) > 0
    emb_target = torch.rand((6, 5, 5), generator=gen, dtype=torch.float64)
    emb_pred = emb_target + rand((6, 5, 5)) * 0.2
    errors["huber"] = _numeric_vs_analytic(
        lambda t: masked_smooth_l1(t, emb_target, mask).value, emb_pred)

    block_ok = all(errors[k] <= 1e-3 for k in ("msb", "msdu", "dtb", "utb"))
    loss_ok = all(errors[k] <= 1e-4 for k in ("jaccard", "mse", "huber"))
    worst = max(errors.values())
    _verdict(3, "finite-difference gradients", capsys,
             block_ok and loss_ok, f"worst rel err {worst:.1e}")


# -- 4: schedule reproduction --------------------------------------------------


def test_schedule_reproduction(capsys):
    sched = SWASchedule(alpha1=0.01, alpha2=0.0001, cycle=20, total_epochs=100)
    lr_ok = (cyclic_lr(1, sched) == 0.009505
             and cyclic_lr(20, sched) == 0.0001
             and cyclic_lr(21, sched) == 0.009505)

    from spanet.checkpoint import ModelWeights
    from spanet.networks import NetworkConfig, SpaNet
    cfg = NetworkConfig(in_channels=3, out_channels=1, head="dual", levels=2,
                        stem_channels=4, growth_rate=4, repetitions=(1, 1, 1))
    snaps = []
    for seed in range(5):
        torch.manual_seed(seed)
        snaps.append(ModelWeights.from_model(SpaNet(cfg)))
    avg = swa_average(snaps)
    worst = 0.0
    for name, first in snaps[0].params.items():
        acc = np.zeros(first.shape, dtype=np.float64)
        for snap in snaps:
            acc += snap.params[name]
        brute = (acc / len(snaps)).astype(first.dtype)
        worst = max(worst, float(np.abs(avg.params[name].astype(np.float64) - brute).max()))
    _verdict(4, "cyclic lr and weight averaging", capsys,
             lr_ok and worst <= 1e-12, f"avg worst diff {worst:.1e}")


# -- 5: post-processing oracle --------------------------------------------------


def _brute_ncut_bipartition(points):
    """Exhaustive minimum normalized cut over all bipartitions; the last
    point is pinned to one side to kill the label symmetry."""
    affinity = rbf_affinity(points, None)
    n = len(points)
    degree = affinity.sum(axis=1)
    best, best_mask = math.inf, None
    for bits in range(1, 2 ** (n - 1)):
        mask = ((bits >> np.arange(n)) & 1).astype(bool)
        cut = affinity[mask][:, ~mask].sum()
        value = cut / degree[mask].sum() + cut / degree[~mask].sum()
        if value < best:
            best, best_mask = value, mask
    return best_mask


def _as_sides(mask):
    return {frozenset(np.nonzero(mask)[0].tolist()),
            frozenset(np.nonzero(~mask)[0].tolist())}


def test_postprocessing_oracle(capsys):
    scores = []
    for seed in range(100):
        sample = generate_synthetic(SynthConfig(seed=seed))
        seg = binary_mask(sample.instances).astype(np.float32)
        det = detection_gt(sample.instances)
        emb = positional_gt(sample.instances).grid
        pred = instance_segment(seg, det, emb, PostprocParams())
        scores.append(aji(sample.instances, pred))
    mean_aji = float(np.mean(scores))

    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(30):
        n = int(rng.integers(4, 13))
        n1 = int(rng.integers(1, n))
        center = rng.normal(0, 1, 6)
        points = np.concatenate([
            center + rng.normal(0, 0.3, (n1, 6)),
            center + 4.0 + rng.normal(0, 0.3, (n - n1, 6)),
        ])[rng.permutation(n)]
        want = _as_sides(_brute_ncut_bipartition(points))
        labels = spectral_cluster(points, 2, seed=0)
        got = _as_sides(labels == labels[0])
        mismatches += want != got

    ok = mean_aji >= 0.99 and mismatches == 0
    _verdict(5, "ideal-map reconstruction and normalized cut", capsys, ok,
             f"mean aji {mean_aji:.4f}, ncut mismatches {mismatches}/30")


# -- 6: metric oracle ------------------------------------------------------------


def _pixel_sets(label_map):
    out = {}
    for v in np.unique(label_map):
        if v > 0:
            ys, xs = np.nonzero(label_map == v)
            out[int(v)] = set(zip(ys.tolist(), xs.tolist()))
    return out


def _brute_aji(gt, pred):
    gsets, psets = _pixel_sets(gt), _pixel_sets(pred)
    if not gsets and not psets:
        return 1.0
    c = u = 0
    used = set()
    for g in sorted(gsets):
        best_j, best_p = 0.0, None
        for p in sorted(psets):
            inter = len(gsets[g] & psets[p])
            if inter == 0:
                continue
            j = inter / len(gsets[g] | psets[p])
            if j > best_j:  # ties keep the lowest prediction id
                best_j, best_p = j, p
        if best_p is None:
            u += len(gsets[g])
        else:
            c += len(gsets[g] & psets[best_p])
            u += len(gsets[g] | psets[best_p])
            used.add(best_p)
    for p in psets:
        if p not in used:
            u += len(psets[p])
    return c / u


def _brute_f1(gt, pred, thr=0.5):
    gsets, psets = _pixel_sets(gt), _pixel_sets(pred)
    if not gsets and not psets:
        return 1.0, 1.0, 1.0
    candidates = []
    for g in sorted(gsets):
        for p in sorted(psets):
            iou = len(gsets[g] & psets[p]) / len(gsets[g] | psets[p])
            if iou > thr:
                candidates.append((-iou, g, p))
    candidates.sort()
    g_used, p_used = set(), set()
    tp = 0
    for _, g, p in candidates:
        if g not in g_used and p not in p_used:
            g_used.add(g)
            p_used.add(p)
            tp += 1
    fp, fn = len(psets) - tp, len(gsets) - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    precision = tp / len(psets) if psets else 0.0
    recall = tp / len(gsets) if gsets else 0.0
    return f1, precision, recall


def test_metric_oracle(capsys):
    cases = 0
    exact = True
    for seed in range(60):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 4, (6, 6))
        pred = rng.integers(0, 4, (6, 6))
        zeros = np.zeros_like(gt)
        for g, p in ((gt, pred), (gt, gt), (gt, zeros), (zeros, pred)):
            exact &= aji(g, p) == _brute_aji(g, p)
            exact &= f1_instances(g, p) == _brute_f1(g, p)
            cases += 1
    _verdict(6, "aji and f1 vs brute force", capsys,
             exact and cases >= 200, f"{cases} cases")


# -- 7 and 9: end-to-end overfit, bitwise determinism -----------------------------


def _cli(*args):
    cmd = [sys.executable, "-m", "spanet.cli"] + [str(a) for a in args]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise AssertionError(
            f"{' '.join(cmd)} exited {proc.returncode}\n{proc.stdout}\n{proc.stderr}")


def _run_pipeline(root: Path):
    cfg = root / "config.json"
    cfg.write_text(json.dumps(FROZEN_E2E))
    ds, seg, inst = root / "ds", root / "segdet", root / "instance"
    _cli("synth", "--config", cfg, "--out", ds)
    _cli("train", ds / "train", "--stage", "segdet", "--config", cfg, "--out", seg)
    _cli("train", ds / "train", "--stage", "instance",
         "--segdet-ckpt", seg / "swa.ckpt", "--config", cfg, "--out", inst)
    for split in ("train", "test"):
        pred = root / f"pred_{split}"
        _cli("infer", ds / split / "images",
             "--segdet-ckpt", seg / "swa.ckpt",
             "--instance-ckpt", inst / "swa.ckpt",
             "--config", cfg, "--out", pred)
        _cli("eval", pred / "instances", ds / split / "masks",
             "--out", root / f"metrics_{split}.txt")
    return root


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    return [
        _run_pipeline(tmp_path_factory.mktemp(f"e2e_run{i}")) for i in (1, 2)
    ]


def _aggregate(report_path: Path):
    match = re.search(
        r"^aggregate aji ([\d.]+) f1 ([\d.]+)", report_path.read_text(), re.M)
    assert match, f"no aggregate line in {report_path}"
    return float(match.group(1)), float(match.group(2))


def test_end_to_end_overfit(pipeline_runs, capsys):
    run = pipeline_runs[0]
    train_aji, train_f1 = _aggregate(run / "metrics_train.txt")
    test_aji, _ = _aggregate(run / "metrics_test.txt")
    ok = (train_aji >= THRESH_TRAIN_AJI
          and train_f1 >= THRESH_TRAIN_F1
          and test_aji >= THRESH_TEST_AJI)
    _verdict(7, "end-to-end overfit", capsys, ok,
             f"train aji {train_aji:.2f} f1 {train_f1:.2f}, test aji {test_aji:.2f}")


# -- 8: parameter budget -----------------------------------------------------------


def test_parameter_budget(capsys):
    assert main(["params"]) == 0
    out = capsys.readouterr().out
    match = re.search(r"^segdet \(dual head, 3 in\): (\d+)$", out, re.M)
    assert match, f"unexpected params output: {out!r}"
    count = int(match.group(1))
    _verdict(8, "default parameter count", capsys,
             15_000_000 <= count <= 25_000_000, f"{count:,} parameters")


# -- 9 ------------------------------------------------------------------------------


def test_repeat_run_is_bitwise_identical(pipeline_runs, capsys):
    a, b = pipeline_runs
    compared, identical = 0, True
    targets = ["segdet/*.ckpt", "instance/*.ckpt",
               "pred_train/instances/*.png", "pred_test/instances/*.png",
               "metrics_train.txt", "metrics_test.txt"]
    for pattern in targets:
        files_a = sorted(a.glob(pattern))
        files_b = sorted(b.glob(pattern))
        assert files_a and [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            identical &= fa.read_bytes() == fb.read_bytes()
            compared += 1
    _verdict(9, "bitwise reproducibility", capsys, identical,
             f"{compared} artifacts compared")
