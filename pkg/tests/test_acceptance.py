"""End-to-end acceptance criteria.

Each test is one criterion; `pytest -v` therefore prints one pass/fail
line per criterion. Criterion 1 trains the full 5-fold x 3-repeat grid
on 20 synthetic phantoms (CPU-sized configuration) and is reused by
criteria 2 and 8; everything else is fast.

Set AORTASEG_ACCEPTANCE_DIR to a stable path to reuse checkpoints
across runs (training resumes from existing checkpoints).
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from aortaseg.augment import AugmentConfig
from aortaseg.infer import InferConfig, sliding_window_predict, two_stage_predict
from aortaseg.losses import LossConfig, dice_loss, focal_loss, total_loss
from aortaseg.mesh import load_stl, marching_cubes, mesh_stats, save_mesh
from aortaseg.metrics import dice_score, hd95
from aortaseg.normalize import soft_clip
from aortaseg.phantom import PhantomSpec, generate_case, generate_dataset
from aortaseg.segresnet import ArchConfig, build_model, load_checkpoint
from aortaseg.train import TrainConfig, cosine_lr, load_datalist, train_all
from aortaseg.volume import Volume

from conftest import make_image, make_label
from test_infer import StubModel, stub_meta
from test_losses import finite_difference_max_rel, random_pair
from test_mesh import ball_mask
from test_metrics import oracle_hd95

N_TRAIN = 20
N_TEST = 5
DESK_CONFIG = TrainConfig(
    epochs=16,
    folds=5,
    repeats=3,
    effective_batch=1,
    lr0=2e-3,
    seed=7,
    val_every=4,
    target_spacing=(0.7, 0.7, 1.0),
    arch=ArchConfig(init_filters=8, blocks_per_stage=(1, 2, 2), deep_supervision_levels=1),
    augment=AugmentConfig(crop_size=(32, 32, 32)),
)
INFER_CONFIG = InferConfig(roi_size=(64, 64, 64))


def held_out_cases(n=N_TEST, seed=4242):
    rng = np.random.default_rng(seed)
    base = PhantomSpec()
    cases = []
    for _ in range(n):
        spec = replace(
            base,
            bend_amplitude=rng.uniform(0.5, 1.17) * base.bend_amplitude,
            bend_period=rng.uniform(0.75, 1.5) * base.shape[2],
            bend_phase=rng.uniform(0.0, 2.0 * np.pi),
            radius_start=rng.uniform(0.84, 1.16) * base.radius_start,
            radius_end=rng.uniform(0.84, 1.16) * base.radius_end,
        )
        cases.append(generate_case(spec, rng))
    return cases


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Train the full grid once; reused by criteria 1, 2 and 8."""
    root = os.environ.get("AORTASEG_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    data_dir = root / "data"
    if not (data_dir / "dataset.json").is_file():
        generate_dataset(N_TRAIN, data_dir, seed=42)
    datalist = load_datalist(data_dir / "dataset.json")

    t0 = time.time()
    checkpoints = train_all(DESK_CONFIG, datalist, root / "ckpt", dataroot=data_dir)
    train_seconds = time.time() - t0

    tests = held_out_cases()
    results = []
    t0 = time.time()
    for image, label in tests:
        mask, report = two_stage_predict(checkpoints, image, INFER_CONFIG)
        off_mask, off_report = two_stage_predict(
            checkpoints, image.with_data(image.data + 1024.0), INFER_CONFIG
        )
        results.append({
            "label": label,
            "image": image,
            "dice": dice_score(mask, label),
            "hd95": hd95(mask, label),
            "dice_offset": dice_score(off_mask, label),
            "report": report,
            "offset_report": off_report,
        })
    infer_seconds = time.time() - t0
    return {
        "checkpoints": checkpoints,
        "results": results,
        "train_seconds": train_seconds,
        "infer_seconds": infer_seconds,
        "tests": tests,
    }


@pytest.mark.acceptance
@pytest.mark.slow
def test_criterion_01_phantom_end_to_end(experiment):
    """20 phantoms, 5x3 grid, <=100 epochs: mean dice >= 0.90, hd95 <= 3 mm."""
    assert DESK_CONFIG.epochs <= 100
    dices = [r["dice"] for r in experiment["results"]]
    hds = [r["hd95"] for r in experiment["results"]]
    mean_dice = float(np.mean(dices))
    mean_hd = float(np.mean(hds))
    print(
        f"\nACCEPTANCE 1: mean dice {mean_dice:.4f} (>= 0.90), mean hd95 {mean_hd:.3f} mm (<= 3), "
        f"train {experiment['train_seconds']:.0f}s + infer {experiment['infer_seconds']:.0f}s"
    )
    for i, r in enumerate(experiment["results"]):
        print(f"  case {i}: dice={r['dice']:.4f} hd95={r['hd95']:.3f} bounds={r['report']['bounds']}")
    assert mean_dice >= 0.90
    assert mean_hd <= 3.0
    # loss decreases: median over last 10% of epochs < median over first 10%
    for ckpt in experiment["checkpoints"]:
        _, meta = load_checkpoint(ckpt)
        history = meta["loss_history"]
        head = max(1, len(history) // 10)
        assert np.median(history[-head:]) < np.median(history[:head])


@pytest.mark.acceptance
@pytest.mark.slow
def test_criterion_02_intensity_offset_robustness(experiment):
    """+1024 offset changes per-case dice by < 0.01."""
    deltas = [abs(r["dice"] - r["dice_offset"]) for r in experiment["results"]]
    print(f"\nACCEPTANCE 2: max |delta dice| under +1024 offset = {max(deltas):.5f} (< 0.01)")
    assert max(deltas) < 0.01


@pytest.mark.acceptance
def test_criterion_03_gradient_suite():
    """dice/focal/total match central finite differences, rel err < 1e-4."""
    worst = 0.0
    for seed in (101, 202, 303):
        logits, target = random_pair(seed)
        worst = max(worst, finite_difference_max_rel(lambda l: dice_loss(l, target), logits))
        worst = max(worst, finite_difference_max_rel(lambda l: focal_loss(l, target), logits))
        torch.manual_seed(seed)
        ds_out = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64)
        cfg = LossConfig(ds_weights=(1.0, 0.5))
        worst = max(worst, finite_difference_max_rel(
            lambda l: total_loss(l, [ds_out], target, cfg), logits))
    print(f"\nACCEPTANCE 3: max relative gradient error {worst:.2e} (< 1e-4)")
    assert worst < 1e-4


@pytest.mark.acceptance
def test_criterion_04_metric_oracles():
    """hd95 == brute force exactly on 100 random masks; dice counting; spacing linearity."""
    rng = np.random.default_rng(1000)
    spacing = (0.7, 0.7, 1.0)
    checked = 0
    while checked < 100:
        p = (rng.random((6, 6, 6)) < 0.25).astype(np.int16)
        g = (rng.random((6, 6, 6)) < 0.25).astype(np.int16)
        if not p.any() or not g.any():
            continue
        fast = hd95(make_label(p, spacing=spacing), make_label(g, spacing=spacing))
        assert fast == oracle_hd95(p, g, spacing)
        double = hd95(make_label(p, spacing=(1.4, 1.4, 2.0)), make_label(g, spacing=(1.4, 1.4, 2.0)))
        assert double == pytest.approx(2.0 * fast, rel=1e-12)
        checked += 1
    p = np.zeros((5, 5, 5), dtype=np.int16)
    g = np.zeros((5, 5, 5), dtype=np.int16)
    p[0:2, 0:2, 0:2] = 1
    g[1:3, 0:2, 0:2] = 1
    assert dice_score(make_label(p), make_label(g)) == 0.5
    print("\nACCEPTANCE 4: hd95 brute-force equality on 100 masks, dice counting oracle, c=2 linearity")


@pytest.mark.acceptance
@pytest.mark.slow
def test_criterion_05_architecture_arithmetic():
    """Default config on 64^3: logits 2x64^3, DS shapes, bottleneck 512x4^3, widths."""
    cfg = ArchConfig()
    assert [cfg.stage_channels(s) for s in range(5)] == [32, 64, 128, 256, 512]
    model = build_model(cfg, seed=0).eval()
    captured = {}
    hook = model.encoder_stages[-1].register_forward_hook(
        lambda mod, inp, out: captured.update(bottleneck=tuple(out.shape)))
    with torch.no_grad():
        logits, ds = model(torch.randn(1, 1, 64, 64, 64))
    hook.remove()
    assert tuple(logits.shape) == (1, 2, 64, 64, 64)
    assert [tuple(d.shape) for d in ds] == [(1, 2, 32, 32, 32), (1, 2, 16, 16, 16), (1, 2, 8, 8, 8)]
    assert captured["bottleneck"] == (1, 512, 4, 4, 4)
    print("\nACCEPTANCE 5: architecture arithmetic (widths, DS shapes, bottleneck) verified")


@pytest.mark.acceptance
def test_criterion_06_schedule_endpoints():
    """cosine_lr: exactly 2e-4 at 0, exactly 0 at T, 1e-4 +- 1e-12 at T/2."""
    assert cosine_lr(0, 1000, 2e-4) == 2e-4
    assert cosine_lr(1000, 1000, 2e-4) == 0.0
    assert abs(cosine_lr(500, 1000, 2e-4) - 1e-4) < 1e-12
    print("\nACCEPTANCE 6: cosine schedule endpoints and midpoint exact")


@pytest.mark.acceptance
def test_criterion_07_soft_clip_properties():
    """Symmetry to 1e-12 on 1000 points; k=100 within 0.01 of clamp; monotone."""
    grid = np.linspace(-2.0, 3.0, 1000)
    assert np.abs(soft_clip(grid, 10.0) + soft_clip(1.0 - grid, 10.0) - 1.0).max() < 1e-12
    assert np.abs(soft_clip(grid, 100.0) - np.clip(grid, 0.0, 1.0)).max() < 0.01
    rng = np.random.default_rng(11)
    for _ in range(200):
        x1, x2 = sorted(rng.uniform(-3.0, 4.0, 2))
        if x1 == x2:
            continue
        assert soft_clip(x1, 10.0) < soft_clip(x2, 10.0)
    print("\nACCEPTANCE 7: soft-clip symmetry, clamp convergence, strict monotonicity")


@pytest.mark.acceptance
@pytest.mark.slow
def test_criterion_08_ensemble_bookkeeping(experiment):
    """Exactly 15 checkpoints; 5 + 10 split; bitwise-deterministic inference."""
    checkpoints = experiment["checkpoints"]
    assert len(checkpoints) == 15
    metas = [load_checkpoint(p)[1] for p in checkpoints]
    stage1 = [m for m in metas if m["repeat"] == 0]
    stage2 = [m for m in metas if m["repeat"] != 0]
    assert len(stage1) == 5 and sorted(m["fold"] for m in stage1) == [0, 1, 2, 3, 4]
    assert len(stage2) == 10
    assert all(m["normalization_mode"] == "zscore" for m in stage1)
    assert all(m["normalization_mode"] == "percentile_softclip" for m in stage2)

    image, _ = experiment["tests"][0]
    a, _ = two_stage_predict(checkpoints, image, INFER_CONFIG)
    b, _ = two_stage_predict(checkpoints, image, INFER_CONFIG)
    assert np.array_equal(a.data, b.data)
    print("\nACCEPTANCE 8: 15 checkpoints, 5+10 partition, bitwise-deterministic inference")


@pytest.mark.acceptance
def test_criterion_09_mesh(tmp_path):
    """Sphere r=10: watertight, Euler 2, volume within 5%; STL bitwise round trip."""
    mesh = marching_cubes(make_label(ball_mask(10.0, 24)))
    stats = mesh_stats(mesh)
    analytic = 4.0 / 3.0 * math.pi * 1000.0
    assert stats["watertight"]
    assert stats["euler"] == 2
    assert abs(stats["volume"] - analytic) / analytic < 0.05
    first = tmp_path / "sphere.stl"
    save_mesh(mesh, first)
    second = tmp_path / "sphere2.stl"
    save_mesh(load_stl(first), second)
    assert first.read_bytes() == second.read_bytes()
    print(f"\nACCEPTANCE 9: sphere mesh volume {stats['volume']:.1f} vs {analytic:.1f}, STL bitwise")


@pytest.mark.acceptance
def test_criterion_10_sliding_window_reduction():
    """One-window equals forward+softmax to 1e-6; accumulation oracle on 8^3/4^3."""
    cfg = ArchConfig(init_filters=4, blocks_per_stage=(1, 1), deep_supervision_levels=0)
    model = build_model(cfg, seed=0).eval()
    img = make_image(np.random.default_rng(0).normal(size=(16, 16, 16)))
    pm = sliding_window_predict(model, img, InferConfig(roi_size=(16, 16, 16), overlap=0.0))
    with torch.no_grad():
        direct = torch.softmax(model(torch.from_numpy(img.data[None, None]))[0], 1)[0].numpy()
    assert np.abs(pm.data - direct).max() < 1e-6

    rng = np.random.default_rng(5)
    data = rng.normal(size=(8, 8, 8)).astype(np.float32)
    stub = StubModel(gain=1.7, bias=0.2)
    pm = sliding_window_predict(stub, make_image(data), InferConfig(roi_size=(4, 4, 4), overlap=0.25))
    roi, overlap = 4, 0.25
    sigma = roi / 8.0
    ax = np.arange(roi) - (roi - 1) / 2.0
    k1 = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = (k1[:, None, None] * k1[None, :, None] * k1[None, None, :])
    kernel /= kernel.max()
    stride = max(1, int(round(roi * (1 - overlap))))
    starts = list(range(0, 8 - roi + 1, stride))
    if starts[-1] != 8 - roi:
        starts.append(8 - roi)
    acc = np.zeros((2, 8, 8, 8))
    wsum = np.zeros((8, 8, 8))
    for sx in starts:
        for sy in starts:
            for sz in starts:
                win = data[sx:sx + roi, sy:sy + roi, sz:sz + roi].astype(np.float64)
                p1 = 1.0 / (1.0 + np.exp(-(1.7 * (win + 0.2))))
                probs = np.stack([1.0 - p1, p1])
                acc[:, sx:sx + roi, sy:sy + roi, sz:sz + roi] += probs * kernel[None]
                wsum[sx:sx + roi, sy:sy + roi, sz:sz + roi] += kernel
    expected = acc / wsum[None]
    expected /= expected.sum(0, keepdims=True)
    assert np.abs(pm.data - expected).max() < 1e-5
    print("\nACCEPTANCE 10: one-window reduction and accumulation oracle verified")
