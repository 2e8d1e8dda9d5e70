"""Acceptance suite: one test per criterion, one printed line per criterion.

Every tolerance is pinned here. The overfit run (criterion 4) is a real
end-to-end CPU training loop and dominates the runtime; everything is
seeded, so results are reproducible in a fixed environment. Criterion 7
needs real benchmark data and skips itself when IFBLEND_AMBIENT6K_ROOT is
not set.
"""

import csv
import math
import os
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from ifblend.blocks import BlockConfig, GlobalContextBlock, LowFreqBlock
from ifblend.data import SyntheticSceneSpec, generate_synthetic, read_dataset
from ifblend.engine import TrainConfig, evaluate, infer_tiled, tile_plan, train
from ifblend.freqkernels import haar_dwt, haar_idwt, srgb_to_lab
from ifblend.losses_metrics import LossConfig, lab_region_error, loss_terms, psnr, ssim
from ifblend.model import IFBlend, ModelConfig, load_checkpoint

from test_freqkernels import GRAY_L_TABLE, haar2d_oracle


def report(number, name, ok):
    print(f"\nACCEPTANCE {number} ({name}): {'PASS' if ok else 'FAIL'}")
    assert ok, f"acceptance criterion {number} ({name}) failed"


def test_criterion_1_wavelet_oracle_suite():
    start = time.monotonic()
    rng = np.random.default_rng(11)
    ok = True
    for _ in range(100):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(2, 65)) * 2
        w = int(rng.integers(2, 65)) * 2
        x = torch.from_numpy(rng.standard_normal((1, c, h, w))).float()
        bands = haar_dwt(x)
        rec = haar_idwt(bands)
        ok &= (rec - x).abs().max().item() < 1e-5
        e_in = (x.double() ** 2).sum().item()
        e_out = (bands.ll.double() ** 2).sum().item() + (bands.high.double() ** 2).sum().item()
        ok &= abs(e_out - e_in) / e_in < 1e-4

    block = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    bands = haar_dwt(block.view(1, 1, 2, 2))
    expected = haar2d_oracle(block.numpy())
    got = (bands.ll.item(), *bands.high.flatten().tolist())  # (LL, LH, HL, HH)
    ok &= abs(got[0] - 5.0) < 1e-6 and abs(got[2] - (-1.0)) < 1e-6
    ok &= abs(got[1] - (-2.0)) < 1e-6 and abs(got[3] - 0.0) < 1e-6
    for channel, value in zip(expected, (got[0], got[1], got[2], got[3])):
        ok &= abs(float(channel[0, 0]) - value) < 1e-10

    elapsed = time.monotonic() - start
    ok &= elapsed < 10.0
    report(1, f"wavelet oracle suite, {elapsed:.1f}s", ok)


def test_criterion_2_metric_oracle_suite():
    start = time.monotonic()
    rng = np.random.default_rng(12)
    ok = True

    a = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    b = torch.full((1, 3, 8, 8), 0.1, dtype=torch.float64)
    ok &= abs(psnr(a, b) - 20.0) < 1e-9

    x = torch.from_numpy(rng.uniform(0, 1, (1, 3, 16, 16)))
    y = torch.from_numpy(rng.uniform(0, 1, (1, 3, 16, 16)))
    ok &= abs(ssim(x, x).item() - 1.0) < 1e-6
    ok &= abs(ssim(x, y).item() - ssim(y, x).item()) < 1e-9

    white = srgb_to_lab(torch.ones(1, 3, 1, 1, dtype=torch.float64))
    black = srgb_to_lab(torch.zeros(1, 3, 1, 1, dtype=torch.float64))
    ok &= abs(white[0, 0].item() - 100.0) < 1e-4 and black.abs().max().item() < 1e-6
    for g, l_ref in GRAY_L_TABLE.items():
        lab = srgb_to_lab(torch.full((1, 3, 1, 1), float(g), dtype=torch.float64))
        ok &= abs(lab[0, 0, 0, 0].item() - l_ref) < 0.05

    pred = torch.from_numpy(rng.uniform(0, 1, (1, 3, 8, 8)))
    gt = torch.from_numpy(rng.uniform(0, 1, (1, 3, 8, 8)))
    mask = (torch.from_numpy(rng.uniform(0, 1, (1, 1, 8, 8))) > 0.5).double()
    row = lab_region_error(pred, gt, mask)
    n_s = mask.sum().item()
    n_f = mask.numel() - n_s
    combined = (n_s * row.shadow + n_f * row.shadow_free) / (n_s + n_f)
    ok &= abs(row.total - combined) < 1e-6

    elapsed = time.monotonic() - start
    ok &= elapsed < 10.0
    report(2, f"metric oracle suite, {elapsed:.1f}s", ok)


def test_criterion_3_model_contract_suite():
    start = time.monotonic()
    torch.manual_seed(0)
    model = IFBlend(ModelConfig()).eval()
    ok = True

    out = model(torch.rand(1, 3, 50, 70))
    ok &= out.shape == (1, 3, 50, 70)
    out = model(torch.rand(1, 3, 64, 64))
    ok &= out.shape == (1, 3, 64, 64)

    nn.init.zeros_(model.head.weight)
    nn.init.zeros_(model.head.bias)
    x = torch.rand(1, 3, 50, 70)
    with torch.no_grad():
        ok &= torch.equal(model(x), x)

    # documented reductions at zeroed projections
    for unit in model.gcb.units:
        nn.init.zeros_(unit.project.weight)
        nn.init.zeros_(unit.project.bias)
    feats = torch.rand(1, model.gcb.units[0].dwconv.in_channels, 4, 4)
    ok &= torch.equal(model.gcb(feats), feats)
    wasam = model.decoder[-1].wasam
    nn.init.zeros_(wasam.proj_img.weight)
    nn.init.zeros_(wasam.proj_img.bias)
    nn.init.zeros_(wasam.proj_freq.weight)
    nn.init.zeros_(wasam.proj_freq.bias)
    h = torch.rand(1, wasam.q.in_channels, 8, 8)
    f = torch.rand(1, wasam.k.in_channels, 8, 8)
    h_e, f_e, _ = wasam(h, f)
    ok &= torch.equal(h_e, h) and torch.equal(f_e, f)

    torch.manual_seed(1)
    model = IFBlend(ModelConfig()).eval()
    target = torch.rand(2, 3, 64, 64)
    (model(torch.rand(2, 3, 64, 64)) - target).abs().mean().backward()
    total = nonzero = 0
    for p in model.parameters():
        ok &= p.grad is not None
        total += p.numel()
        nonzero += (p.grad != 0).sum().item()
    ok &= nonzero / total > 0.99

    # finite differences on the two conv blocks, double precision, 4x4 inputs
    def fd_ok(module, x0):
        x0 = x0.double()
        module = module.double().eval()
        xv = x0.clone().requires_grad_(True)
        module(xv).pow(2).sum().backward()
        grad = xv.grad.flatten()
        flat = x0.flatten()
        eps = 1e-6
        for k in range(0, flat.numel(), 7):
            xp, xm = flat.clone(), flat.clone()
            xp[k] += eps
            xm[k] -= eps
            num = (module(xp.view_as(x0)).pow(2).sum()
                   - module(xm.view_as(x0)).pow(2).sum()).item() / (2 * eps)
            denom = max(abs(grad[k].item()), 1e-3)
            if abs(grad[k].item() - num) / denom >= 1e-3:
                return False
        return True

    torch.manual_seed(2)
    ok &= fd_ok(LowFreqBlock(BlockConfig(2, 3, dropout_rate=0.0)), torch.rand(1, 2, 4, 4))
    ok &= fd_ok(GlobalContextBlock(2, depth=1), torch.rand(1, 2, 4, 4))

    elapsed = time.monotonic() - start
    ok &= elapsed < 120.0
    report(3, f"model contract suite, {elapsed:.1f}s", ok)


def overfit_fixture():
    return [generate_synthetic(SyntheticSceneSpec(seed=100 + i, size=(64, 64)))
            for i in range(8)]


def test_criterion_4_overfit_and_ablations(tmp_path):
    start = time.monotonic()
    pairs = overfit_fixture()
    loss_cfg = LossConfig()
    ok = True

    res = train(
        ModelConfig(), loss_cfg,
        TrainConfig(epochs=10_000, batch_size=4, patch_size=64, lr=1e-3,
                    lr_schedule="cosine", seed=0, checkpoint_every=500,
                    validate_every=50, max_steps=2000,
                    early_stop_psnr=30.0, early_stop_loss=0.0095),
        pairs, out_dir=tmp_path / "overfit",
    )
    ok &= res.steps_run <= 2000
    model, _ = load_checkpoint(res.best_checkpoint)
    model.eval()
    psnrs, losses = [], []
    with torch.no_grad():
        for s in pairs:
            pred = model(s.input.unsqueeze(0))
            psnrs.append(psnr(pred, s.gt.unsqueeze(0)))
            losses.append(loss_terms(pred, s.gt.unsqueeze(0), loss_cfg)[0].item())
    train_psnr = float(np.mean(psnrs))
    train_loss = float(np.mean(losses))
    ok &= train_psnr >= 30.0
    ok &= train_loss < 0.01

    default_params = IFBlend(ModelConfig()).parameter_count()
    variants = {
        "no_dwt": (ModelConfig(use_dwt_feats=False), loss_cfg),
        "no_rgb_split": (ModelConfig(use_rgb_split=False), loss_cfg),
        "no_ssim_loss": (ModelConfig(), LossConfig(lambda_ssim=0.0)),
    }
    reductions = {}
    for name, (mcfg, lcfg) in variants.items():
        variant = train(
            mcfg, lcfg,
            TrainConfig(epochs=10_000, batch_size=4, patch_size=64, lr=1e-3,
                        lr_schedule="cosine", seed=0, checkpoint_every=200,
                        validate_every=200, max_steps=200),
            pairs, out_dir=tmp_path / name,
        )
        losses = [float(r["loss"]) for r in csv.DictReader(open(variant.metrics_csv))]
        reductions[name] = 1.0 - np.mean(losses[-20:]) / np.mean(losses[:20])
        ok &= reductions[name] >= 0.5
        params = IFBlend(mcfg).parameter_count()
        if name == "no_dwt":
            ok &= params < default_params
        else:
            ok &= params == default_params

    elapsed = time.monotonic() - start
    ok &= elapsed < 900.0
    report(
        4,
        f"overfit {res.steps_run} steps PSNR {train_psnr:.1f} loss {train_loss:.4f}, "
        f"ablation reductions " +
        " ".join(f"{k}={v:.0%}" for k, v in reductions.items()) +
        f", {elapsed:.0f}s",
        ok,
    )


def test_criterion_5_pipeline_determinism(tmp_path):
    pairs = overfit_fixture()
    cfg = TrainConfig(epochs=10_000, batch_size=2, patch_size=32, lr=2e-4,
                      lr_schedule="cosine", seed=3, checkpoint_every=50,
                      validate_every=50, max_steps=50)
    runs = []
    for tag in ("a", "b"):
        runs.append(train(ModelConfig(), LossConfig(), cfg, pairs,
                          out_dir=tmp_path / tag))
    ok = True
    rows = [list(csv.DictReader(open(r.metrics_csv))) for r in runs]
    ok &= rows[0][49]["loss"] == rows[1][49]["loss"]
    ok &= runs[0].last_checkpoint.read_bytes() == runs[1].last_checkpoint.read_bytes()
    ok &= runs[0].best_checkpoint.read_bytes() == runs[1].best_checkpoint.read_bytes()

    model, _ = load_checkpoint(runs[0].best_checkpoint)
    model.eval()
    x = pairs[0].input.unsqueeze(0)
    with torch.no_grad():
        before = model(x)
    from ifblend.model import save_checkpoint

    save_checkpoint(model, tmp_path / "roundtrip.ckpt")
    reloaded, _ = load_checkpoint(tmp_path / "roundtrip.ckpt")
    reloaded.eval()
    with torch.no_grad():
        after = reloaded(x)
    ok &= torch.equal(before, after)
    report(5, "pipeline determinism", ok)


def test_criterion_6_tiled_inference(tmp_path):
    ok = True
    plan, weight_sum = tile_plan(128, 128, 64, 24)
    assembled = np.zeros((128, 128))
    for y, x, weight in plan:
        assembled[y : y + 64, x : x + 64] += weight / weight_sum[y : y + 64, x : x + 64]
    ok &= np.abs(assembled - 1.0).max() < 1e-6

    torch.manual_seed(0)
    fallback_model = IFBlend(ModelConfig()).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        direct = fallback_model(x)
    ok &= torch.equal(direct, infer_tiled(fallback_model, x, tile=64, overlap=8))

    # toy with a receptive field inside the feather band: 1 stage, 1 expert
    # (deeper or routing-adaptive variants are context coupled by design and
    # measurably exceed the bound; see the engine tests for that behavior)
    scenes = [generate_synthetic(SyntheticSceneSpec(seed=300 + i, size=(128, 128)))
              for i in range(8)]
    toy_cfg = ModelConfig(stages=1, base_channels=8, channel_cap=16,
                          window_size=4, gcb_depth=1, num_experts=1)
    res = train(
        toy_cfg, LossConfig(),
        TrainConfig(epochs=10_000, batch_size=4, patch_size=64, lr=1e-3,
                    lr_schedule="cosine", seed=0, checkpoint_every=500,
                    validate_every=200, max_steps=800),
        scenes, out_dir=tmp_path / "toy",
    )
    toy, _ = load_checkpoint(res.best_checkpoint)
    toy.eval()
    worst = 0.0
    for scene in scenes:
        x = scene.input.unsqueeze(0)
        with torch.no_grad():
            whole = toy(x)
        tiled = infer_tiled(toy, x, tile=64, overlap=24)
        worst = max(worst, (whole - tiled).abs().max().item())
    ok &= worst < 0.02
    report(6, f"tiled inference, trained-toy discrepancy {worst:.4f}", ok)


def test_criterion_7_ambient6k_identity_row():
    root = os.environ.get("IFBLEND_AMBIENT6K_ROOT")
    if not root:
        print("\nACCEPTANCE 7 (real-data identity row): SKIPPED, "
              "IFBLEND_AMBIENT6K_ROOT not set")
        pytest.skip("real benchmark data not available")
    dataset = read_dataset(root, "ambient6k", "test")
    report_obj = evaluate("identity", dataset, protocol="rgb")
    agg = report_obj.aggregates
    ok = abs(agg["psnr"] - 13.592) <= 0.05 and abs(agg["ssim"] - 0.658) <= 0.005
    report(7, f"identity row PSNR {agg['psnr']:.3f} SSIM {agg['ssim']:.3f}", ok)
