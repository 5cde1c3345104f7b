"""Desk-scale acceptance criteria.

Each test records one PASS/FAIL line, printed in the "acceptance criteria"
section of the pytest terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from drvnet.cli import cli
from drvnet.data import DatasetName, RetinalSample, crop_to_original, zero_pad
from drvnet.evaluation import binarize, confusion, evaluate_map, gmean, roc_auc
from drvnet.loss import LossWeights, bce_loss, composite_loss, dice_loss, loss_terms
from drvnet.network import ModelConfig, build_backbone, build_model, forward_full
from drvnet.synthetic import synthetic_pair
from drvnet.training import Phase, TrainOptions, TrainSchedule, backbone_checksum, train_phase1, train_phase2
from oracles import central_difference, mann_whitney_auc, pixel_loop_confusion, relative_error, settle_batchnorm

pytestmark = pytest.mark.acceptance


def sample(size, seed, ident="p0"):
    img, ann = synthetic_pair((size, size), seed)
    return RetinalSample(img, ann, ident, DatasetName.DRIVE, (size, size))


def test_01_shape_and_range(acceptance):
    model = build_model(ModelConfig()).eval()
    t0 = time.perf_counter()
    ok = True
    with torch.no_grad():
        for size in (64, 592):
            x = torch.rand(1, 3, size, size)
            b, f = forward_full(model, x)
            ok &= b.shape == f.shape == (1, 1, size, size)
            ok &= bool(((f >= 0) & (f <= 1)).all() and ((b >= 0) & (b <= 1)).all())
    seconds = time.perf_counter() - t0
    passed = acceptance(1, "shape/range suite", ok and seconds < 60, f"64^2 and 592^2 forward in {seconds:.1f} s")
    assert passed


def test_02_gradient_suite(acceptance):
    g = torch.Generator().manual_seed(0)
    model = build_model(ModelConfig(base_channels=4), g).double()
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) > 0.7).double()
    settle_batchnorm(model, x)
    x.requires_grad_(True)

    def objective():
        with torch.no_grad():
            return composite_loss(model(x)[1], y)

    composite_loss(model(x)[1], y).backward()
    probes = {
        "input": x,
        "backbone first conv": model.backbone.level0.rdn.dense[2].weight,
        "backbone latent gate": model.backbone.level3.rse.gate.fc1.weight,
        "backbone up-conv": model.backbone.level6.up.weight,
        "tail stage1 conv": model.tail.stage1.rdn.residual[1][0].weight,
        "tail output": model.tail.out.conv.weight,
    }
    errors = {}
    for name, t in probes.items():
        idx = torch.randperm(t.numel(), generator=g)[:16].tolist()
        errors[name] = relative_error(t.grad.view(-1)[idx].numpy(), central_difference(objective, t, idx))
    worst = max(errors.values())
    passed = acceptance(2, "gradient suite", worst < 1e-4, f"max rel. err {worst:.2e} over {len(errors)} tensors")
    assert passed, errors


def test_03_loss_oracles(acceptance):
    t = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    p, y = t(0.9, 0.2), t(1, 0)
    bce_hand = (-math.log(0.9) - math.log(0.8)) / 2
    dice_hand = 1 - (2 * 0.9 + 1) / (1.1 + 1 + 1)
    checks = [
        abs(bce_loss(p, y).item() - bce_hand) < 1e-6,
        abs(bce_hand - 0.1643) < 1e-4,
        abs(bce_loss(torch.full((10,), 0.5, dtype=torch.float64), (torch.arange(10) % 2).double()).item()
            - math.log(2)) < 1e-6,
        abs(dice_loss(t(1, 1, 0, 0), t(1, 0, 0, 0), 0.0).item() - 1 / 3) < 1e-6,
        dice_loss(y.clone(), y).item() == 0.0,
        abs(composite_loss(p, y).item() - (bce_hand + 0.5 * dice_hand)) < 1e-6,
    ]
    x, z = torch.rand(2, 1, 8, 8), (torch.rand(2, 1, 8, 8) > 0.5).float()
    total, b, d = loss_terms(x, z, LossWeights(1.0, 0.5))
    checks.append(total.item() == (1.0 * b + 0.5 * d).item())
    passed = acceptance(3, "loss oracles", all(checks), f"{sum(checks)}/{len(checks)} checks")
    assert passed


def test_04_metric_oracles(acceptance):
    rng = np.random.default_rng(2024)
    exact = 0
    for _ in range(100):
        prob, truth = rng.random((32, 32)), rng.random((32, 32)) > 0.8
        pred = binarize(prob, 0.5)
        tp, tn, fp, fn = pixel_loop_confusion(pred, truth)
        m = evaluate_map(prob, truth)
        ok = (m.counts.tp, m.counts.tn, m.counts.fp, m.counts.fn) == (tp, tn, fp, fn)
        ok &= m.se == tp / (tp + fn) and m.sp == tn / (tn + fp) and m.acc == (tp + tn) / 1024
        ok &= confusion(pred, truth) == m.counts
        exact += ok
    auc_exact = 0
    for k in range(100):
        n = int(rng.integers(2, 65))
        truth = rng.random(n) > 0.5
        truth[0], truth[1] = True, False
        scores = rng.integers(0, 8, n) / 8
        auc_exact += roc_auc(scores, truth) == mann_whitney_auc(scores.tolist(), truth.tolist())
    passed = acceptance(4, "metric oracles", exact == 100 and auc_exact == 100,
                        f"confusion/Se/Sp/Acc exact {exact}/100, AUC exact {auc_exact}/100")
    assert passed


def test_05_gmean(acceptance):
    g = gmean(0.8512, 0.9795)
    passed = acceptance(5, "G-mean check", abs(g - 0.9131) < 5e-4 and abs(g - 0.9127) < 1e-3,
                        f"sqrt(0.8512*0.9795) = {g:.4f}, |diff to 0.9127| = {abs(g - 0.9127):.1e}")
    assert passed


@pytest.fixture
def geometries():
    # (height, width) and padded size
    return [((584, 565), 592), ((960, 999), 1008), ((605, 700), 704)]


def test_06_padding_round_trip(acceptance, geometries):
    rng = np.random.default_rng(0)
    ok = True
    for (h, w), size in geometries:
        s = RetinalSample(rng.random((h, w, 3)).astype(np.float32), (rng.random((h, w)) > 0.88).astype(np.uint8),
                          "x", DatasetName.DRIVE, (h, w))
        p = zero_pad(s, size)
        img = crop_to_original(p.image, p.original_size, p.pad_offsets)
        ann = crop_to_original(p.annotation, p.original_size, p.pad_offsets)
        ok &= np.array_equal(img, s.image) and np.array_equal(ann, s.annotation)
        ok &= int(p.annotation.sum()) == int(s.annotation.sum()) == int(ann.sum())
        ok &= p.padded_size == (size, size)
    passed = acceptance(6, "padding round trip", ok, "592^2, 1008^2, 704^2 bitwise; vessel counts conserved")
    assert passed


def test_07_two_phase_freeze(acceptance):
    cfg = ModelConfig(base_channels=4)
    data = [sample(32, k, f"s{k}") for k in range(2)]
    p1 = train_phase1(build_backbone(cfg, torch.Generator().manual_seed(0)), data, [],
                      TrainSchedule(Phase.BACKBONE, total_epochs=2))
    p2 = train_phase2(build_model(cfg, torch.Generator().manual_seed(1)), p1.final, data, [],
                      TrainSchedule(Phase.TAIL, total_epochs=2))
    diffs = [(p2.final.tensors[k].double() - v.double()).abs().max().item() for k, v in p1.final.tensors.items()
             if v.dtype.is_floating_point]
    same = all(torch.equal(p2.final.tensors[k], v) for k, v in p1.final.tensors.items())
    same &= backbone_checksum(p1.final) == backbone_checksum(p2.final)
    passed = acceptance(7, "two-phase freeze", same and max(diffs) == 0,
                        f"{len(p1.final.tensors)} backbone tensors, max |delta| = {max(diffs)}")
    assert passed


def test_08_overfit_smoke(acceptance):
    patch = sample(64, 0)
    model = build_backbone(ModelConfig(base_channels=8), torch.Generator().manual_seed(0))
    # constant learning rate over the 200 steps
    sched = TrainSchedule(Phase.BACKBONE, total_epochs=200, decay_every=1000, batch_size=1)
    t0 = time.perf_counter()
    result = train_phase1(model, [patch], [], sched, options=TrainOptions(augment=False))
    seconds = time.perf_counter() - t0
    losses = np.array([r["loss"] for r in result.history])
    drop = 1 - losses[-1] / losses[0]
    moving = np.convolve(losses, np.ones(20) / 20, mode="valid")
    monotone = bool(np.all(np.diff(moving) <= 0))
    eval_model = result.final.build_model().eval()
    x = torch.from_numpy(patch.image.transpose(2, 0, 1).copy())[None]
    with torch.no_grad():
        pred = binarize(eval_model(x)[1][0, 0].numpy(), 0.5)
    truth = patch.annotation.astype(bool)
    dice = 2 * (pred & truth).sum() / (pred.sum() + truth.sum())
    ok = drop >= 0.9 and dice > 0.9 and seconds < 300
    passed = acceptance(8, "overfit smoke", ok,
                        f"loss {losses[0]:.3f} -> {losses[-1]:.4f} (-{drop:.1%}), Dice {dice:.3f}, "
                        f"20-step moving average non-increasing: {monotone}, {seconds:.1f} s")
    assert passed
    assert monotone


def test_09_schedule_plateaus(acceptance, tmp_path):
    log = tmp_path / "log.jsonl"
    sched = TrainSchedule(Phase.BACKBONE, batch_size=1)
    train_phase1(build_backbone(ModelConfig(base_channels=4)), [sample(16, 0)], [], sched,
                 options=TrainOptions(augment=False, log_path=log, recalibrate_bn=False))
    lrs = [json.loads(line)["lr"] for line in log.read_text().splitlines()]
    starts = [0] + [e for e in range(1, len(lrs)) if lrs[e] != lrs[e - 1]]
    ok = len(lrs) == 150 and starts == [0, 50, 100]
    ok &= [lrs[e] for e in starts] == [1e-3, 1e-3 / 10, 1e-3 / 100]
    ok &= all(lrs[e] == lrs[s] for s in starts for e in range(s, s + 50))
    passed = acceptance(9, "schedule check", ok,
                        f"{len(lrs)} epochs logged, plateaus start at {starts}: {sorted(set(lrs), reverse=True)}")
    assert passed


def test_10_ablation_driver(acceptance, drive_root, tmp_path):
    out = tmp_path / "ablation"
    result = CliRunner().invoke(cli, ["ablate", "--dataset", "drive", "--data-root", str(drive_root),
                                      "--out", str(out), "--seeds", "1", "--epochs", "1", "--base-channels", "4",
                                      "--patch", "32", "--pad-size", "64"], catch_exceptions=False)
    rows = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()]
    by = {r["variant"]: r for r in rows}
    labels = [r["label"] for r in rows]
    checks = {
        "exit 0": result.exit_code == 0,
        "row names": labels == ["Backbone with BC", "Backbone with D", "Backbone with BC&D", "Full Net. with BC&D"],
        "weights": [(r["lambda1"], r["lambda2"]) for r in rows] == [(1.0, 0.0), (0.0, 0.5), (1.0, 0.5), (1.0, 0.5)],
        "tail flags": [r["tail"] for r in rows] == [False, False, False, True],
        "backbone reuse": by["full_bcd"]["backbone_checksum"] == by["bcd"]["backbone_checksum"],
        "distinct backbones": len({by[v]["backbone_checksum"] for v in ("bc", "d", "bcd")}) == 3,
        "no phase-1 retrain": not (out / "full_bcd" / "phase1_best.ckpt").exists(),
        "table": (out / "ablation.csv").read_text().splitlines()[0] == "Method,Sp,Se,Acc,AUC,G-mean",
    }
    failed = [k for k, v in checks.items() if not v]
    passed = acceptance(10, "ablation driver", not failed,
                        "4 rows, lambda mapping, tail flags, backbone checksum reuse" if not failed
                        else f"failed: {failed}")
    assert passed, result.output
