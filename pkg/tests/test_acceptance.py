"""End-to-end acceptance criteria, one marked test (or group) per criterion.

Run with ``pytest tests/test_acceptance.py -v -s``; the terminal summary
prints one PASS/FAIL line per criterion. The two training experiments are
marked ``slow``.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from oracles import bf_aa, bf_f, bf_kappa, bf_oa, bf_recall, bf_wa, expand
from urbanmtl import mtlt
from urbanmtl import train as train_mod
from urbanmtl.cli import main
from urbanmtl.core import DegenerateError, ModelConfig, SampleBatch
from urbanmtl.data import generate_scene, tile_scene
from urbanmtl.infer import aggregate_labels, aggregate_lcz, sliding_window_predict
from urbanmtl.losses import multitask_loss
from urbanmtl.metrics import (
    ConfusionMatrix,
    PenaltyMatrix,
    aa,
    accumulate,
    f_score,
    kappa,
    oa,
    recall,
    weighted_accuracy,
)
from urbanmtl.model import MTLNet, TaskWeightParams, PriorSource, model_forward, parameter_groups
from urbanmtl.train import NesterovAdam, TrainConfig, compute_loss, evaluate_patches, fit, lr_at_epoch


# --- 1. gradient oracle --------------------------------------------------------


@pytest.mark.acceptance(1, "analytic gradients of L_MT match central differences (rel 1e-3, float64)")
def test_gradient_oracle():
    start = time.perf_counter()
    cfg = ModelConfig(bands=2, patch_h=8, patch_w=8, base_features=2, num_classes=3, dropout_rate=0.0)
    model = MTLNet(cfg, seed=0).double()
    rng = np.random.default_rng(0)
    batch = SampleBatch(
        images=rng.random((2, 2, 8, 8)),
        hse_ref=rng.random((2, 4, 4)),
        lcz_ref=rng.integers(0, 3, (2, 8, 8)).astype(np.uint8),
    )
    with torch.no_grad():
        model.task_weights.s_hse.fill_(0.3)
        model.task_weights.s_lcz.fill_(-0.2)

    def objective():
        obj, _ = compute_loss(model, batch, train_mode=True, prior_source=PriorSource.REFERENCE)
        return obj

    model.zero_grad()
    objective().backward()
    h = 1e-6
    checked = {}
    for group, named in parameter_groups(model).items():
        # biases feeding a train-mode batch norm have a structurally zero gradient; sample the rest
        candidates = [(n, p, i) for n, p in named for i in range(p.numel()) if abs(p.grad.view(-1)[i]) > 1e-7]
        pick = rng.choice(len(candidates), size=min(20, len(candidates)), replace=False)
        worst = 0.0
        for k in pick:
            name, p, i = candidates[k]
            flat = p.data.view(-1)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = p.grad.view(-1)[i].item()
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd)))
        checked[group] = (len(pick), worst)
    print(f"\n[gradient oracle] per group (count, worst rel err): {checked}")
    assert checked["task_weights"][0] == 2
    for group in ("shared", "hse_branch", "lcz_branch"):
        assert checked[group][0] >= 20
    assert all(worst < 1e-3 for _, worst in checked.values())
    assert time.perf_counter() - start < 60


# --- 2. uncertainty optimum ------------------------------------------------------


@pytest.mark.acceptance(2, "task weights converge to (log 4, log 6) within 1% in 500 steps")
def test_uncertainty_optimum():
    start = time.perf_counter()
    tw = TaskWeightParams()
    opt = NesterovAdam(tw.parameters(), lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        multitask_loss(4.0, 3.0, tw.s_hse, tw.s_lcz).backward()
        opt.step()
    s_hse, s_lcz = tw.s_hse.item(), tw.s_lcz.item()
    print(f"\n[uncertainty optimum] s = ({s_hse:.6f}, {s_lcz:.6f}) vs ({math.log(4):.6f}, {math.log(6):.6f})")
    assert s_hse == pytest.approx(math.log(4), rel=0.01)
    assert s_lcz == pytest.approx(math.log(6), rel=0.01)
    assert time.perf_counter() - start < 10


# --- 3. loss substitution and fixed weighting ---------------------------------------


@pytest.fixture(scope="module")
def small_patches():
    return tile_scene(generate_scene(4, 64, 64, bands=3, urban_fraction=0.7), 16)


@pytest.mark.acceptance(3, "multitask_loss(2, 3, 0, 0) == 4.0; fixed weighting keeps s == (0, 0)")
def test_substitution_and_fixed_weighting(small_patches):
    assert multitask_loss(2.0, 3.0, 0.0, 0.0) == 4.0
    cfg = ModelConfig(bands=3, patch_h=16, patch_w=16, base_features=4)
    model = MTLNet(cfg)
    res = fit(model, small_patches[:8], small_patches[8:],
              TrainConfig(batch_size=4, max_epochs=4, patience=10, weighting="fixed"))
    assert res.stopped_epoch == 4
    assert all(r["s_hse"] == 0.0 and r["s_lcz"] == 0.0 for r in res.steps + res.history)
    assert model.task_weights.s_hse.item() == 0.0 and model.task_weights.s_lcz.item() == 0.0


# --- 4. metric oracle equivalence -------------------------------------------------------


@pytest.mark.acceptance(4, "metrics equal a brute-force oracle on 1000 matrices; kappa hand case 0.69388")
def test_metric_oracle():
    assert kappa(ConfusionMatrix(2, [[50, 10], [5, 35]])) == pytest.approx(0.69388, abs=1e-5)
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        counts = rng.integers(0, 10, (k, k)) * (rng.random((k, k)) < 0.7)
        if counts.sum() == 0:
            counts[0, 1] = 1
        # dyadic credits keep every partial sum exact, so WA must match bit for bit
        w = rng.integers(0, 9, (k, k)) / 8.0
        np.fill_diagonal(w, 1.0)
        cm, pairs = ConfusionMatrix(k, counts), expand(counts)
        assert oa(cm) == bf_oa(pairs)
        assert weighted_accuracy(cm, PenaltyMatrix(w)) == bf_wa(pairs, w)
        assert abs(aa(cm) - bf_aa(pairs, k)) <= 1e-12
        rows, cols, n = counts.sum(axis=1), counts.sum(axis=0), counts.sum()
        if int(rows @ cols) == n * n:
            with pytest.raises(DegenerateError):
                kappa(cm)
        else:
            assert abs(kappa(cm) - bf_kappa(pairs, k)) <= 1e-12
        for c in range(k):
            assert abs(recall(cm, c) - bf_recall(pairs, c)) <= 1e-12
            assert abs(f_score(cm, c) - bf_f(pairs, c)) <= 1e-12


# --- 5. P2F identity ----------------------------------------------------------------------


@pytest.mark.acceptance(5, "P2F with prior 1 equals the unconditioned head; prior 0 is spatially uniform")
def test_p2f_identity():
    model = MTLNet(ModelConfig(bands=4, patch_h=32, patch_w=32, base_features=4), seed=5).eval()
    with torch.no_grad():
        model.p2f.head.bias.normal_()
        x = torch.rand(3, 4, 32, 32)
        att, _ = model.lcz(model.backbone(x))
        unconditioned = torch.softmax(model.p2f.head(att), dim=1)
        ones = model(x, prior=torch.ones(3, 1, 16, 16)).p2f_head
        zeros = model(x, prior=torch.zeros(3, 1, 16, 16)).p2f_head
    assert torch.equal(ones, unconditioned)
    assert torch.equal(zeros, zeros[:, :, :1, :1].expand_as(zeros))


# --- 6. probability and range invariants ----------------------------------------------------


@pytest.mark.acceptance(6, "100 random forward passes: LCZ sums to 1 (1e-5), HSE in (0, 1)")
def test_probability_invariants():
    rng = np.random.default_rng(6)
    for i in range(100):
        cfg = ModelConfig(
            bands=int(rng.integers(1, 11)),
            patch_h=4 * int(rng.integers(2, 9)),
            patch_w=4 * int(rng.integers(2, 9)),
            base_features=int(rng.choice([2, 4, 8])),
            p2f_enabled=bool(rng.integers(2)),
            cbam_enabled=bool(rng.integers(2)),
        )
        model = MTLNet(cfg, seed=i)
        model.train(bool(rng.integers(2)))
        x = torch.from_numpy(rng.random((2, cfg.bands, cfg.patch_h, cfg.patch_w), dtype=np.float32))
        with torch.no_grad():
            out = model(x)
        assert torch.allclose(out.lcz_avg.sum(dim=1), torch.ones(2, cfg.patch_h, cfg.patch_w), atol=1e-5)
        for head in out.lcz_heads:
            assert torch.allclose(head.sum(dim=1), torch.ones_like(head[:, 0]), atol=1e-5)
        assert bool(((out.hse > 0) & (out.hse < 1)).all())


# --- 7. overfit ----------------------------------------------------------------------------------


def _overfit_setup():
    patches = [p for seed in (11, 12) for p in tile_scene(generate_scene(seed, 256, 256), 128)]
    assert len(patches) == 8
    # one decay halfway: the per-epoch schedule would freeze a one-step-per-epoch run long before 300 epochs
    cfg = TrainConfig(batch_size=8, lr0=0.002, lr_decay_factor=0.25, lr_decay_every_epochs=150,
                      max_epochs=300, patience=300, seed=0, weighting="learned")
    return patches, cfg


@pytest.mark.slow
@pytest.mark.acceptance(7, "overfit 8 patches: train MAE < 5.0%, LCZ OA > 0.90 within 300 epochs, deterministic")
def test_overfit():
    start = time.perf_counter()
    patches, cfg = _overfit_setup()
    model = MTLNet(ModelConfig(), seed=0)
    res = fit(model, patches, patches, cfg)
    scores = evaluate_patches(model, patches)
    elapsed = time.perf_counter() - start
    print(f"\n[overfit] best epoch {res.best_epoch}: MAE {scores['mae_percent']:.3f}%, "
          f"OA {scores['lcz_oa']:.4f}, {elapsed:.0f} s")

    again = fit(MTLNet(ModelConfig(), seed=0), patches, patches,
                TrainConfig(**{**cfg.__dict__, "max_epochs": 5}))
    assert again.history == res.history[:5]
    assert scores["mae_percent"] < 5.0
    assert scores["lcz_oa"] > 0.90
    assert elapsed < 15 * 60


# --- 8. generalization direction ------------------------------------------------------------------


def _held_out_oa(model, scenes, window):
    cm = ConfusionMatrix(17)
    for s in scenes:
        _, probs = sliding_window_predict(model, s.image, window=window, overlap=window // 4)
        cm = accumulate(cm, aggregate_labels(s.lcz_ref), aggregate_lcz(probs))
    return oa(cm)


@pytest.mark.slow
@pytest.mark.acceptance(8, "held-out LCZ OA: MTL >= single-task - 0.02 (mean of 3 seeds, 20 scenes)")
def test_generalization_direction():
    start = time.perf_counter()
    seeds = np.random.SeedSequence(2024).generate_state(20)
    scenes = [generate_scene(int(s), 128, 128) for s in seeds]
    train = [p for s in scenes[:14] for p in tile_scene(s, 64)]
    val = [p for s in scenes[14:16] for p in tile_scene(s, 64)]
    held_out = scenes[16:]
    gaps = []
    for seed in range(3):
        tc = TrainConfig(max_epochs=80, lr_decay_every_epochs=25, seed=seed)
        scores = {}
        for task in ("multi", "lcz"):
            cfg = ModelConfig(patch_h=64, patch_w=64, task=task, p2f_enabled=task == "multi")
            model = MTLNet(cfg, seed=seed)
            fit(model, train, val, tc)
            scores[task] = _held_out_oa(model, held_out, 64)
        gaps.append(scores["multi"] - scores["lcz"])
        print(f"\n[generalization] seed {seed}: MTL {scores['multi']:.4f} single {scores['lcz']:.4f} "
              f"gap {gaps[-1]:+.4f}")
    elapsed = time.perf_counter() - start
    print(f"[generalization] mean gap {np.mean(gaps):+.4f}, {elapsed:.0f} s")
    assert np.mean(gaps) >= -0.02
    assert elapsed < 2 * 3600


# --- 9. pipeline shape --------------------------------------------------------------------------------


@pytest.mark.acceptance(9, "synth -> train -> predict -> evaluate on 512x512: HSE 256x256, LCZ 51x51, 7 metrics")
def test_pipeline_shape(tmp_path):
    data, run, pred, report = tmp_path / "d", tmp_path / "run", tmp_path / "pred", tmp_path / "report.json"
    assert main(["synth", "--seed", "7", "--scenes", "2", "--size", "512", "--out", str(data)]) == 0
    assert main(["train", "--manifest", str(data / "manifest.json"), "--out", str(run), "--epochs", "1",
                 "--p2f", "on", "--weighting", "learned"]) == 0
    assert (run / "history.csv").exists()
    assert main(["predict", "--checkpoint", str(run / "checkpoint"), "--scene", str(data / "scene_001"),
                 "--out", str(pred)]) == 0
    assert mtlt.read(pred / "hse.mtlt").shape == (256, 256)
    assert mtlt.read(pred / "lcz.mtlt").shape == (51, 51)
    assert main(["evaluate", "--pred", str(pred), "--ref", str(data / "scene_001"), "--report", str(report)]) == 0
    metrics = json.loads(report.read_text())
    for key in ("oa", "kappa", "aa", "wa", "recall", "f_score", "mae_percent"):
        assert isinstance(metrics[key], float), key


# --- 10. schedule and early stopping ---------------------------------------------------------------------


@pytest.mark.acceptance(10, "lr table {0: 0.002, 2: 0.0005, 5: 0.000125}; patience example stops at epoch 13")
def test_schedule_and_patience(monkeypatch, small_patches):
    cfg = TrainConfig(lr_decay_factor=0.25)
    table = {e: lr_at_epoch(cfg, e) for e in (0, 2, 5)}
    assert table == pytest.approx({0: 0.002, 2: 0.0005, 5: 0.000125}, rel=1e-15)
    values = iter([5.0, 4.0] + [4.0] * 30)
    monkeypatch.setattr(train_mod, "validation_loss", lambda *a, **k: next(values))
    model = MTLNet(ModelConfig(bands=3, patch_h=16, patch_w=16, base_features=4))
    res = fit(model, small_patches[:2], small_patches[2:4], TrainConfig(batch_size=2, max_epochs=40, patience=10))
    assert (res.stopped_epoch, res.best_epoch) == (13, 2)
