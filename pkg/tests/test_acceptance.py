"""Acceptance gate. Each test records one ``[PASS]``/``[FAIL]`` line, shown in the
terminal summary under "acceptance criteria"."""
import csv
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from _helpers import numeric_grad, rel_error
from conftest import ACCEPTANCE_LINES
from snstitch import anchors as nn
from snstitch import budget
from snstitch import stitching as st
from snstitch.checkpoint import load_checkpoint
from snstitch.cli import load_data, main
from snstitch.config import load_config
from snstitch.dataio import SynthTaskSpec, make_synthetic
from snstitch.evalbench import anchor_accuracy
from snstitch.linalg import make_rng
from snstitch.training import TrainConfig, train_snnet

ROOT = Path(__file__).resolve().parents[1]


def record(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def deit_pair():
    small = nn.AnchorSpec(depth=12, width=384, heads=6, seq_len=1024, patch_dim=768, num_classes=1000)
    large = nn.AnchorSpec(depth=24, width=1024, heads=16, seq_len=1024, patch_dim=768, num_classes=1000)
    return small, large


def deit_distribution():
    small, large = deit_pair()
    space = st.enumerate_space(small, large)
    cost = budget.CostModel(small, large)
    return space, budget.build_distribution(space, cost, budget.auto_step(space, cost))


def toy_pair():
    cfg = load_config(ROOT / "configs" / "toy.toml", env={})
    return cfg.small_spec(), cfg.large_spec()


def test_c1_stitch_space_counts():
    t0 = time.perf_counter()
    small, large = deit_pair()
    tws = len(st.enumerate_space(small, large, "TWS"))
    v1 = len(st.enumerate_space(small, large, "V1-FS"))
    mismatches = []
    for L in range(2, 17):
        brute = set()
        for start in ("small", "large"):
            brute.add((start,))
            for a in range(1, L):
                brute.add((start, a))
                brute.update((start, a, b) for b in range(a + 1, L))
        space = st.enumerate_space(nn.AnchorSpec(depth=L, width=8, heads=2),
                                   nn.AnchorSpec(depth=2 * L, width=16, heads=2))
        closed = 2 + 2 * (L - 1) + (L - 1) * (L - 2)
        if not closed == len(brute) == len(space):
            mismatches.append(L)
    elapsed = time.perf_counter() - t0
    ok = tws == 134 and v1 == 13 and not mismatches and elapsed < 1.0
    record("C1 stitch-space counts", ok,
           f"TWS={tws} V1-FS={v1} closed-form mismatches={mismatches} ({elapsed:.3f}s)")


def test_c2_sampling_probabilities():
    t0 = time.perf_counter()
    space, dist = deit_distribution()
    anchors = set(space.anchor_ids)
    lone = all(len(dist.bin_of(c).members) == 1 for c in anchors)
    exact = sum(dist.ros_probability(c) for c in anchors)
    rng = make_rng(2024)
    ros = np.mean([budget.ros_sample(dist, rng) in anchors for _ in range(10_000)])
    uni = np.mean([budget.uniform_sample(space, rng) in anchors for _ in range(10_000)])
    elapsed = time.perf_counter() - t0
    ok = (lone and len(dist) == 13 and exact == Fraction(2, 13)
          and abs(ros - 2 / 13) <= 0.015 and abs(uni - 2 / 134) <= 0.005 and elapsed < 5.0)
    record("C2 sampling probabilities", ok,
           f"bins={len(dist)} exact={exact} ros={ros:.4f} uniform={uni:.4f} ({elapsed:.2f}s)")


def test_c3_ros_boost_factor():
    space, dist = deit_distribution()
    p_ros = sum(dist.ros_probability(c) for c in space.anchor_ids)
    p_uni = sum(dist.uniform_probability(c) for c in space.anchor_ids)
    boost = p_ros / p_uni
    record("C3 ROS boost factor", boost == Fraction(134, 13),
           f"P_ros/P_uniform={boost} ~ {float(boost):.2f}")


def test_c4_flops_calibration():
    cost = budget.CostModel(*deit_pair())
    s, l = cost.backbone("small") / 1e9, cost.backbone("large") / 1e9
    ok = abs(s / 32 - 1) <= 0.05 and abs(l / 363 - 1) <= 0.05
    record("C4 FLOPs calibration", ok, f"small={s:.1f}G (32G) large={l:.1f}G (363G)")


def test_c5_ls_initialization():
    rng = make_rng(5)
    x = rng.normal(size=(256, 32))
    W = rng.normal(size=(32, 64))
    M = st.ls_init(x, x @ W)
    err = np.abs(M - W).max()
    y = rng.normal(size=(256, 64))
    M2 = st.ls_init(x, y)
    grad = np.abs(2 * x.T @ (x @ M2 - y)).max()
    record("C5 LS initialization", err <= 1e-8 and grad <= 1e-6,
           f"planted max error={err:.2e} residual gradient={grad:.2e}")


def test_c6_lora_zero_update():
    small, large = toy_pair()
    ms, ml = nn.init_anchor(small, make_rng(1)), nn.init_anchor(large, make_rng(2))
    calib = make_rng(3).normal(size=(100, small.seq_len, small.patch_dim))
    lora = st.enumerate_space(small, large)
    st.init_layers(lora, ms, ml, calib, rank=16, rng=make_rng(4))
    plain = st.enumerate_space(small, large)
    st.init_layers(plain, ms, ml, calib, rank=0)
    x = make_rng(6).normal(size=(16, small.seq_len, small.patch_dim))
    worst = max(
        np.abs(st.forward_stitched(lora, c, ms, ml, x, record=False).logits
               - st.forward_stitched(plain, c, ms, ml, x, record=False).logits).max()
        for c in range(len(lora)))
    record("C6 LoRA zero-update", worst <= 1e-12,
           f"max |LoRA - LS-only| over {len(lora)} routes={worst:.1e}")


def test_c7_freeze_invariant():
    small, large = toy_pair()
    ms, ml = nn.init_anchor(small, make_rng(1)), nn.init_anchor(large, make_rng(2))
    train, _ = make_synthetic(SynthTaskSpec(), make_rng(0))
    space = st.enumerate_space(small, large)
    cfg = TrainConfig(iterations=500)
    train_snnet(space, ms, ml, train, TrainConfig(iterations=0))
    init_m = {c: layer.M.tobytes() for c, layer in space.layers.items()}
    init_a = {c: layer.A.copy() for c, layer in space.layers.items()}
    train_snnet(space, ms, ml, train, cfg)
    frozen = all(layer.M.tobytes() == init_m[c] for c, layer in space.layers.items())
    moved = sum(bool(np.any(layer.A != init_a[c])) for c, layer in space.layers.items())
    record("C7 freeze invariant", frozen and moved > 0,
           f"{len(init_m)} M matrices bit-identical after 500 iterations: {frozen}; "
           f"A factors updated in {moved} layers")


def test_c8_gradient_correctness():
    small = nn.AnchorSpec(depth=3, width=8, heads=2, patch_dim=5, num_classes=3, seq_len=4)
    large = nn.AnchorSpec(depth=6, width=12, heads=3, patch_dim=5, num_classes=3, seq_len=4)
    ms, ml = nn.init_anchor(small, make_rng(1)), nn.init_anchor(large, make_rng(2))
    rng = make_rng(3)
    for model in (ms, ml):
        for p in model.params.values():
            p += rng.normal(0.0, 0.2, size=p.shape)
    x = rng.normal(size=(3, 4, 5))
    y = np.array([0, 2, 1])

    # solo anchor, every parameter tensor
    res = nn.forward(ms, x)
    grads = nn.backward(ms, res, nn.cross_entropy(res.logits, y)[1])
    anchor_err = max(
        rel_error(numeric_grad(lambda: nn.cross_entropy(nn.predict(ms, x), y)[0], p), grads[k])
        for k, p in ms.params.items())

    # B and A through a full FSF route
    space = st.enumerate_space(small, large)
    st.init_layers(space, ms, ml, rng.normal(size=(20, 4, 5)), rank=3, rng=make_rng(4))
    for layer in space.layers.values():
        layer.A += rng.normal(scale=0.1, size=layer.A.shape)
    cid = next(i for i, c in enumerate(space.configs) if c.kind == "FSF")
    res = st.forward_stitched(space, cid, ms, ml, x)
    grads = st.backward_stitched(res, nn.cross_entropy(res.logits, y)[1])

    def loss():
        return nn.cross_entropy(st.forward_stitched(space, cid, ms, ml, x, record=False).logits, y)[0]

    stitch_err = max(
        rel_error(numeric_grad(loss, getattr(space.layers[c], k)), grads[f"stitch.{c.key}.{k}"])
        for c in space.configs[cid].crossings for k in ("B", "A"))
    ok = anchor_err <= 1e-4 and stitch_err <= 1e-4
    record("C8 gradient correctness", ok,
           f"anchor max rel err={anchor_err:.1e}, FSF B/A max rel err={stitch_err:.1e}")


def _read_sweep(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.mark.slow
def test_c9_end_to_end_toy(tmp_path):
    t0 = time.perf_counter()
    config = ROOT / "configs" / "toy.toml"
    args = ["--config", str(config), "--out", str(tmp_path)]
    for cmd in ("pretrain", "train", "sweep"):
        assert main([cmd] + args) == 0
    cfg = load_config(config, env={})
    _, val = load_data(cfg)
    solo = {
        "AnchorSmall": anchor_accuracy(load_checkpoint(tmp_path / "small.snv2", cfg.small_spec()), val),
        "AnchorLarge": anchor_accuracy(load_checkpoint(tmp_path / "large.snv2", cfg.large_spec()), val),
    }
    rows = _read_sweep(tmp_path / "sweep.csv")
    accs = [float(r["accuracy"]) for r in rows]
    chance = 1.0 / cfg.num_classes
    retained = {r["kind"]: float(r["accuracy"]) / solo[r["kind"]] for r in rows if r["kind"] in solo}
    front = [(float(r["flops"]), float(r["accuracy"])) for r in rows if r["on_pareto"] == "1"]
    front.sort()
    monotone = all(a[1] <= b[1] for a, b in zip(front, front[1:]))
    elapsed = time.perf_counter() - t0
    ok = (min(solo.values()) >= 0.95 and min(accs) >= 2 * chance
          and min(retained.values()) >= 0.90 and monotone and elapsed < 600)
    record("C9 end-to-end toy", ok,
           f"solo small={solo['AnchorSmall']:.3f} large={solo['AnchorLarge']:.3f}; "
           f"{len(rows)} configs min acc={min(accs):.3f} (need {2 * chance:.2f}); "
           f"anchor retention min={min(retained.values()):.3f}; "
           f"frontier of {len(front)} monotone={monotone} ({elapsed:.0f}s)")


DETERMINISM_CONFIG = """
pretrain_iterations = 150
iterations = 300
samples_per_class = 60
"""


@pytest.mark.slow
def test_c10_determinism(tmp_path):
    config = tmp_path / "det.toml"
    config.write_text(DETERMINISM_CONFIG)
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in ("pretrain", "train", "sweep"):
            assert main([cmd, "--config", str(config), "--out", str(out)]) == 0
        blobs.append((out / "sweep.csv").read_bytes())
    same = blobs[0] == blobs[1]
    record("C10 determinism", same,
           f"two full pipeline runs, sweep.csv {len(blobs[0])} bytes, byte-identical={same}")
