"""Acceptance criteria, one test per criterion.

Each test prints one line: ``ACCEPTANCE <n>: PASS|FAIL - <detail>``.
Criteria 4-7 train models and benchmark real volumes; the whole module
takes roughly 40-70 minutes on a single desktop core.  Thresholds are
asserted exactly as stated, nothing is tuned at run time.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ribpoint import autodiff as ad
from ribpoint import kernels, rng
from ribpoint.centerline import extract_centerline
from ribpoint.metrics import bench, dense_conv_baseline, dice, per_rib_recall
from ribpoint.nn import NetworkConfig, SAConfig, default_network_config, forward, init_params
from ribpoint.pipeline import segment_volume
from ribpoint.pointcloud import voxels_to_points
from ribpoint.postprocess import points_to_voxel_mask
from ribpoint.synth import PhantomConfig, crop_upper_half, generate_dataset, generate_phantom
from ribpoint.training import TrainConfig, train
from ribpoint.volume import StructuringElement, morph, remove_exterior
from ribpoint import io


def criterion(n: int, passed: bool, detail: str):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {n}: {status} - {detail}")
    assert passed, f"criterion {n}: {detail}"


# --- shared heavyweight fixtures -------------------------------------------

@pytest.fixture(scope="session")
def accept_dataset(tmp_path_factory):
    """20 train / 1 dev / 5 test default-size phantoms with distractors."""
    out = tmp_path_factory.mktemp("accept_data")
    manifest = generate_dataset(20, 1, 5, base_seed=2024, out_dir=out)
    return out, manifest


def _case_points(case_dir: Path):
    volume = io.read_rvol(case_dir / "volume.rvol")
    labels = io.read_rvol(case_dir / "truth_labels.rvol")
    bone = remove_exterior(volume)
    return voxels_to_points(bone, labels)


@pytest.fixture(scope="session")
def trained_model(accept_dataset):
    out, manifest = accept_dataset
    dataset = [_case_points(out / cid) for cid in manifest["splits"]["train"]]
    tc = TrainConfig(epochs=60, batch_size=8, checkpoint_every=1000)
    model, history = train(dataset, default_network_config(seed=5), tc,
                           seed=11, stop_dice=0.995)
    return model, history


@pytest.fixture(scope="session")
def heldout_eval(accept_dataset, trained_model):
    """Segment the 5 held-out phantoms; collect Dice, recall, containment."""
    out, manifest = accept_dataset
    model, _ = trained_model
    dices = []
    missing = [0, 0]  # missing, total
    containment_violations = 0
    per_case = {}
    for i, cid in enumerate(manifest["splits"]["test"]):
        volume = io.read_rvol(out / cid / "volume.rvol")
        truth = io.read_rvol(out / cid / "truth_labels.rvol")
        meta = json.loads((out / cid / "meta.json").read_text())
        pair_index = {inst["id"]: inst["pair_index"] for inst in meta["instances"]}
        mask, pred_points, bone = segment_volume(
            model, volume, n_points=250_000, seed=rng.derive(99, i))
        if np.any(mask.bits & ~bone.bits):
            containment_violations += 1
        d = dice(truth.labels > 0, mask.bits)
        rep = per_rib_recall(truth, mask, pair_index)
        dices.append(d)
        missing[0] += rep.counts["A"][0]
        missing[1] += rep.counts["A"][1]
        per_case[cid] = {"dice_voxel": d, "missing_A": rep.ratios["A"]}
    return {
        "dices": dices,
        "missing": missing,
        "containment_violations": containment_violations,
        "per_case": per_case,
    }


# --- criterion 1: metric oracle --------------------------------------------

def brute_force_dice(y: np.ndarray, yhat: np.ndarray) -> float:
    inter = ny = nyhat = 0
    for z in range(y.shape[0]):
        for r in range(y.shape[1]):
            for c in range(y.shape[2]):
                a = bool(y[z, r, c])
                b = bool(yhat[z, r, c])
                inter += a and b
                ny += a
                nyhat += b
    return 1.0 if ny + nyhat == 0 else 2.0 * inter / (ny + nyhat)


def test_criterion_1_dice_oracle():
    t0 = time.perf_counter()
    g = np.random.default_rng(1)
    mismatches = 0
    for _ in range(200):
        shape = tuple(int(g.integers(2, 33)) for _ in range(3))
        density = g.uniform(0, 1)
        y = g.random(shape) < density
        yhat = g.random(shape) < g.uniform(0, 1)
        if dice(y, yhat) != brute_force_dice(y, yhat):
            mismatches += 1
    # boundary conventions
    z = np.zeros((2, 2, 2), dtype=bool)
    o = np.ones((2, 2, 2), dtype=bool)
    half = o.copy()
    half[0] = False
    conventions = (dice(o, o) == 1.0 and dice(z, z) == 1.0
                   and dice(o, ~o) == 0.0)
    # recall 0.5 boundary: exactly half overlap is NOT flagged missing
    from ribpoint.volume import BinaryMask, LabelMap
    gt = LabelMap((2, 2, 2), (1, 1, 1), o.astype(np.int32))
    rep = per_rib_recall(gt, BinaryMask((2, 2, 2), (1, 1, 1), half), {1: 1})
    boundary_ok = rep.recall[1] == 0.5 and rep.missing[1] is False
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and conventions and boundary_ok and elapsed < 10
    criterion(1, ok, f"200/200 pairs exact, conventions honored, "
                     f"runtime {elapsed:.1f}s < 10s")


# --- criterion 2: gradient correctness ---------------------------------------

def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    cfg = NetworkConfig(
        sa_levels=(SAConfig(npoint=8, radius=0.5, nsample=8, mlp=(8,)),
                   SAConfig(npoint=4, radius=0.8, nsample=4, mlp=(8,))),
        fp_levels=((8,), (8,)), num_classes=2, fp_k=3, seed=1)
    model = init_params(cfg, dtype=np.float64)
    n_params = model.param_count()
    # generic parameter point: the zero-bias init leaves ReLU inputs exactly
    # at the kink (grouped coordinates are centered), where central
    # differences do not estimate the subgradient the backward pass uses
    g = rng.generator(42)
    for _, p in model.named():
        p.data = p.data + g.uniform(-0.05, 0.05, size=p.data.shape)
    gx = np.random.default_rng(7)
    xyz = gx.random((64, 3))
    labels = gx.integers(0, 2, 64)

    def loss():
        return ad.cross_entropy(forward(model, xyz, fps_seed=3), labels)

    loss().backward()
    grads = {n: p.grad.copy() for n, p in model.named()}
    h = 1e-5
    worst = 0.0
    for name, p in model.named():
        flat = p.data.reshape(-1)
        gf = grads[name].reshape(-1)
        for k in range(flat.size):
            o = flat[k]
            flat[k] = o + h
            lp = float(loss().data)
            flat[k] = o - h
            lm = float(loss().data)
            flat[k] = o
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - gf[k]) / max(abs(fd), abs(gf[k]), 1e-8))
    elapsed = time.perf_counter() - t0
    ok = n_params <= 1000 and worst < 1e-4 and elapsed < 120
    criterion(2, ok, f"{n_params} params, 64 points, max rel err "
                     f"{worst:.2e} < 1e-4, runtime {elapsed:.0f}s < 120s")


# --- criterion 3: sampling oracles ---------------------------------------------

def test_criterion_3_sampling_oracles():
    t0 = time.perf_counter()
    g = np.random.default_rng(3)
    # ball_query vs exhaustive O(MN) scan on 50 fixtures of 1000 points
    bq_ok = True
    for trial in range(50):
        coords = g.random((1000, 3)) * g.uniform(0.5, 3.0)
        centers = coords[g.choice(1000, 32, replace=False)]
        radius = float(g.uniform(0.05, 0.3))
        nsample = int(g.integers(1, 40))
        got = kernels.ball_query(centers, coords, radius, nsample)
        d2 = ((centers[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
        for j in range(len(centers)):
            hits = np.flatnonzero(d2[j] <= radius * radius)
            if hits.size:
                want = hits[:nsample]
                want = np.concatenate([want, np.full(nsample - want.size, want[0])])
            else:
                want = np.full(nsample, np.argmin(d2[j]))
            if not np.array_equal(got[j], want):
                bq_ok = False
    # FPS hand-derived collinear case
    collinear = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
    fps_hand = set(kernels.farthest_point_sample(collinear, 2, seed=0).tolist()) == {0, 3}
    # greedy local optimality by brute force, N <= 64, m <= 8
    greedy_ok = True
    for trial in range(25):
        n = int(g.integers(8, 65))
        m = int(g.integers(2, 9))
        coords = g.random((n, 3))
        sel = kernels.farthest_point_sample(coords, m, seed=trial)
        for step in range(1, m):
            prior = coords[sel[:step]]
            d2_all = ((coords[:, None, :] - prior[None, :, :]) ** 2).sum(-1).min(axis=1)
            if d2_all[sel[step]] != d2_all.max():
                greedy_ok = False
    elapsed = time.perf_counter() - t0
    ok = bq_ok and fps_hand and greedy_ok and elapsed < 30
    criterion(3, ok, f"ball query 50/50 exact, FPS {{0,3}} case and greedy "
                     f"optimality hold, runtime {elapsed:.1f}s < 30s")


# --- criterion 4: overfit check --------------------------------------------------

def test_criterion_4_overfit_single_phantom():
    t0 = time.perf_counter()
    vol, truth = generate_phantom(PhantomConfig(), seed=7)
    bone = remove_exterior(vol)
    pts = voxels_to_points(bone, truth.labels)
    tc = TrainConfig(epochs=200, batch_size=1, checkpoint_every=1000)
    model, hist = train([pts], default_network_config(seed=5), tc, seed=11,
                        stop_dice=0.96)
    best = max(h["train_dice"] for h in hist)
    elapsed = time.perf_counter() - t0
    ok = best >= 0.95 and len(hist) <= 200 and elapsed < 1800
    criterion(4, ok, f"training point Dice {best:.4f} >= 0.95 after "
                     f"{len(hist)} epochs (<=200), {elapsed:.0f}s < 1800s")


# --- criteria 5 and 10: generalization and containment -----------------------------

def test_criterion_5_generalization(heldout_eval):
    mean_dice = float(np.mean(heldout_eval["dices"]))
    miss, total = heldout_eval["missing"]
    ratio = miss / total
    ok = mean_dice >= 0.85 and ratio <= 0.05
    criterion(5, ok, f"mean voxel Dice {mean_dice:.4f} >= 0.85, all-rib "
                     f"missing ratio {miss}/{total} = {ratio:.3f} <= 0.05 "
                     f"on 5 held-out phantoms")


def test_criterion_10_containment(heldout_eval):
    violations = heldout_eval["containment_violations"]
    # plus a direct adversarial check on random masks
    g = np.random.default_rng(0)
    from conftest import random_mask
    from ribpoint.pointcloud import PointSet
    from ribpoint.volume import BinaryMask
    extra = 0
    for s in range(5):
        binarized = random_mask((16, 16, 16), 0.4, seed=s)
        full = BinaryMask((16, 16, 16), (1, 1, 1), np.ones((16, 16, 16), bool))
        pts = voxels_to_points(full)
        labels = (g.random(len(pts)) < 0.5).astype(np.uint8)
        pred = PointSet(pts.coords, labels, pts.voxel_index)
        out = points_to_voxel_mask(pred, None, binarized, StructuringElement(2))
        if np.any(out.bits & ~binarized.bits):
            extra += 1
    ok = violations == 0 and extra == 0
    criterion(10, ok, f"0 containment violations across evaluated cases "
                      f"(held-out: {violations}, adversarial: {extra})")


# --- criterion 6: robustness --------------------------------------------------------

def test_criterion_6_robustness(accept_dataset, trained_model):
    out, manifest = accept_dataset
    model, _ = trained_model
    # (a) upper-half crops: every rib fully contained keeps recall >= 0.5
    worst_contained = 1.0
    checked = 0
    for i, cid in enumerate(manifest["splits"]["test"][:3]):
        volume = io.read_rvol(out / cid / "volume.rvol")
        truth = io.read_rvol(out / cid / "truth_labels.rvol")
        meta = json.loads((out / cid / "meta.json").read_text())
        pair_index = {inst["id"]: inst["pair_index"] for inst in meta["instances"]}
        cvol = crop_upper_half(volume)
        ctruth = crop_upper_half(truth)
        full_counts = np.bincount(truth.labels.ravel())
        crop_counts = np.bincount(ctruth.labels.ravel(),
                                  minlength=full_counts.size)
        fully = [k for k in range(1, truth.num_instances + 1)
                 if crop_counts[k] == full_counts[k] and full_counts[k] > 0]
        if not fully:
            continue
        cmask, _, _ = segment_volume(model, cvol, n_points=250_000,
                                     seed=rng.derive(55, i))
        rep = per_rib_recall(ctruth, cmask, pair_index)
        worst_contained = min(worst_contained,
                              min(rep.recall[k] for k in fully))
        checked += len(fully)
    # (b) high-density implant phantoms keep voxel Dice >= 0.80
    implant_dices = []
    for s in (31, 32):
        cfg = PhantomConfig(implant=True, scapula=True)
        vol, truth = generate_phantom(cfg, seed=s)
        mask, _, _ = segment_volume(model, vol, n_points=250_000,
                                    seed=rng.derive(66, s))
        implant_dices.append(dice(truth.labels.labels > 0, mask.bits))
    ok = worst_contained >= 0.5 and checked > 0 and min(implant_dices) >= 0.80
    criterion(6, ok, f"{checked} fully-contained cropped ribs min recall "
                     f"{worst_contained:.3f} >= 0.5; implant-phantom Dice "
                     f"{min(implant_dices):.4f} >= 0.80")


# --- criterion 7: efficiency ----------------------------------------------------------

def test_criterion_7_efficiency(tmp_path):
    from ribpoint.nn import infer
    from ribpoint.pointcloud import normalize, random_downsample
    vol, _truth = generate_phantom(PhantomConfig(), seed=0)
    model = init_params(default_network_config(seed=0))
    bone = remove_exterior(vol)
    normed, _t = normalize(voxels_to_points(bone))
    sampled = random_downsample(normed, 250_000, seed=0)
    vol_f32 = vol.data.astype(np.float32) / 1000.0
    report = bench(
        {
            "sparse_forward": lambda: infer(model, sampled),
            "dense_conv_baseline": lambda: dense_conv_baseline(vol_f32, channels=8, seed=0),
        },
        repeats=5,
        counts={"sparse_forward": {"points": len(sampled)},
                "dense_conv_baseline": {"voxels": vol_f32.size, "channels": 8}},
        threads=1)
    sparse = report.stages["sparse_forward"]["median_s"]
    dense = report.stages["dense_conv_baseline"]["median_s"]
    ratio = dense / sparse
    payload = report.to_json_dict()
    payload["speedup_dense_over_sparse"] = ratio
    (tmp_path / "bench.json").write_text(json.dumps(payload, sort_keys=True,
                                                    separators=(",", ":")))
    ok = ratio >= 5.0
    criterion(7, ok, f"sparse forward median {sparse:.2f}s vs dense baseline "
                     f"{dense:.1f}s on 256^3: {ratio:.1f}x >= 5x (k=5, "
                     f"single-threaded), report written")


# --- criterion 8: centerline accuracy ---------------------------------------------------

def test_criterion_8_centerline_accuracy(default_phantom):
    _vol, truth = default_phantom
    se = StructuringElement(3, "ball")
    dists = []
    inside_ok = True
    length_ok = True
    for inst in truth.instances:
        rib = truth.labels.instance_mask(inst.instance_id)
        cl = extract_centerline(rib, se, vertebra=truth.vertebra)
        dilated = morph(rib, se, "dilate")
        for p in cl.points:
            ix, iy, iz = int(p[0]), int(p[1]), int(p[2])
            if not dilated.bits[iz, iy, ix]:
                inside_ok = False
        if cl.arc_length < np.linalg.norm(cl.points[-1] - cl.points[0]) - 1e-9:
            length_ok = False
        curve = truth.centerlines[inst.instance_id]
        a, b = cl.points, curve
        ow = lambda p, q: np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)).min(1).mean()
        dists.append(0.5 * (ow(a, b) + ow(b, a)))
    mean_dist = float(np.mean(dists))
    ok = mean_dist <= 2.0 and inside_ok and length_ok and len(dists) == 24
    criterion(8, ok, f"24 ribs, mean symmetric distance {mean_dist:.3f} vox "
                     f"<= 2.0, samples inside dilation: {inside_ok}, "
                     f"arc length >= endpoint distance: {length_ok}")


# --- criterion 9: determinism -------------------------------------------------------------

def _end_to_end_run(root: Path, tag: str) -> dict[str, bytes]:
    env = dict(os.environ)
    env.update({"OPENBLAS_NUM_THREADS": "1", "OMP_NUM_THREADS": "1",
                "RIBPOINT_LOG": "ERROR"})
    run = root / tag
    run.mkdir()
    cfg = root / "phantom.json"
    if not cfg.exists():
        cfg.write_text(json.dumps({"rib_radius_mm": 2.0,
                                   "vertebra_radius_mm": 4.0}))

    def cli(*args):
        cmd = [sys.executable, "-m", "ribpoint.cli", *args, "--threads", "1"]
        res = subprocess.run(cmd, env=env, capture_output=True, text=True,
                             cwd=str(run))
        assert res.returncode == 0, f"{args[0]} failed: {res.stderr}"

    cli("synth", "--train", "1", "--dev", "1", "--test", "1", "--seed", "33",
        "--dims", "96,96,96", "--config", str(cfg), "--out", str(run / "data"))
    cli("train", "--data", str(run / "data"), "--out", str(run / "model"),
        "--epochs", "5", "--batch-size", "2", "--points", "4096", "--seed", "9")
    cli("infer", "--ckpt", str(run / "model" / "checkpoint_final.rckp"),
        "--in", str(run / "data" / "case_0002" / "volume.rvol"),
        "--points", "20000", "--seed", "4", "--out", str(run / "pred"),
        "--gt", str(run / "data" / "case_0002" / "truth_labels.rvol"))
    cli("eval", "--pred", str(run / "pred" / "pred_mask.rvol"),
        "--gt", str(run / "data" / "case_0002" / "truth_labels.rvol"),
        "--meta", str(run / "data" / "case_0002" / "meta.json"),
        "--out", str(run / "eval"))
    return {
        "eval": (run / "eval" / "eval_report.json").read_bytes(),
        "infer": (run / "pred" / "infer_metrics.json").read_bytes(),
        "history": (run / "model" / "history.json").read_bytes(),
        "checkpoint": (run / "model" / "checkpoint_final.rckp").read_bytes(),
    }


def test_criterion_9_determinism(tmp_path):
    a = _end_to_end_run(tmp_path, "run_a")
    b = _end_to_end_run(tmp_path, "run_b")
    same = {k: a[k] == b[k] for k in a}
    ok = all(same.values())
    criterion(9, ok, f"byte-identical metric JSON across two seeded "
                     f"single-threaded runs: {same}")
