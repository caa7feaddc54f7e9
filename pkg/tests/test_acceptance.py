"""End-to-end acceptance suite; each test prints one PASS/FAIL line."""
import subprocess
import sys
import time

import numpy as np
import pytest

from petreg.interpolation import evaluate, prefilter
from petreg.metric import JointHistogram, NMIMetric, entropy, normalized_mutual_information
from petreg.optimize import lbfgs_bounded, regular_step_gd
from petreg.pca_init import volume_axes
from petreg.phantom import PhantomSpec, evaluate as evaluate_tre, make_pair, random_spec, tre
from petreg.pipeline import RegistrationConfig, pca_initialization, register_full, register_global
from petreg.transform import (
    AffineTransform,
    BSplineFFD,
    affine_from_prs,
    cubic_basis,
    euler_matrix,
    read_transform,
    write_transform,
)
from petreg.volume import BoundingBox, Volume, extract_voi, load_metaimage, save_metaimage

N_SEEDS = 20
PET_VOXEL = 0.78  # mm, in-plane PET voxel at the halved scale


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")

    return emit


def _smooth_pair(n, pad):
    """Smooth two-blob fixed volume of n^3 voxels and a shifted moving copy on a larger grid."""
    def blobs(vol, shift):
        p = vol.world_grid() - shift
        a = np.exp(-0.5 * np.sum((p / [7.0, 5.0, 4.0]) ** 2, axis=1))
        b = 0.6 * np.exp(-0.5 * np.sum(((p - [4.0, -3.0, 2.0]) / 3.0) ** 2, axis=1))
        return vol.with_data((a + b).reshape(vol.data.shape))

    m = n + 2 * pad
    moving = blobs(Volume(np.zeros((m, m, m)), (0.5,) * 3, (-(m - 1) * 0.25,) * 3), np.array([0.4, -0.3, 0.2]))
    fixed = blobs(Volume(np.zeros((n, n, n)), (0.5,) * 3, (-(n - 1) * 0.25,) * 3), np.zeros(3))
    return fixed, moving


# --------------------------------------------------------------------------- 1

def test_criterion_1_metric_correctness(report):
    spec = PhantomSpec(mri_dims=(64, 64, 64), mri_spacing=(0.23, 0.11, 0.16), mri_slab_samples=1)
    vol = make_pair(spec)[0]
    shuffled = vol.with_data(np.random.default_rng(0).permutation(vol.data.ravel()).reshape(vol.data.shape))
    NMIMetric(extract_voi(vol, BoundingBox((0, 0, 0), (7, 7, 7))), vol).value(AffineTransform.identity())  # JIT warm-up

    t0 = time.perf_counter()
    self_nmi = -NMIMetric(vol, vol).value(AffineTransform.identity())
    seconds = time.perf_counter() - t0
    shuf_nmi = -NMIMetric(vol, shuffled).value(AffineTransform.identity())

    ok = abs(self_nmi - 2.0) <= 0.02 and abs(shuf_nmi - 1.0) <= 0.02 and seconds < 1.0
    report(1, "metric correctness", ok,
           f"self NMI {self_nmi:.4f} (target 2 +/- 0.02), shuffled NMI {shuf_nmi:.4f} (target 1 +/- 0.02), "
           f"{seconds:.3f} s at 64^3")
    assert abs(shuf_nmi - 1.0) <= 0.02
    assert seconds < 1.0
    assert abs(self_nmi - 2.0) <= 0.02


# --------------------------------------------------------------------------- 2

def test_criterion_2_gradient_fidelity(report):
    fixed, moving = _smooth_pair(48, 8)
    metric = NMIMetric(fixed, moving)
    rng = np.random.default_rng(2)
    delta = 1e-4
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(20):
        t = affine_from_prs(rng.uniform(-0.08, 0.08, 3), rng.uniform(-1.5, 1.5, 3), rng.uniform(0.95, 1.05, 3),
                            rng.uniform(-0.03, 0.03, 3))
        _, g = metric.value_and_gradient(t)
        p = t.to_params()
        for i in range(12):
            e = np.zeros(12)
            e[i] = delta
            fd = (metric.value(t.with_params(p + e)) - metric.value(t.with_params(p - e))) / (2 * delta)
            worst = max(worst, abs(g[i] - fd) / abs(fd))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-3 and seconds < 30
    report(2, "gradient fidelity", ok, f"max component relative error {worst:.2e} over 20 points, {seconds:.1f} s")
    assert ok


# --------------------------------------------------------------------------- 3

def test_criterion_3_affine_recovery(report):
    cfg = RegistrationConfig(global_only=True)
    errors = []
    seconds = 0.0
    for seed in range(N_SEEDS):
        mri, pet, truth = make_pair(random_spec(seed))
        t0 = time.perf_counter()
        affine, _ = register_global(mri, pet, cfg.sigmoid, cfg)
        seconds += time.perf_counter() - t0
        errors.append(tre(affine, truth).mean())
    wins = int(np.sum(np.array(errors) < PET_VOXEL))
    ok = wins >= 18 and seconds < 60
    report(3, "affine recovery", ok,
           f"{wins}/{N_SEEDS} runs with mean TRE < {PET_VOXEL} mm (median {np.median(errors):.3f} mm), "
           f"{seconds:.1f} s total")
    assert ok


# --------------------------------------------------------------------------- 4

def test_criterion_4_local_stage_gain(report):
    wins = 0
    rows = []
    for seed in range(N_SEEDS):
        mri, pet, truth = make_pair(random_spec(seed, warp_max=3.0))
        res = register_full(mri, pet)
        affine_only = tre(res.affine, truth).mean()
        full = evaluate_tre(res, truth).mean_tre
        gain = 1.0 - full / affine_only
        rows.append(gain)
        wins += gain >= 0.70
    ok = wins >= 18
    report(4, "local-stage gain", ok,
           f"{wins}/{N_SEEDS} runs with >= 70% TRE reduction (median reduction {100 * np.median(rows):.0f}%)")
    assert ok


# --------------------------------------------------------------------------- 5

def test_criterion_5_pca_recovery(report):
    rng = np.random.default_rng(5)
    semi = np.array([9.0, 6.0, 3.5])
    n, h = 64, 0.35
    grid = Volume(np.zeros((n, n, n)), (h,) * 3, (-(n - 1) * h / 2,) * 3)
    pts = grid.world_grid()
    worst_angle = worst_centroid = 0.0
    for _ in range(5):
        R = euler_matrix(rng.uniform(-np.pi, np.pi, 3))
        c = rng.uniform(-1.0, 1.0, 3)
        inside = np.sum((((pts - c) @ R) / semi) ** 2, axis=1) <= 1.0
        ax = volume_axes(grid.with_data(inside.reshape(n, n, n).astype(float)))
        cos = np.abs(np.sum(ax.axes * R, axis=0))
        worst_angle = max(worst_angle, float(np.degrees(np.arccos(np.clip(cos, -1, 1))).max()))
        worst_centroid = max(worst_centroid, float(np.linalg.norm(ax.centroid - c)))
    ok = worst_angle < 0.5 and worst_centroid < 0.1
    report(5, "PCA recovery", ok, f"worst axis error {worst_angle:.3f} deg, worst centroid error {worst_centroid:.4f} mm")
    assert ok


# --------------------------------------------------------------------------- 6

def test_criterion_6_sigmoid_ablation(report):
    cfg = RegistrationConfig()
    closer = fewer = 0
    for seed in range(N_SEEDS):
        mri, pet, truth = make_pair(random_spec(seed, hotspot_ratio=8.0))
        body_centre = truth.affine.apply(np.zeros((1, 3)))[0]
        runs = []
        for sigmoid in ("auto", None):
            _, _, init = pca_initialization(mri, pet, sigmoid, cfg)
            centroid_err = np.linalg.norm(init.apply(init.center[None])[0] - body_centre)
            _, reps = register_global(mri, pet, sigmoid, cfg)
            runs.append((centroid_err, sum(r.report.iterations for r in reps)))
        closer += runs[0][0] < runs[1][0]
        fewer += runs[0][1] <= runs[1][1]
    ok = closer >= 16 and fewer >= 14
    report(6, "sigmoid ablation", ok,
           f"(a) smaller initial centroid error {closer}/{N_SEEDS} (need 16), "
           f"(b) no more iterations {fewer}/{N_SEEDS} (need 14)")
    assert ok


# --------------------------------------------------------------------------- 7

def _property_suite(tmp_path):
    rng = np.random.default_rng(7)
    out = {}
    d = rng.normal(size=(16, 16, 16))
    k, j, i = np.meshgrid(*(np.arange(16),) * 3, indexing="ij")
    v, _, _ = evaluate(prefilter(Volume(d)), np.c_[i.ravel(), j.ravel(), k.ravel()].astype(float), gradient=False)
    out["interpolation reproduces samples"] = np.max(np.abs(v - d.ravel())) <= 1e-8

    out["partition of unity"] = np.max(np.abs(cubic_basis(rng.uniform(0, 1, 1000)).sum(-1) - 1)) <= 1e-14

    def b3(x):
        x = abs(x)
        return 2 / 3 - x * x + x**3 / 2 if x < 1 else ((2 - x) ** 3 / 6 if x < 2 else 0.0)

    ffd = BSplineFFD((-3.0, -2.0, -4.0), (2.0, 1.5, 3.0), rng.normal(size=(5, 7, 6, 3)))
    u = rng.uniform(1.0, np.array(ffd.grid_dims) - 2.0, size=(20, 3))
    pts = ffd.grid_origin + u * ffd.grid_spacing
    ref = np.zeros((20, 3))
    for s in range(20):
        for c in range(5):
            for b in range(7):
                for a in range(6):
                    ref[s] += b3(u[s, 0] - a) * b3(u[s, 1] - b) * b3(u[s, 2] - c) * ffd.coefficients[c, b, a]
    out["FFD brute force"] = np.max(np.abs(ffd.displacement(pts) - ref)) <= 1e-12

    delta = np.zeros(10)
    delta[3] = 1.0
    out["entropy identities"] = entropy(delta) == 0.0 and abs(entropy(np.full(10, 0.1)) - np.log(10)) < 1e-12
    px = rng.dirichlet(np.ones(8))
    out["NMI identities"] = (abs(normalized_mutual_information(JointHistogram(np.diag(px), 1)) - 2) < 1e-10
                             and abs(normalized_mutual_information(JointHistogram(np.outer(px, px), 1)) - 1) < 1e-10)

    r = regular_step_gd(lambda x: (float(x @ x), 2 * x), [10.0], max_step=4.0, min_step=1e-3)
    M = rng.normal(size=(10, 10))
    A = M @ M.T + 10 * np.eye(10)
    bvec = rng.normal(size=10)
    q = lbfgs_bounded(lambda x: (0.5 * x @ A @ x - bvec @ x, A @ x - bvec), np.zeros(10), grad_tol=1e-7, max_iters=30)
    box = lbfgs_bounded(lambda x: (float((x[0] - 2) ** 2), np.array([2 * (x[0] - 2)])), [0.5], [0.0], [1.0])
    out["optimizer oracles"] = (abs(r.final_params[0]) < 1e-3
                                and np.max(np.abs(q.final_params - np.linalg.solve(A, bvec))) < 1e-6
                                and abs(box.final_params[0] - 1.0) < 1e-12)

    vol = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), (0.3, 0.4, 2.0), (1.0, -2.0, 0.5))
    save_metaimage(vol, tmp_path / "v.mhd")
    back = load_metaimage(tmp_path / "v.mhd")
    aff = AffineTransform(rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3))
    write_transform(tmp_path / "a.txt", aff)
    write_transform(tmp_path / "b.txt", ffd)
    out["I/O round trips"] = (np.array_equal(back.data, vol.data) and back.same_geometry(vol)
                              and np.array_equal(read_transform(tmp_path / "a.txt").to_params(), aff.to_params())
                              and np.array_equal(read_transform(tmp_path / "b.txt").coefficients, ffd.coefficients))
    return out


def test_criterion_7_property_suite(report, tmp_path):
    t0 = time.perf_counter()
    results = _property_suite(tmp_path)
    seconds = time.perf_counter() - t0
    failed = [k for k, v in results.items() if not v]
    ok = not failed and seconds < 60
    report(7, "numerical property suite", ok,
           f"{len(results) - len(failed)}/{len(results)} property groups hold, {seconds:.1f} s"
           + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion_8_determinism(report, tmp_path):
    def cli(*args):
        subprocess.run([sys.executable, "-m", "petreg", *args], check=True, capture_output=True)

    cli("phantom", "--out-dir", str(tmp_path / "ph"), "--seed", "3", "--warp-max", "2")
    for run in ("r1", "r2"):
        cli("register", "--fixed", str(tmp_path / "ph" / "mri.mhd"), "--moving", str(tmp_path / "ph" / "pet.mhd"),
            "--out-dir", str(tmp_path / run), "--seed", "0", "--threads", "1")
    same = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
               for f in ("affine.txt", "bspline.txt"))
    report(8, "determinism", same, "affine.txt and bspline.txt byte-identical across two runs" if same
           else "transform files differ between runs")
    assert same
