"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import time

import numpy as np
from scipy.spatial import cKDTree

from conftest import record_acceptance
from oracles import brute_force_row, dense_gn_step
from symdepth import geometry as geo
from symdepth import imaging, metrics, rectify, symmetry, synth
from symdepth.imaging import CorrespondenceSet
from symdepth.solver import (
    SolverConfig,
    Tradeoffs,
    Weights,
    build_problem,
    gauss_newton_step,
    refine,
)

FAMILIES = synth.FAMILIES


def _rel(pred, gt, mask):
    return float(np.mean(np.abs(pred[mask] - gt[mask]) / gt[mask]))


# ---------------------------------------------------------------------------
# 1. one Gauss-Newton step against a dense complex-step solve
# ---------------------------------------------------------------------------


def _random_instance(seed):
    """Random masked 8x8 problem; redrawn until some symmetric pairs survive."""
    rng = np.random.default_rng(seed)
    while True:
        inst = _draw_instance(rng)
        if inst[0].m >= 2:
            return inst


def _draw_instance(rng):
    mask = rng.random((8, 8)) < 0.8
    mask[2:6, 2:6] = True
    depth = np.where(mask, rng.uniform(2, 4, (8, 8)), 0.0)
    n = rng.normal(size=(8, 8, 3))
    n[..., 2] = -np.abs(n[..., 2]) - 0.5
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    rows, cols = np.nonzero(mask)
    k = rng.integers(0, len(rows), size=(12, 2))
    p = np.stack([cols[k[:, 0]], rows[k[:, 0]]], 1) + rng.uniform(0, 0.3, (12, 2))
    q = np.stack([cols[k[:, 1]], rows[k[:, 1]]], 1) + rng.uniform(0, 0.3, (12, 2))
    cam = geo.CameraPose(geo.exp_map(rng.normal(size=3) * 0.4), rng.normal() * 0.1, rng.uniform(0.4, 0.8))
    lam, mu = rng.uniform(0.2, 2, 2)
    prob = build_problem(depth, n, mask, CorrespondenceSet(p, q), cam, lam, mu, subsample=False)
    z = depth[mask] * np.exp(rng.normal(0, 0.1, prob.n))
    w = Weights(rng.uniform(0.1, 1, prob.n), rng.uniform(0.1, 1, len(prob.edges)), rng.uniform(0.1, 1, prob.m), 1.0)
    return prob, z, cam, w


def test_acceptance_1_gauss_newton_oracle():
    instances = [_random_instance(seed) for seed in range(20)]
    worst = 0.0
    t0 = time.perf_counter()
    mine = []
    for prob, z, cam, w in instances:
        cfg = SolverConfig(Tradeoffs(prob.lam, prob.mu))
        inc, _ = gauss_newton_step(prob, z, cam, w, cfg)
        mine.append(np.concatenate([inc.dz, inc.c[1:], [inc.dt_x, inc.ds]]))
    elapsed = time.perf_counter() - t0
    for (prob, z, cam, w), x in zip(instances, mine):
        ref = dense_gn_step(prob, z, cam, w.w_p, w.w_e, w.w_c, SolverConfig().damping)
        err = np.abs(x - ref) / np.abs(ref)
        worst = max(worst, float(err.max()))
    ok = worst <= 1e-8 and elapsed < 1.0
    record_acceptance(1, ok, f"max relative deviation {worst:.2e} (<= 1e-8), 20 steps in {elapsed:.3f} s (< 1 s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. noise-free fixed point
# ---------------------------------------------------------------------------


def test_acceptance_2_noise_free_fixed_point():
    worst_rel, worst_cam, monotone = 0.0, 0.0, True
    for i in range(10):
        sc = synth.generate_scene("box-union", i, 21)
        z, cam, rep = refine(sc.depth, sc.normals, sc.mask, sc.correspondences, sc.camera)
        worst_rel = max(worst_rel, _rel(z, sc.depth, sc.mask))
        cam_err = max(
            float(np.abs(cam.rotation - sc.camera.rotation).max()),
            abs(cam.t_x - sc.camera.t_x),
            abs(cam.s - sc.camera.s),
        )
        worst_cam = max(worst_cam, cam_err)
        monotone &= bool(np.all(np.diff(rep.objective_trace) <= 0))
    ok = worst_rel <= 1e-6 and worst_cam <= 1e-6 and monotone
    record_acceptance(2, ok, f"max rel {worst_rel:.2e} (<= 1e-6), max camera deviation {worst_cam:.2e} (<= 1e-6), traces non-increasing: {monotone}")
    assert ok


# ---------------------------------------------------------------------------
# 3. symmetry improves depth on the standard dataset
# ---------------------------------------------------------------------------


def test_acceptance_3_symmetry_improves_depth():
    initial, with_sym, without_sym, times = [], [], [], []
    for i in range(50):
        sc = synth.generate_scene(FAMILIES[i % 3], i, 0)
        deg = synth.corrupt(sc, synth.NoiseSpec(seed=1))
        corr = symmetry.consistency_filter(deg.correspondences)
        initial.append(_rel(deg.depth, sc.depth, sc.mask))
        for mu, out in ((1.0, with_sym), (0.0, without_sym)):
            t0 = time.perf_counter()
            z, _, _ = refine(deg.depth, deg.normals, deg.mask, corr, deg.camera, SolverConfig(Tradeoffs(1.0, mu)))
            if mu:
                times.append(time.perf_counter() - t0)
            out.append(_rel(z, sc.depth, sc.mask))
    m0, m1, ma = np.mean(initial), np.mean(with_sym), np.mean(without_sym)
    reduction = 1 - m1 / m0
    ok = reduction >= 0.10 and m1 < ma and max(times) < 5.0
    record_acceptance(
        3, ok,
        f"mean rel initial {m0:.4f} -> mu=1 {m1:.4f} ({100 * reduction:.1f}% lower, >= 10%), mu=0 {ma:.4f}, slowest solve {max(times):.2f} s (< 5 s)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 4. rectified scanline property
# ---------------------------------------------------------------------------


def test_acceptance_4_scanline_property():
    fractions = []
    for i in range(50):
        sc = synth.generate_scene(FAMILIES[i % 3], i, 7, size=(96, 96))
        tr = rectify.build_transform(sc.camera, sc.width, sc.height, sc.mask)
        assert not tr.degenerate
        a = tr.forward(sc.correspondences.p)
        b = tr.forward(sc.correspondences.q)
        fractions.append(np.mean(np.abs(a[:, 1] - b[:, 1]) <= 0.5))
    ok = min(fractions) >= 0.95
    record_acceptance(4, ok, f"fraction of pairs within 0.5 px of a common row: min {min(fractions):.4f}, mean {np.mean(fractions):.4f} (>= 0.95)")
    assert ok


# ---------------------------------------------------------------------------
# 5. matcher sanity on mirror-consistent scenes
# ---------------------------------------------------------------------------

# Pitch-only cameras (no yaw, roll or lateral offset): the reflection commutes
# with the projection, so the rendered image is exactly mirror-symmetric.
MIRROR_CONSISTENT = synth.CameraRanges(yaw_deg=(0, 0), roll_deg=(0, 0), tx_jitter=(0, 0))


def _rectified(sc):
    tr = rectify.build_transform(sc.camera, sc.width, sc.height, sc.mask)
    ri, rm = rectify.rectify_image(sc.intensity, sc.mask, tr)
    return tr, ri, rm


def test_acceptance_5_matcher_sanity():
    good = emitted = 0
    for i in range(12):
        sc = synth.generate_scene(FAMILIES[i % 3], i, 11, ranges=MIRROR_CONSISTENT)
        tr, ri, rm = _rectified(sc)
        flow = symmetry.match_scanlines(ri, rm)
        gt = synth.ground_truth_flow(sc, tr)
        close = flow.valid & gt.valid & (np.abs(flow.flow - gt.flow) <= 1.0)
        good += int(close.sum())
        emitted += int(flow.valid.sum())
    accuracy = good / emitted

    cfg = symmetry.MatcherConfig(patch_radius=3)
    flag_diff, flow_diff = 0, 0.0
    for i, fam in enumerate(FAMILIES):
        sc = synth.generate_scene(fam, i, 11, size=(48, 48), ranges=MIRROR_CONSISTENT)
        _, ri, rm = _rectified(sc)
        flow = symmetry.match_scanlines(ri, rm, cfg)
        search = cfg.resolved_search_radius(ri.shape[1])
        for row in range(ri.shape[0]):
            bf, bv = brute_force_row(ri, rm, row, cfg.patch_radius, search, cfg.min_contrast, cfg.zncc_accept, cfg.lr_tolerance)
            flag_diff += int((bv != flow.valid[row]).sum())
            flow_diff = max(flow_diff, float(np.abs(bf - flow.flow[row]).max()))
    # the oracle sums in a different order, so flows agree to rounding only
    ok = accuracy >= 0.99 and flag_diff == 0 and flow_diff <= 1e-9
    record_acceptance(
        5, ok,
        f"{100 * accuracy:.2f}% of {emitted} matches within 1 px (>= 99%); brute-force oracle: {flag_diff} validity mismatches, max flow difference {flow_diff:.1e}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. consistency filter with injected outliers
# ---------------------------------------------------------------------------


def ground_truth_cycle_error(noisy: CorrespondenceSet, gt: CorrespondenceSet) -> np.ndarray:
    """Close each noisy pair (a, b) through the true pair whose source is nearest b (within 1 px)."""
    d, j = cKDTree(gt.p).query(noisy.q, k=1, distance_upper_bound=1.0)
    err = np.full(len(noisy), np.inf)
    found = np.isfinite(d)
    err[found] = np.linalg.norm(noisy.p[found] - gt.q[j[found]], axis=1)
    return err


def test_acceptance_6_filter_behavior():
    cfg = symmetry.FilterConfig()
    retention, decreased = [], True
    before_all, after_all = [], []
    for i in range(20):
        sc = synth.generate_scene(FAMILIES[i % 3], i, 3)
        deg = synth.corrupt(sc, synth.NoiseSpec(corr_outlier_frac=0.2, seed=5))
        c = deg.correspondences
        inlier = ground_truth_cycle_error(c, sc.correspondences) <= cfg.cycle_threshold
        keep = symmetry.cycle_errors(c, cfg.chain_rule) <= cfg.cycle_threshold
        assert len(symmetry.consistency_filter(c, cfg)) == keep.sum()
        retention.append(keep[inlier].mean())
        err = np.linalg.norm(c.q - sc.correspondences.q, axis=1)
        before_all.append(err.mean())
        after_all.append(err[keep].mean())
        decreased &= bool(err[keep].mean() < err.mean())
    r = float(np.mean(retention))
    ok = r >= 0.95 and decreased
    record_acceptance(
        6, ok,
        f"inlier retention mean {r:.4f}, min {min(retention):.4f} (>= 0.95); mean pixel error {np.mean(before_all):.2f} -> {np.mean(after_all):.2f}, decreased on every scene: {decreased}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. metric exactness
# ---------------------------------------------------------------------------


def test_acceptance_7_metric_exactness():
    rng = np.random.default_rng(7)
    gt = rng.uniform(1, 5, (32, 32))
    mask = rng.random((32, 32)) < 0.7
    si = metrics.depth_metrics(np.e * gt, gt, mask).scale_invariant

    qa = rng.normal(size=4)
    qa /= np.linalg.norm(qa)
    q = geo.CameraPose.from_quaternion(qa, 0.3, 0.6)
    neg = geo.CameraPose.from_quaternion(-qa, 0.3, 0.6)
    pose = metrics.pose_metrics(neg, q, 1.0)

    n = rng.normal(size=(32, 32, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    perp = np.cross(n, rng.normal(size=(32, 32, 3)))
    perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
    rotated = synth.rotate_about(n, perp, np.full((32, 32), np.radians(10.0)))
    ang = metrics.normal_metrics(rotated, n, mask).mean_angle_deg

    ok = abs(si - 0.5) <= 1e-12 and pose.rot_err_deg == 0.0 and abs(ang - 10.0) <= 1e-9
    record_acceptance(7, ok, f"scale-invariant |{si!r} - 0.5| <= 1e-12; q vs -q rotation error {pose.rot_err_deg}; 10 deg normal rotation -> {ang!r}")
    assert ok


# ---------------------------------------------------------------------------
# 8. numerical hygiene
# ---------------------------------------------------------------------------


def _orth_err(R):
    return float(np.abs(R.T @ R - np.eye(3)).max())


def _quat_rotation(c):
    """Rotation by the axis-angle vector ``c`` via a unit quaternion."""
    th = np.linalg.norm(c)
    if th == 0:
        return np.eye(3)
    a = c / th
    q = np.concatenate([[np.cos(th / 2)], a * np.sin(th / 2)])
    return geo.quat_to_rotation(q)


def test_acceptance_8_numerical_hygiene(tmp_path):
    # solver iterates
    sc = synth.generate_scene("mirrored-superellipsoid-union", 4, 2, size=(48, 48))
    deg = synth.corrupt(sc, synth.NoiseSpec(seed=3))
    corr = symmetry.consistency_filter(deg.correspondences)
    orth = []
    cfg = SolverConfig(max_outer_iters=100, converge_tol=1e-300)
    _, _, rep = refine(deg.depth, deg.normals, deg.mask, corr, deg.camera, cfg, callback=lambda k, z, cam: orth.append(_orth_err(cam.rotation)))
    # 100 composed exponential-map updates independent of early stopping
    rng = np.random.default_rng(8)
    R = deg.camera.rotation
    for _ in range(100):
        R = geo.exp_map(rng.normal(0, 0.3, 3)) @ R
        orth.append(_orth_err(R))
    solver_orth = max(orth)

    cs = rng.normal(size=(10_000, 3)) * rng.uniform(0, np.pi, (10_000, 1)) / np.sqrt(3)
    cross = max(float(np.abs(geo.exp_map(c) - _quat_rotation(c)).max()) for c in cs)

    # file round trips: write, read, write again; compare bytes and values
    sc2 = synth.generate_scene("box-union", 0, 9, size=(40, 32))
    scored = CorrespondenceSet(sc2.correspondences.p, sc2.correspondences.q, rng.random(len(sc2.correspondences)))
    sc2.correspondences = scored
    m1 = imaging.save_scene(sc2, tmp_path / "a")
    back = imaging.load_scene(m1)
    m2 = imaging.save_scene(back, tmp_path / "b")
    files = list(imaging.DEFAULT_FILES.values()) + ["manifest.json"]
    bytes_equal = all((m1.parent / f).read_bytes() == (m2.parent / f).read_bytes() for f in files)
    again = imaging.load_scene(m2)
    values_equal = (
        np.array_equal(back.depth, again.depth)
        and np.array_equal(back.normals, again.normals)
        and np.array_equal(back.mask, sc2.mask)
        and np.array_equal(back.depth, sc2.depth.astype(np.float32))
        and np.array_equal(back.correspondences.p, scored.p)
        and np.array_equal(back.correspondences.q, scored.q)
        and np.array_equal(back.correspondences.score, scored.score)
        and back.camera.t_x == sc2.camera.t_x
        and back.camera.s == sc2.camera.s
    )
    ok = solver_orth <= 1e-9 and cross <= 1e-10 and bytes_equal and values_equal
    record_acceptance(
        8, ok,
        f"orthonormality error {solver_orth:.1e} over {rep.gn_steps} solver steps + 100 compositions (<= 1e-9); exp/quaternion max difference {cross:.1e} (<= 1e-10); round trips bit-exact: {bytes_equal and values_equal}",
    )
    assert ok
