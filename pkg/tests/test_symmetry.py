import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_row
from symdepth import rectify, symmetry, synth
from symdepth.imaging import CorrespondenceSet
from symdepth.symmetry import FilterConfig, MatcherConfig

MIRROR_CONSISTENT = synth.CameraRanges(yaw_deg=(0, 0), roll_deg=(0, 0), tx_jitter=(0, 0))


def test_filter_chain_fixture():
    pairs = CorrespondenceSet([[10, 5], [100, 5]], [[100, 5], [12, 5]])
    kept = symmetry.consistency_filter(pairs)
    np.testing.assert_array_equal(kept.p, [[10, 5]])
    np.testing.assert_array_equal(kept.q, [[100, 5]])


def test_filter_drops_large_closing_error_and_missing_chain():
    pairs = CorrespondenceSet([[10, 5], [100, 5], [40, 9]], [[100, 5], [30, 5], [70, 9]])
    err = symmetry.cycle_errors(pairs)
    assert err[0] == pytest.approx(20.0)
    assert np.isinf(err[2])
    assert len(symmetry.consistency_filter(pairs)) == 0


def test_filter_chain_radius():
    base = CorrespondenceSet([[10, 5], [100.9, 5]], [[100, 5], [11, 5]])
    assert len(symmetry.consistency_filter(base)) == 2
    # (100,5) has no source within 1 px; the second pair still chains through (10,5)
    far = CorrespondenceSet([[10, 5], [101.2, 5]], [[100, 5], [11, 5]])
    kept = symmetry.consistency_filter(far)
    np.testing.assert_array_equal(kept.p, [[101.2, 5]])


def test_nearest_rule_uses_only_nearest_source():
    # the nearest source to (100,5) closes badly, a second one closes well
    pairs = CorrespondenceSet([[10, 5], [100.2, 5], [100.8, 5]], [[100, 5], [40, 5], [11, 5]])
    assert symmetry.cycle_errors(pairs, "nearest")[0] == pytest.approx(30.0)
    assert symmetry.cycle_errors(pairs, "any")[0] == pytest.approx(1.0)


def test_filter_empty_and_config_validation():
    assert len(symmetry.consistency_filter(CorrespondenceSet())) == 0
    with pytest.raises(ValueError):
        FilterConfig(cycle_threshold=0)
    with pytest.raises(ValueError):
        FilterConfig(chain_rule="first")
    with pytest.raises(ValueError):
        MatcherConfig(patch_radius=0)


coords = st.floats(0, 60, allow_nan=False)


@given(st.lists(st.tuples(coords, coords, coords, coords), max_size=40), st.floats(0.5, 20))
def test_filter_is_subset_and_threshold_monotone(rows, thr):
    a = np.array(rows, dtype=float).reshape(-1, 4)
    pairs = CorrespondenceSet(a[:, :2], a[:, 2:])
    small = symmetry.consistency_filter(pairs, FilterConfig(thr))
    large = symmetry.consistency_filter(pairs, FilterConfig(thr * 2))
    assert len(small) <= len(large) <= len(pairs)
    keys = {tuple(r) for r in np.hstack([large.p, large.q])}
    assert all(tuple(r) in keys for r in np.hstack([small.p, small.q]))


@given(st.lists(st.tuples(coords, coords, coords, coords), min_size=1, max_size=30))
def test_exact_mirror_pairs_survive(rows):
    a = np.array(rows, dtype=float)
    pairs = CorrespondenceSet(np.vstack([a[:, :2], a[:, 2:]]), np.vstack([a[:, 2:], a[:, :2]]))
    err = symmetry.cycle_errors(pairs)
    assert np.all(err <= 2 * symmetry.CHAIN_RADIUS + 1e-9)


def test_ground_truth_pairs_pass_filter(small_scenes):
    for sc in small_scenes:
        kept = symmetry.consistency_filter(sc.correspondences)
        assert len(kept) == len(sc.correspondences)


def test_constant_row_has_no_matches():
    img = np.tile(np.linspace(0, 1, 40), (20, 1))
    img[10] = 0.5
    img[5:16] = 0.5
    mask = np.ones_like(img, bool)
    flow = symmetry.match_scanlines(img, mask, MatcherConfig(patch_radius=2))
    assert not flow.valid[10].any()


def _scene_rectified(i, size=48):
    sc = synth.generate_scene(synth.FAMILIES[i % 3], i, 11, size=(size, size), ranges=MIRROR_CONSISTENT)
    t = rectify.build_transform(sc.camera, sc.width, sc.height, sc.mask)
    ri, rm = rectify.rectify_image(sc.intensity, sc.mask, t)
    return sc, t, ri, rm


@pytest.fixture(scope="module")
def rectified_scenes():
    return [_scene_rectified(i) for i in range(3)]


@pytest.mark.parametrize("search", [4, 10, None])
def test_flow_bounded_by_search_radius(rectified_scenes, search):
    cfg = MatcherConfig(patch_radius=3, search_radius=search)
    for _, _, ri, rm in rectified_scenes:
        flow = symmetry.match_scanlines(ri, rm, cfg)
        bound = cfg.resolved_search_radius(ri.shape[1]) + 1
        assert np.all(np.abs(flow.flow[flow.valid]) <= bound)
        assert np.all(flow.flow[~flow.valid] == 0)


@settings(max_examples=10)
@given(st.integers(0, 2), st.integers(2, 4), st.sampled_from([5, 15, None]))
def test_matcher_equals_brute_force(rectified_scenes, idx, r, search):
    _, _, ri, rm = rectified_scenes[idx]
    cfg = MatcherConfig(patch_radius=r, search_radius=search)
    flow = symmetry.match_scanlines(ri, rm, cfg)
    s = cfg.resolved_search_radius(ri.shape[1])
    for row in range(0, ri.shape[0], 3):
        bf, bv = brute_force_row(ri, rm, row, r, s, cfg.min_contrast, cfg.zncc_accept, cfg.lr_tolerance)
        np.testing.assert_array_equal(bv, flow.valid[row])
        np.testing.assert_allclose(bf, flow.flow[row], atol=1e-9)


def test_matches_agree_with_ground_truth(rectified_scenes):
    for sc, t, ri, rm in rectified_scenes:
        flow = symmetry.match_scanlines(ri, rm, MatcherConfig(patch_radius=3))
        gt = synth.ground_truth_flow(sc, t)
        both = flow.valid & gt.valid
        assert flow.valid.sum() > 100
        assert np.mean(np.abs(flow.flow[both] - gt.flow[both]) <= 1.0) >= 0.99


def test_thread_count_does_not_change_output(rectified_scenes):
    _, _, ri, rm = rectified_scenes[1]
    a = symmetry.match_scanlines(ri, rm, threads=1)
    b = symmetry.match_scanlines(ri, rm, threads=3)
    np.testing.assert_array_equal(a.flow, b.flow)
    np.testing.assert_array_equal(a.valid, b.valid)


def test_mirrored_image_reverses_flow(rectified_scenes):
    _, _, ri, rm = rectified_scenes[0]
    a = symmetry.match_scanlines(ri, rm)
    b = symmetry.match_scanlines(ri[:, ::-1], rm[:, ::-1])
    np.testing.assert_array_equal(a.valid, b.valid[:, ::-1])
    np.testing.assert_allclose(a.flow, -b.flow[:, ::-1], atol=1e-9)
