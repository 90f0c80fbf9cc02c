import json

import numpy as np
import pytest

from graspforge.aggregate import (AggregationConfig, aggregate_full, aggregate_hand_level, hand_physics_scores,
                                  object_physics_scores, physics_aggregate_hand, physics_aggregate_object, top_k,
                                  visual_aggregate_hand, visual_aggregate_object, visual_score_hand,
                                  visual_score_object, weighted_mean)
from graspforge.errors import AllAnchorsFrozen, DimensionMismatch, InvalidParameter
from graspforge.force import GlobalForceField
from graspforge.geom import aa_to_matrix, canonical_aa, geodesic_angle, project_points
from graspforge.hand import HandPose, forward_kinematics, forward_kinematics_batch, joint_hierarchy, skin_mesh
from graspforge.heatmap import HeatmapConfig, HeatmapStack, render_from_image
from graspforge.mesh import bbox_keypoints_27, signed_distance
from graspforge.physics import contact_residual, torque_residual
from graspforge.sample import NoiseSpec, perturbation_sampler
from graspforge.scenario import GRASP_TEMPLATES
from graspforge.schema_io import validate
from graspforge.solve import SolverConfig, solve_pseudo_forces

from conftest import canonical, random_rotations


def hand_heatmaps(scn, pose=None):
    uv, _ = project_points(forward_kinematics(pose or scn.pose, scn.shape), scn.intrinsics)
    return render_from_image(uv)


def object_heatmaps(scn):
    kp = bbox_keypoints_27(scn.object_mesh())
    uv, _ = project_points(kp @ scn.R.T + scn.T, scn.intrinsics)
    return render_from_image(uv)


def mje(scn, theta):
    kp = forward_kinematics_batch(theta, scn.pose.trans, scn.shape)
    return np.linalg.norm(kp - scn.hand_keypoints(), axis=-1).mean(axis=-1)


# ------------------------------------------------------------ selection primitives

def test_top_k_matches_sort_with_ties(rng):
    for _ in range(200):
        n = rng.integers(1, 40)
        s = rng.integers(0, 5, n).astype(float)
        k = rng.integers(1, n + 1)
        ref = sorted(range(n), key=lambda i: (-s[i], i))[:k]
        assert top_k(s, k).tolist() == ref


def test_top_k_skips_neg_inf_and_rejects_nan():
    assert top_k([-np.inf, 1.0, -np.inf, 0.5], 3).tolist() == [1, 3]
    assert top_k([-np.inf, -np.inf], 2).tolist() == []
    with pytest.raises(InvalidParameter):
        top_k([1.0, np.nan], 1)


def test_weighted_mean():
    m, fb = weighted_mean([[1.0], [5.0]], [1.0, 3.0])
    assert m[0] == 4.0 and not fb
    m, fb = weighted_mean([[1.0], [5.0]], [0.0, 0.0])
    assert m[0] == 3.0 and fb


def test_config_validation():
    with pytest.raises(InvalidParameter):
        AggregationConfig(n=10, k_hand=30)
    with pytest.raises(InvalidParameter):
        AggregationConfig(k_phy_obj=0)
    cfg = AggregationConfig(n=20, k_hand=7, physics=False)
    assert AggregationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_default_top_k_sizes():
    cfg = AggregationConfig()
    assert (cfg.n, cfg.k_hand, cfg.k_obj_trans, cfg.k_obj_rot, cfg.k_phy_hand, cfg.k_phy_obj) == (100, 30, 10, 10, 5, 5)
    assert cfg.hand_solver.phase1_steps == 300 and cfg.hand_solver.phase2_steps == 0


# ------------------------------------------------------------ visual scores

@pytest.fixture(scope="module")
def pinch():
    return canonical("pinch-sphere")


def test_visual_score_self_consistent(pinch):
    # bilinear lookup between pixel-centred Gaussian samples loses at most
    # 1 - exp(-1 / (4 sigma^2)) of the peak per keypoint
    h = joint_hierarchy()
    for sig, tol in ((3.0, 0.05), (2.0, 1 - np.exp(-1 / 16))):
        uv, _ = project_points(pinch.hand_keypoints(), pinch.intrinsics)
        hm = render_from_image(uv, HeatmapConfig(sigma=sig))
        for j in range(16):
            n = len(h.children[j])
            s = visual_score_hand(pinch.pose.theta, j, hm, pinch.intrinsics, pinch.shape, pinch.pose.trans)
            assert n * (1 - tol) <= s <= n


def test_visual_score_zero_heatmaps(pinch):
    hm = HeatmapStack(np.zeros((21, 64, 64)))
    assert visual_score_hand(pinch.pose.theta, 0, hm, pinch.intrinsics, pinch.shape, pinch.pose.trans) == 0.0


def test_visual_score_wrong_channel_count(pinch):
    with pytest.raises(DimensionMismatch):
        visual_score_hand(pinch.pose.theta, 0, HeatmapStack(np.zeros((27, 64, 64))), pinch.intrinsics, pinch.shape)


def test_visual_score_peak_ordering(pinch):
    hm = hand_heatmaps(pinch)
    # shift the whole hand 5 cm sideways: every keypoint lands far from its peak
    far = visual_score_hand(pinch.pose.theta, 0, hm, pinch.intrinsics, pinch.shape, pinch.pose.trans + [0.05, 0, 0])
    near = visual_score_hand(pinch.pose.theta, 0, hm, pinch.intrinsics, pinch.shape, pinch.pose.trans)
    assert far < 0.01 * near


def test_visual_score_behind_camera_contributes_zero(pinch):
    hm = HeatmapStack(np.ones((21, 64, 64)))
    s = visual_score_hand(pinch.pose.theta, 0, hm, pinch.intrinsics, pinch.shape, pinch.pose.trans - [0, 0, 2.0])
    assert s == 0.0


# ------------------------------------------------------------ hand visual aggregation

def test_level_identical_is_noop(rng):
    th = np.repeat(rng.normal(scale=0.3, size=(1, 16, 3)), 6, axis=0)
    out, recs = aggregate_hand_level(th, (1, 4), rng.random((6, 2)), 3)
    assert np.allclose(out, th, atol=1e-15)
    assert np.allclose(recs[0]["value"], th[0, 1])


def test_level_weighted_two_candidates():
    a, b = np.array([0.1, 0.2, -0.3]), np.array([0.5, -0.1, 0.2])
    th = np.zeros((2, 16, 3))
    th[0, 2], th[1, 2] = a, b
    out, recs = aggregate_hand_level(th, (2,), [[1.0], [3.0]], 2)
    assert np.allclose(recs[0]["value"], (a + 3 * b) / 4)
    assert np.allclose(out[:, 2], (a + 3 * b) / 4)


def test_level_selection_oracle(rng):
    for _ in range(50):
        n = rng.integers(2, 30)
        k = rng.integers(1, n + 1)
        th = rng.normal(scale=0.4, size=(n, 16, 3))
        sc = rng.integers(1, 4, (n, 5)).astype(float)
        out, recs = aggregate_hand_level(th, (1, 4, 7, 10, 13), sc, k)
        for col, r in enumerate(recs):
            sel = sorted(range(n), key=lambda i: (-sc[i, col], i))[:k]
            assert r["selected"].tolist() == sel
            expect = (sc[sel, col][:, None] * canonical_aa(th[sel, r["joint"]])).sum(0) / sc[sel, col].sum()
            assert np.allclose(r["value"], expect)


def test_level_zero_scores_fallback(rng):
    th = rng.normal(scale=0.3, size=(4, 16, 3))
    _, recs = aggregate_hand_level(th, (1,), np.zeros((4, 1)), 2)
    assert recs[0]["fallback"] and np.allclose(recs[0]["value"], canonical_aa(th[:2, 1]).mean(0))


def test_va_single_candidate(pinch):
    res = visual_aggregate_hand(pinch.pose.theta[None], pinch.pose.trans, hand_heatmaps(pinch), pinch.intrinsics,
                                pinch.shape, k=30)
    assert np.allclose(res.theta, canonical_aa(pinch.pose.theta), atol=1e-15)


def test_va_improves_over_candidates():
    wins = 0
    for seed in range(100):
        scn = canonical(GRASP_TEMPLATES[seed % 4], seed // 4)
        cs = perturbation_sampler(scn.pose.theta, NoiseSpec(0.1), 100, seed=seed)
        th = cs.hand_theta()
        res = visual_aggregate_hand(th, scn.pose.trans, hand_heatmaps(scn), scn.intrinsics, scn.shape)
        wins += mje(scn, res.theta) <= mje(scn, th).mean()
    assert wins == 100


def test_va_level_order_matters(pinch, rng):
    # an asymmetric set: wrist rotations are heavily perturbed, fingers lightly
    th = np.repeat(pinch.pose.theta[None], 20, axis=0)
    th[:, 0] = canonical_aa(pinch.pose.theta[0] + rng.normal(scale=0.2, size=(20, 3)))
    th[:, 1:] += rng.normal(scale=0.15, size=(20, 15, 3))
    hm = hand_heatmaps(pinch)
    fwd = visual_aggregate_hand(th, pinch.pose.trans, hm, pinch.intrinsics, pinch.shape, k=5)
    rev = visual_aggregate_hand(th, pinch.pose.trans, hm, pinch.intrinsics, pinch.shape, k=5, level_order=(3, 2, 1, 0))
    assert np.max(np.abs(fwd.theta - rev.theta)) > 1e-3
    assert mje(pinch, fwd.theta) < mje(pinch, rev.theta)


def test_va_level4_snapshot(pinch, rng):
    th = pinch.pose.theta[None] + rng.normal(scale=0.1, size=(12, 16, 3))
    res = visual_aggregate_hand(th, pinch.pose.trans, hand_heatmaps(pinch), pinch.intrinsics, pinch.shape, k=4)
    l4 = list(joint_hierarchy().levels[3])
    assert sorted(res.level4_sets) == sorted(l4) and all(len(s) == 4 for s in res.level4_sets.values())
    assert np.allclose(res.level4_values[:, l4], th[:, l4])     # level 4 untouched before its own pass
    for lv in range(3):
        for j in joint_hierarchy().levels[lv]:
            assert np.allclose(res.level4_values[:, j], res.theta[j])


# ------------------------------------------------------------ object visual aggregation

def test_object_va_all_gt(pinch):
    kp = bbox_keypoints_27(pinch.object_mesh())
    R = np.repeat(pinch.R[None], 8, axis=0)
    T = np.repeat(pinch.T[None], 8, axis=0)
    res = visual_aggregate_object(R, T, object_heatmaps(pinch), pinch.intrinsics, kp)
    assert np.max(np.abs(res.R - pinch.R)) < 1e-9 and np.max(np.abs(res.T - pinch.T)) < 1e-9


def test_object_va_translation_improves(rng):
    for seed in range(20):
        scn = canonical(GRASP_TEMPLATES[seed % 4], seed)
        T = scn.T + rng.normal(scale=0.01, size=(100, 3))
        T[0] = scn.T
        R = np.repeat(scn.R[None], 100, axis=0)
        res = visual_aggregate_object(R, T, object_heatmaps(scn), scn.intrinsics, bbox_keypoints_27(scn.object_mesh()))
        assert np.linalg.norm(res.T - scn.T) <= np.linalg.norm(T - scn.T, axis=1).mean()


def test_object_va_symmetric_rotation_pair(pinch):
    kp = bbox_keypoints_27(pinch.object_mesh())
    hm = HeatmapStack(np.ones((27, 64, 64)))     # flat maps: equal scores
    for deg in (5, 15, 30):
        a = np.radians(deg)
        R = aa_to_matrix([[0, 0, a], [0, 0, -a]]) @ pinch.R
        res = visual_aggregate_object(R, np.repeat(pinch.T[None], 2, 0), hm, pinch.intrinsics, kp)
        assert geodesic_angle(res.R, pinch.R) < 1e-6


def test_object_score_channel_check(pinch):
    with pytest.raises(DimensionMismatch):
        visual_score_object(pinch.R, pinch.T, HeatmapStack(np.zeros((21, 64, 64))), pinch.intrinsics,
                            bbox_keypoints_27(pinch.object_mesh()))


# ------------------------------------------------------------ physics aggregation

def test_physics_hand_zero_score_dominates(rng):
    th = rng.normal(size=(6, 16, 3)) * 0.2
    sets = {3: np.arange(6)}
    scores = {0: -1.0, 1: -0.5, 2: 0.0, 3: -2.0, 4: -0.1, 5: -3.0}
    out, recs = physics_aggregate_hand(np.zeros((16, 3)), th, sets, scores, 1)
    assert recs[0]["selected"].tolist() == [2]
    assert np.allclose(out[3], canonical_aa(th[2, 3]))


def test_physics_hand_equal_scores_unweighted(rng):
    th = rng.normal(size=(6, 16, 3)) * 0.2
    sets = {3: np.array([5, 1, 4, 0])}
    out, recs = physics_aggregate_hand(np.zeros((16, 3)), th, sets, {i: -1.0 for i in range(6)}, 2)
    assert recs[0]["selected"].tolist() == [5, 1]
    assert np.allclose(out[3], canonical_aa(th[[5, 1], 3]).mean(0))


def test_physics_hand_all_frozen_keeps_visual(rng):
    th = rng.normal(size=(3, 16, 3))
    va = rng.normal(size=(16, 3))
    out, recs = physics_aggregate_hand(va, th, {6: np.arange(3)}, {i: -np.inf for i in range(3)}, 2)
    assert np.array_equal(out, va) and recs[0]["fallback"]


@pytest.fixture(scope="module")
def pinch_candidates():
    scn = canonical("pinch-sphere")
    th = perturbation_sampler(scn.pose.theta, NoiseSpec(0.1), 20, seed=1).hand_theta()
    return scn, th


def test_hand_physics_scores_oracle(pinch_candidates):
    scn, th = pinch_candidates
    mesh = scn.object_mesh_camera()
    cfg = SolverConfig(phase2_steps=0)
    sc, Lf, Lc = hand_physics_scores(th, scn.pose.trans, scn.shape, mesh, scn.gravity, cfg)
    ref = []
    for t in th:
        try:
            rep = solve_pseudo_forces(HandPose(t, scn.pose.trans), scn.shape, mesh, scn.gravity_force, cfg)
            ref.append(-rep.residuals.L_force * rep.residuals.L_contact)
        except AllAnchorsFrozen:
            ref.append(-np.inf)
    ref = np.array(ref)
    assert np.isfinite(ref).sum() >= 5
    assert np.allclose(sc, ref, rtol=1e-8, atol=1e-14)
    fin = np.sort(ref[np.isfinite(ref)])
    if np.min(np.diff(fin)) > 1e-8 * np.max(np.abs(fin)):
        assert top_k(sc, 5).tolist() == top_k(ref, 5).tolist()


def test_hand_physics_scores_thread_invariant(pinch_candidates):
    scn, th = pinch_candidates
    th = np.concatenate([th, th])   # more than one chunk
    a = hand_physics_scores(th, scn.pose.trans, scn.shape, scn.object_mesh_camera(), scn.gravity)[0]
    b = hand_physics_scores(th, scn.pose.trans, scn.shape, scn.object_mesh_camera(), scn.gravity, threads=4)[0]
    assert np.array_equal(a, b)


def test_hand_physics_scores_frozen_is_neg_inf(pinch_candidates):
    scn, th = pinch_candidates
    sc, _, _ = hand_physics_scores(th[:2], scn.pose.trans + [0, 0, 0.5], scn.shape, scn.object_mesh_camera(),
                                   scn.gravity)
    assert np.all(sc == -np.inf)


def test_object_physics_scores_oracle(pinch, rng):
    rep = solve_pseudo_forces(pinch.pose, pinch.shape, pinch.object_mesh_camera(), pinch.gravity_force)
    F, O = rep.field.forces, rep.field.positions
    local = pinch.object_mesh()
    R = random_rotations(rng, 4) @ pinch.R
    T = pinch.T + rng.normal(scale=0.003, size=(4, 3))
    sc, Lt, Lc = object_physics_scores(R, T, F, O, local)
    for i in range(4):
        m = local.transformed(R[i], T[i])
        fld = GlobalForceField(O, F)
        lt = torque_residual(fld, m.centroid)
        lc = contact_residual(fld, signed_distance(m, O).distance)
        assert np.isclose(Lt[i], lt, rtol=1e-9, atol=1e-18) and np.isclose(Lc[i], lc, rtol=1e-9)
        assert np.isclose(sc[i], -lt * lc, rtol=1e-9, atol=1e-18)


def test_physics_object_cross_product(rng):
    T = rng.normal(size=(4, 3))
    R = random_rotations(rng, 3)
    seen = []

    def fn(Rs, Ts):
        seen.append(len(Rs))
        return rng.normal(size=len(Rs))

    R_out, T_out, rec = physics_aggregate_object(T, R, fn, 5)
    assert seen == [12] and len(rec["pairs"]) == 12
    sel = set(rec["selected"].tolist())
    worst_kept = min(rec["scores"][list(sel)])
    assert all(rec["scores"][i] <= worst_kept for i in range(12) if i not in sel)
    ti, ri = rec["pairs"][rec["selected"]].T
    assert np.allclose(T_out, T[ti].mean(0))


def test_physics_object_single_pair(rng):
    T, R = rng.normal(size=(1, 3)), random_rotations(rng, 1)
    R_out, T_out, _ = physics_aggregate_object(T, R, lambda Rs, Ts: np.array([-1.0]), 5)
    assert np.allclose(R_out, R[0]) and np.allclose(T_out, T[0])
    R_out, T_out, _ = physics_aggregate_object(T, R, lambda Rs, Ts: np.array([-np.inf]), 5)
    assert R_out is None and T_out is None


# ------------------------------------------------------------ full pipeline

@pytest.fixture(scope="module")
def full_inputs():
    scn = canonical("tripod-sphere", 2)
    hc = perturbation_sampler(scn.pose.theta, NoiseSpec(0.1), 40, seed=3)
    oc = perturbation_sampler((scn.R, scn.T), NoiseSpec(0.1, 0.01), 40, seed=4)
    return scn, hc, oc, hand_heatmaps(scn), object_heatmaps(scn)


def test_full_pipeline_va_parity_and_determinism(full_inputs):
    scn, hc, oc, hh, ho = full_inputs
    cfg = AggregationConfig(n=40, k_hand=10, k_obj_trans=5, k_obj_rot=5, k_phy_hand=3, k_phy_obj=3)
    full = aggregate_full(scn, hc, oc, hh, ho, cfg, seed=0)
    va = aggregate_full(scn, hc, oc, hh, ho, AggregationConfig(**{**cfg.__dict__, "physics": False}), seed=0)
    assert np.array_equal(va.hand_theta, full.va_hand_theta)
    assert np.array_equal(va.R, full.va_R) and np.array_equal(va.T, full.va_T)
    assert va.physics is None and full.physics is not None
    again = aggregate_full(scn, hc, oc, hh, ho, cfg, seed=0, threads=3)
    assert json.dumps(again.to_json()) == json.dumps(full.to_json())
    doc = json.loads(json.dumps(full.to_json()))
    validate(doc, "aggregation.v1")
    assert len(doc["physics"]["object"]["pairs"]) == 25
    for lv, size in zip(doc["visual"]["hand_levels"], (1, 5, 5, 5)):
        assert len(lv) == size and all(len(r["selected"]) == 10 for r in lv)


def test_full_pipeline_rejects_swapped_entities(full_inputs):
    scn, hc, oc, hh, ho = full_inputs
    with pytest.raises(InvalidParameter):
        aggregate_full(scn, oc, hc, hh, ho)


# ------------------------------------------------------------ invariants

def _noisy_hand_set(scn, n=30, seed=0):
    return perturbation_sampler(scn.pose.theta, NoiseSpec(0.1), n, seed=seed).hand_theta()


def test_overwrite_semantics(pinch):
    th = _noisy_hand_set(pinch)
    h = joint_hierarchy()
    res = visual_aggregate_hand(th, pinch.pose.trans, hand_heatmaps(pinch), pinch.intrinsics, pinch.shape, k=8)
    # snapshot taken after levels 1-3: those joints are shared by every candidate
    for lv in range(3):
        for j in h.levels[lv]:
            assert np.ptp(res.level4_values[:, j], axis=0).max() == 0.0
    out, _ = aggregate_hand_level(res.level4_values, h.levels[3], np.ones((len(th), 5)), 8)
    assert np.ptp(out, axis=0).max() == 0.0


def test_heatmap_scale_invariance(pinch):
    th = _noisy_hand_set(pinch)
    hm = hand_heatmaps(pinch)
    half = HeatmapStack(0.5 * hm.data)
    a = visual_aggregate_hand(th, pinch.pose.trans, hm, pinch.intrinsics, pinch.shape, k=8)
    b = visual_aggregate_hand(th, pinch.pose.trans, half, pinch.intrinsics, pinch.shape, k=8)
    for la, lb in zip(a.levels, b.levels):
        for ra, rb in zip(la, lb):
            assert ra["selected"].tolist() == rb["selected"].tolist()
    assert np.allclose(a.theta, b.theta, atol=1e-12)


def test_candidate_permutation_invariance(pinch, rng):
    th = _noisy_hand_set(pinch)
    hm = hand_heatmaps(pinch)
    perm = rng.permutation(len(th))
    a = visual_aggregate_hand(th, pinch.pose.trans, hm, pinch.intrinsics, pinch.shape, k=8)
    b = visual_aggregate_hand(th[perm], pinch.pose.trans, hm, pinch.intrinsics, pinch.shape, k=8)
    assert np.allclose(a.theta, b.theta, atol=1e-12)
    kp = bbox_keypoints_27(pinch.object_mesh())
    R = random_rotations(rng, 1)[0] @ pinch.R
    Rs = aa_to_matrix(rng.normal(scale=0.05, size=(20, 3))) @ pinch.R
    Ts = pinch.T + rng.normal(scale=0.005, size=(20, 3))
    p = rng.permutation(20)
    oa = visual_aggregate_object(Rs, Ts, object_heatmaps(pinch), pinch.intrinsics, kp, 5, 5)
    ob = visual_aggregate_object(Rs[p], Ts[p], object_heatmaps(pinch), pinch.intrinsics, kp, 5, 5)
    assert np.allclose(oa.R, ob.R, atol=1e-12) and np.allclose(oa.T, ob.T, atol=1e-12)
