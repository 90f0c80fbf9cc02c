"""Candidate aggregation: heatmap-guided visual averaging and physics re-ranking.

Hand candidates carry joint rotations only; the wrist translation is taken as
known (the scenario's hand translation), as are the hand shape and the camera.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AllAnchorsFrozen, InvalidParameter, DimensionMismatch
from .force import cone_basis
from .geom import CameraIntrinsics, canonical_aa, chordal_mean, project_points
from .hand import N_JOINTS, N_KEYPOINTS, HandShape, forward_kinematics_batch, joint_hierarchy, posed_anchor_states
from .heatmap import HeatmapStack
from .mesh import TriMesh, bbox_keypoints_27, signed_distance
from .sample import CandidateSet
from .solve import (SolveGeometry, SolverConfig, _softmax, config_hash, init_coefficients, solve_phase1,
                    solve_phase2)

AGGREGATION_SCHEMA = "graspforge.aggregation.v1"
PHYSICS_CHUNK = 16  # candidates per batched solve; fixed so results do not depend on --threads


@dataclass(frozen=True)
class AggregationConfig:
    n: int = 100
    k_hand: int = 30
    k_obj_trans: int = 10
    k_obj_rot: int = 10
    k_phy_hand: int = 5
    k_phy_obj: int = 5
    physics: bool = True
    # per-candidate budget for hand re-ranking (phase 1 only by default)
    hand_solver: SolverConfig = SolverConfig(phase2_steps=0)
    # full solve of the aggregated hand used for object re-ranking
    object_solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        ks = (self.k_hand, self.k_obj_trans, self.k_obj_rot, self.k_phy_hand, self.k_phy_obj)
        if self.n < 1 or min(ks) < 1:
            raise InvalidParameter("candidate count and every top-K must be positive")
        if max(ks) > self.n:
            raise InvalidParameter("top-K sizes cannot exceed the candidate count")

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if not isinstance(v, SolverConfig)}
        d["hand_solver"] = self.hand_solver.to_dict()
        d["object_solver"] = self.object_solver.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("hand_solver", "object_solver"):
            if k in d:
                d[k] = SolverConfig.from_dict(d[k])
        return cls(**d)


# ---------------------------------------------------------------- selection

def top_k(scores, k):
    """Indices of the ``k`` largest scores, ties broken by lower index; ``-inf`` is never selected."""
    s = np.asarray(scores, dtype=float)
    if np.any(np.isnan(s)):
        raise InvalidParameter("scores contain NaN")
    order = np.argsort(-s, kind="stable")
    order = order[s[order] > -np.inf]
    return order[:k]


def weighted_mean(values, weights):
    """Weighted mean over the first axis; falls back to the plain mean when the weights sum to zero.

    Returns ``(mean, fallback_used)``.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    tot = w.sum()
    if not tot > 0:
        return v.mean(axis=0), True
    return np.tensordot(w, v, axes=1) / tot, False


# ---------------------------------------------------------------- visual scores

def _heatmap_lookup(stack: HeatmapStack, uv_image, valid):
    """Per-channel bilinear responses at image coordinates (..., C, 2); invalid points score 0."""
    from .heatmap import sample_bilinear
    uv = np.where(valid[..., None], uv_image * stack.scale, np.nan)
    out = np.stack([sample_bilinear(stack, c, uv[..., c, :]) for c in range(uv.shape[-2])], axis=-1)
    return out


def hand_keypoint_responses(theta, trans, heatmaps: HeatmapStack, camera: CameraIntrinsics, shape: HandShape):
    """(N, 21) heatmap values at the projected keypoints of each candidate."""
    if heatmaps.channels != N_KEYPOINTS:
        raise DimensionMismatch(f"hand heatmaps need {N_KEYPOINTS} channels, got {heatmaps.channels}")
    kp = forward_kinematics_batch(np.asarray(theta, dtype=float), np.asarray(trans, dtype=float), shape)
    uv, valid = project_points(kp, camera)
    return _heatmap_lookup(heatmaps, uv, valid)


def visual_score_hand(theta, joint, heatmaps: HeatmapStack, camera: CameraIntrinsics, shape: HandShape,
                      trans=(0.0, 0.0, 0.0)):
    """Sum of heatmap responses over the keypoints downstream of ``joint``.

    ``theta`` is (16, 3) or a batch (N, 16, 3).
    """
    theta = np.asarray(theta, dtype=float)
    resp = hand_keypoint_responses(theta, trans, heatmaps, camera, shape)
    kids = list(joint_hierarchy().children[int(joint)])
    return resp[..., kids].sum(axis=-1)


def object_keypoint_responses(R, T, heatmaps: HeatmapStack, camera: CameraIntrinsics, keypoints27):
    R = np.asarray(R, dtype=float)
    T = np.asarray(T, dtype=float)
    kp = np.asarray(keypoints27, dtype=float)
    if heatmaps.channels != len(kp):
        raise DimensionMismatch(f"object heatmaps need {len(kp)} channels, got {heatmaps.channels}")
    pts = np.einsum("...ij,cj->...ci", R, kp) + T[..., None, :]
    uv, valid = project_points(pts, camera)
    return _heatmap_lookup(heatmaps, uv, valid)


def visual_score_object(R, T, heatmaps: HeatmapStack, camera: CameraIntrinsics, keypoints27):
    return object_keypoint_responses(R, T, heatmaps, camera, keypoints27).sum(axis=-1)


# ---------------------------------------------------------------- hand visual aggregation

def aggregate_hand_level(theta, joints, scores, k):
    """Weighted top-K mean per joint, then overwrite that joint in every candidate.

    ``theta`` is (N, 16, 3); ``scores`` is (N, len(joints)). Returns the new
    candidate array and one record per joint.
    """
    theta = np.array(theta, dtype=float)
    scores = np.asarray(scores, dtype=float).reshape(len(theta), len(joints))
    records = []
    for col, j in enumerate(joints):
        sel = top_k(scores[:, col], k)
        vals = canonical_aa(theta[sel, j])
        agg, fb = weighted_mean(vals, scores[sel, col])
        theta[:, j] = agg
        records.append({"joint": int(j), "selected": sel, "scores": scores[sel, col], "value": agg,
                        "fallback": fb})
    return theta, records


@dataclass
class HandVAResult:
    theta: np.ndarray          # (16, 3) aggregated pose
    levels: list               # per level: list of joint records
    level4_sets: dict          # joint -> selected candidate indices at level 4
    level4_values: np.ndarray  # (N, 16, 3) candidates as they were before the level-4 overwrite


def visual_aggregate_hand(theta, trans, heatmaps: HeatmapStack, camera: CameraIntrinsics, shape: HandShape,
                          k=30, level_order=(0, 1, 2, 3)) -> HandVAResult:
    """Level-by-level aggregation; scores of each level use the candidates overwritten so far."""
    theta = np.array(theta, dtype=float)
    if theta.ndim != 3 or theta.shape[1:] != (N_JOINTS, 3):
        raise DimensionMismatch("hand candidates must be (N, 16, 3)")
    h = joint_hierarchy()
    k = min(k, len(theta))
    levels = [None] * 4
    pre4 = None
    for li in level_order:
        joints = h.levels[li]
        resp = hand_keypoint_responses(theta, trans, heatmaps, camera, shape)
        sc = np.stack([resp[:, list(h.children[j])].sum(axis=1) for j in joints], axis=1)
        if li == 3:
            pre4 = theta.copy()
        theta, recs = aggregate_hand_level(theta, joints, sc, k)
        levels[li] = recs
    sets4 = {r["joint"]: r["selected"] for r in levels[3]}
    return HandVAResult(theta[0].copy(), levels, sets4, pre4)


# ---------------------------------------------------------------- object visual aggregation

@dataclass
class ObjectVAResult:
    R: np.ndarray
    T: np.ndarray
    trans_selected: np.ndarray
    trans_scores: np.ndarray
    rot_selected: np.ndarray
    rot_scores: np.ndarray
    fallbacks: list


def visual_aggregate_object(R, T, heatmaps: HeatmapStack, camera: CameraIntrinsics, keypoints27,
                            k_trans=10, k_rot=10) -> ObjectVAResult:
    """Translation first (weighted mean), overwrite, re-score, then a weighted chordal rotation mean."""
    R = np.asarray(R, dtype=float)
    T = np.array(T, dtype=float)
    fallbacks = []
    s_t = visual_score_object(R, T, heatmaps, camera, keypoints27)
    sel_t = top_k(s_t, min(k_trans, len(T)))
    T_agg, fb = weighted_mean(T[sel_t], s_t[sel_t])
    if fb:
        fallbacks.append("object_translation")
    T_all = np.broadcast_to(T_agg, T.shape)
    s_r = visual_score_object(R, T_all, heatmaps, camera, keypoints27)
    sel_r = top_k(s_r, min(k_rot, len(R)))
    w = s_r[sel_r]
    if not w.sum() > 0:
        fallbacks.append("object_rotation")
        w = np.ones_like(w)
    R_agg = chordal_mean(R[sel_r], w)
    return ObjectVAResult(R_agg, T_agg, sel_t, s_t[sel_t], sel_r, s_r[sel_r], fallbacks)


# ---------------------------------------------------------------- physics scores

def _map_chunks(fn, n, threads):
    chunks = [np.arange(i, min(i + PHYSICS_CHUNK, n)) for i in range(0, n, PHYSICS_CHUNK)]
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return parts


def _forces(vars, geom: SolveGeometry, cfg: SolverConfig):
    w = _softmax(vars.w_tilde)
    s = np.where(vars.frozen, 0.0, np.abs(vars.s_tilde))
    local = s[..., None] * (w @ cone_basis(cfg.mu, cfg.n_v).vectors)
    return np.einsum("...kij,...kj->...ki", geom.frames, local)


def hand_physics_scores(thetas, trans, shape: HandShape, object_mesh: TriMesh, gravity,
                        cfg: SolverConfig = SolverConfig(phase2_steps=0), centroid=None, threads=1):
    """Hand physics score -L_force * L_contact for each pose in ``thetas`` (M, 16, 3).

    Each pose is solved against the camera-frame ``object_mesh``. Poses with
    every anchor frozen score ``-inf``. Returns (scores, L_force, L_contact).
    """
    thetas = np.asarray(thetas, dtype=float)
    M = len(thetas)
    c = object_mesh.centroid if centroid is None else np.asarray(centroid, dtype=float)
    g = np.asarray(getattr(gravity, "vector", gravity), dtype=float)

    def run(idx):
        pos, frames = posed_anchor_states(thetas[idx], trans, shape)
        d = signed_distance(object_mesh, pos.reshape(-1, 3)).distance.reshape(len(idx), -1)
        vars0 = init_coefficients(d, cfg)
        ok = ~np.all(vars0.frozen, axis=-1)
        Lf = np.full(len(idx), np.inf)
        Lc = np.full(len(idx), np.inf)
        if ok.any():
            geom = SolveGeometry(pos[ok], frames[ok], d[ok], np.broadcast_to(c, (int(ok.sum()), 3)).copy(), g)
            v = init_coefficients(d[ok], cfg)
            v, _ = solve_phase1(v, geom, cfg)
            if cfg.phase2_steps:
                v, _ = solve_phase2(v, geom, cfg)
            F = _forces(v, geom, cfg)
            e = F.sum(axis=-2) + g
            Lf[ok] = np.einsum("bi,bi->b", e, e)
            Lc[ok] = np.sum(np.linalg.norm(F, axis=-1) * np.abs(d[ok]), axis=-1)
        return Lf, Lc

    parts = _map_chunks(run, M, threads)
    Lf = np.concatenate([p[0] for p in parts])
    Lc = np.concatenate([p[1] for p in parts])
    scores = np.where(np.isfinite(Lf), -Lf * Lc, -np.inf)
    return scores, Lf, Lc


def object_physics_scores(R, T, forces, positions, object_mesh_local: TriMesh):
    """Object physics score -L_torque * L_contact for every pose (M, 3, 3), (M, 3).

    The hand forces stay fixed; the anchor distances and the object centroid
    are recomputed for each pose. Returns (scores, L_torque, L_contact).
    """
    R = np.asarray(R, dtype=float)
    T = np.asarray(T, dtype=float)
    F = np.asarray(forces, dtype=float)
    O = np.asarray(positions, dtype=float)
    # anchors expressed in each candidate's object frame
    local = np.einsum("mji,mkj->mki", R, O[None] - T[:, None, :])
    d = signed_distance(object_mesh_local, local.reshape(-1, 3)).distance.reshape(len(R), -1)
    c = np.einsum("mij,j->mi", R, object_mesh_local.centroid) + T
    r = O[None] - c[:, None, :]
    tau = np.cross(F[None], r).sum(axis=1)
    Lt = np.einsum("mi,mi->m", tau, tau)
    Lc = np.sum(np.linalg.norm(F, axis=-1)[None] * np.abs(d), axis=-1)
    return -Lt * Lc, Lt, Lc


def physics_aggregate_hand(theta_va, level4_values, level4_sets, scores, k_phy):
    """Re-rank each level-4 joint's visual top-K by physics score and average the best ``k_phy``.

    ``scores`` maps candidate index -> score. Joints whose candidates all score
    ``-inf`` keep the visual value. Returns the new pose and per-joint records.
    """
    theta = np.array(theta_va, dtype=float)
    records = []
    for j, sel in level4_sets.items():
        sel = np.asarray(sel)
        sc = np.array([scores[int(i)] for i in sel])
        pick = top_k(sc, k_phy)
        rec = {"joint": int(j), "candidates": sel, "scores": sc, "selected": sel[pick], "fallback": False}
        if len(pick) == 0:
            rec["fallback"] = True
        else:
            theta[j] = canonical_aa(level4_values[sel[pick], j]).mean(axis=0)
        records.append(rec)
    return theta, records


def physics_aggregate_object(T_cands, R_cands, scores_fn, k_phy):
    """Score the cross product of retained translations and rotations and average the best pairs.

    ``scores_fn(R (M,3,3), T (M,3)) -> scores``. Returns ``(R, T, record)`` or
    ``(None, None, record)`` when every pair scores ``-inf``.
    """
    T_cands = np.asarray(T_cands, dtype=float)
    R_cands = np.asarray(R_cands, dtype=float)
    ti, ri = np.meshgrid(np.arange(len(T_cands)), np.arange(len(R_cands)), indexing="ij")
    ti, ri = ti.reshape(-1), ri.reshape(-1)
    sc = np.asarray(scores_fn(R_cands[ri], T_cands[ti]), dtype=float)
    pick = top_k(sc, k_phy)
    rec = {"pairs": np.stack([ti, ri], axis=1), "scores": sc, "selected": pick}
    if len(pick) == 0:
        return None, None, rec
    return chordal_mean(R_cands[ri[pick]]), T_cands[ti[pick]].mean(axis=0), rec


# ---------------------------------------------------------------- full pipeline

@dataclass
class AggregationReport:
    hand_theta: np.ndarray
    hand_trans: np.ndarray
    R: np.ndarray
    T: np.ndarray
    hand_levels: list
    object_visual: dict
    physics: dict | None
    config: AggregationConfig
    seed: int | None = None
    fallbacks: list = field(default_factory=list)
    va_hand_theta: np.ndarray | None = None
    va_R: np.ndarray | None = None
    va_T: np.ndarray | None = None

    def to_json(self):
        cfg = self.config.to_dict()
        return {
            "schema": AGGREGATION_SCHEMA,
            "seed": self.seed,
            "config": cfg,
            "config_hash": config_hash(cfg),
            "hand": {"theta": self.hand_theta.tolist(), "trans": self.hand_trans.tolist()},
            "object": {"R": self.R.tolist(), "T": self.T.tolist()},
            "visual": {"hand_levels": _jsonable(self.hand_levels), "object": _jsonable(self.object_visual)},
            "physics": _jsonable(self.physics),
            "fallbacks": list(self.fallbacks),
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def aggregate_full(scene, hand_cands: CandidateSet, obj_cands: CandidateSet, hand_heatmaps: HeatmapStack,
                   obj_heatmaps: HeatmapStack, cfg: AggregationConfig = AggregationConfig(), seed=None,
                   threads=1) -> AggregationReport:
    """Hand VA, object VA, then (when enabled) hand PA and object PA."""
    if hand_cands.entity != "hand" or obj_cands.entity != "object":
        raise InvalidParameter("expected hand and object candidate sets")
    shape = scene.shape
    trans = np.asarray(scene.pose.trans, dtype=float)
    cam = scene.intrinsics
    mesh_local = scene.object_mesh()
    kp27 = bbox_keypoints_27(mesh_local)

    theta_c = hand_cands.hand_theta()
    hva = visual_aggregate_hand(theta_c, trans, hand_heatmaps, cam, shape, min(cfg.k_hand, len(theta_c)))
    R_c, T_c = obj_cands.rotations(), obj_cands.trans
    ova = visual_aggregate_object(R_c, T_c, obj_heatmaps, cam, kp27, cfg.k_obj_trans, cfg.k_obj_rot)

    fallbacks = [f"hand_joint_{r['joint']}" for lv in hva.levels for r in lv if r["fallback"]] + ova.fallbacks
    hand_levels = [[{"joint": r["joint"], "selected": r["selected"], "scores": r["scores"]} for r in lv]
                   for lv in hva.levels]
    obj_visual = {"translation": {"selected": ova.trans_selected, "scores": ova.trans_scores},
                  "rotation": {"selected": ova.rot_selected, "scores": ova.rot_scores}}
    report = AggregationReport(hva.theta, trans, ova.R, ova.T, hand_levels, obj_visual, None, cfg, seed,
                               fallbacks, hva.theta.copy(), ova.R.copy(), ova.T.copy())
    if not cfg.physics:
        return report

    # hand PA: every level-4 candidate keeps the aggregated levels 1-3 and its own level-4 joints
    mesh_va = mesh_local.transformed(ova.R, ova.T)
    union = np.unique(np.concatenate([np.asarray(s) for s in hva.level4_sets.values()]))
    l4 = list(joint_hierarchy().levels[3])
    poses = np.repeat(hva.theta[None], len(union), axis=0)
    poses[:, l4] = hva.level4_values[union][:, l4]
    sc_u, Lf_u, Lc_u = hand_physics_scores(poses, trans, shape, mesh_va, scene.gravity, cfg.hand_solver,
                                           threads=threads)
    score_of = {int(i): float(s) for i, s in zip(union, sc_u)}
    theta_pa, hrecs = physics_aggregate_hand(hva.theta, hva.level4_values, hva.level4_sets, score_of,
                                             cfg.k_phy_hand)
    fallbacks += [f"physics_hand_joint_{r['joint']}" for r in hrecs if r["fallback"]]

    # object PA: forces from a full solve of the aggregated hand against the visual object pose
    from .solve import solve_pseudo_forces
    from .hand import HandPose
    R_pa, T_pa, orec = None, None, {"pairs": [], "scores": [], "selected": []}
    try:
        rep = solve_pseudo_forces(HandPose(theta_pa, trans), shape, mesh_va, scene.gravity_force,
                                  cfg.object_solver, seed=seed)
        F, O = rep.field.forces, rep.field.positions
        R_pa, T_pa, orec = physics_aggregate_object(
            T_c[ova.trans_selected], R_c[ova.rot_selected],
            lambda R, T: object_physics_scores(R, T, F, O, mesh_local)[0], cfg.k_phy_obj)
    except AllAnchorsFrozen:
        pass
    if R_pa is None:
        fallbacks.append("physics_object")
        R_pa, T_pa = ova.R, ova.T

    report.hand_theta = theta_pa
    report.R, report.T = R_pa, T_pa
    report.physics = {
        "hand": {"candidates": union, "scores": sc_u, "L_force": Lf_u, "L_contact": Lc_u,
                 "joints": [{"joint": r["joint"], "selected": r["selected"]} for r in hrecs]},
        "object": {"pairs": orec["pairs"], "scores": orec["scores"], "selected": orec["selected"]},
    }
    report.fallbacks = fallbacks
    return report
