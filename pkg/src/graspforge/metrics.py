"""Pose accuracy and physical plausibility metrics.

Lengths are reported in millimetres, threshold rates in percent and the
reprojection error in pixels.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import AllAnchorsFrozen, DimensionMismatch, EmptyMesh
from .geom import CameraIntrinsics, aa_to_matrix, procrustes_align, project_points
from .mesh import TriMesh, bbox_keypoints_27, signed_distance
from .solve import SolverConfig, solve_pseudo_forces

METRICS_SCHEMA = "graspforge.metrics.v1"
MM = 1000.0
CONTACT_TAU = 0.002
MAX_MODEL_POINTS = 2048
CSV_COLUMNS = ("MJE", "PA-MJE", "OCE", "MCE", "SMCE", "ADD", "ADD-S", "REP", "CP", "PD")


# ---------------------------------------------------------------- symmetry

@lru_cache(maxsize=None)
def _octahedral_group():
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            M = np.zeros((3, 3))
            M[list(range(3)), list(perm)] = signs
            if np.linalg.det(M) > 0:
                out.append(M)
    return tuple(out)


@dataclass(frozen=True)
class SymmetrySpec:
    """Object-frame rotations that leave the object unchanged.

    ``axis``/``samples`` add a sampled continuous symmetry about that axis,
    composed with every discrete entry.
    """

    rotations: tuple = (np.eye(3),)
    axis: tuple | None = None
    samples: int = 36

    def __post_init__(self):
        rots = [np.asarray(R, dtype=float) for R in self.rotations]
        if not any(np.allclose(R, np.eye(3), atol=1e-12) for R in rots):
            rots.insert(0, np.eye(3))
        for R in rots:
            if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
                raise DimensionMismatch("symmetry entries must be rotation matrices")
        object.__setattr__(self, "rotations", tuple(rots))

    def all_rotations(self):
        rots = np.stack(self.rotations)
        if self.axis is None:
            return rots
        a = np.asarray(self.axis, dtype=float)
        a = a / np.linalg.norm(a)
        ang = 2.0 * np.pi * np.arange(self.samples) / self.samples
        cont = aa_to_matrix(ang[:, None] * a)
        return np.einsum("aij,bjk->abik", cont, rots).reshape(-1, 3, 3)

    @classmethod
    def identity(cls):
        return cls()


def symmetry_of_primitive(kind, dimensions, samples=36) -> SymmetrySpec:
    """Symmetry set of a centred primitive.

    Boxes get the axis-permuting rotations that preserve their extents; a
    cylinder gets its axial flip plus a sampled rotation about z; a sphere gets
    the full octahedral set plus a sampled rotation about z (a finite stand-in
    for SO(3)).
    """
    dims = np.asarray(dimensions, dtype=float)
    if kind == "box":
        ext = np.broadcast_to(dims, (3,))
        rots = [R for R in _octahedral_group() if np.allclose(np.abs(R) @ ext, ext, rtol=1e-9, atol=1e-12)]
        return SymmetrySpec(tuple(rots))
    if kind == "cylinder":
        return SymmetrySpec((np.eye(3), np.diag([1.0, -1.0, -1.0])), axis=(0.0, 0.0, 1.0), samples=samples)
    if kind == "sphere":
        return SymmetrySpec(_octahedral_group(), axis=(0.0, 0.0, 1.0), samples=samples)
    return SymmetrySpec()


# ---------------------------------------------------------------- object model

def farthest_point_sampling(points, k, start=0):
    """Deterministic greedy FPS starting from ``points[start]``; returns indices."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    if k >= n:
        return np.arange(n)
    idx = np.empty(k, dtype=int)
    idx[0] = start
    d = np.sum((p - p[start]) ** 2, axis=1)
    for i in range(1, k):
        idx[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((p - p[idx[i]]) ** 2, axis=1))
    return idx


def surface_pool(mesh: TriMesh, target=4 * MAX_MODEL_POINTS):
    """Vertices plus a barycentric lattice on every face, about ``target`` points in total."""
    t = mesh.triangles
    pts = [mesh.vertices]
    m = max(4, int(np.ceil(np.sqrt(2.0 * target / len(t)))) + 2)
    for i in range(1, m):
        for j in range(1, m - i):
            a, b = i / m, j / m
            pts.append((1 - a - b) * t[:, 0] + a * t[:, 1] + b * t[:, 2])
    # edge midpoints cover faces too small for interior lattice points
    pts.append(0.5 * (t[:, 0] + t[:, 1]))
    return np.unique(np.vstack(pts).round(12), axis=0)


@dataclass
class ObjectModel:
    mesh: TriMesh
    points: np.ndarray         # model points for ADD / ADD-S / REP
    keypoints27: np.ndarray
    diameter: float
    symmetry: SymmetrySpec = field(default_factory=SymmetrySpec)

    @classmethod
    def from_mesh(cls, mesh: TriMesh, symmetry: SymmetrySpec | None = None, max_points=MAX_MODEL_POINTS):
        if len(mesh.vertices) == 0:
            raise EmptyMesh("object mesh has no vertices")
        pool = surface_pool(mesh)
        pts = pool[farthest_point_sampling(pool, max_points)]
        v = mesh.vertices if len(mesh.vertices) <= 4096 else pts
        diam = float(np.sqrt(np.max(np.sum((v[:, None] - v[None]) ** 2, axis=-1))))
        return cls(mesh, pts, bbox_keypoints_27(mesh), diam, symmetry or SymmetrySpec())

    @property
    def corners(self):
        return self.keypoints27[1:9]

    @property
    def center(self):
        return self.keypoints27[0]


# ---------------------------------------------------------------- pose errors

@dataclass
class PoseErrors:
    MJE: float
    PA_MJE: float
    MME: float
    OCE: float
    MCE: float
    SMCE: float
    ADD: float
    ADD_S: float
    ADD_01d: float
    ADDS_01d: float
    REP: float

    def to_dict(self):
        return {"MJE": self.MJE, "PA-MJE": self.PA_MJE, "MME": self.MME, "OCE": self.OCE, "MCE": self.MCE,
                "SMCE": self.SMCE, "ADD": self.ADD, "ADD-S": self.ADD_S, "ADD_0.1d": self.ADD_01d,
                "ADDS_0.1d": self.ADDS_01d, "REP": self.REP}


def _apply(R, T, x):
    return x @ np.asarray(R, dtype=float).T + np.asarray(T, dtype=float)


def _match(a, b, what):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def hand_errors(pred_kp, gt_kp, pred_verts=None, gt_verts=None, with_scale=True):
    """(MJE, PA-MJE, MME) in mm."""
    pk, gk = _match(pred_kp, gt_kp, "keypoints")
    mje = float(np.linalg.norm(pk - gk, axis=-1).mean()) * MM
    if mje == 0.0:
        pa = 0.0
    else:
        aligned = procrustes_align(pk, gk, with_scale=with_scale).apply(pk)
        pa = float(np.linalg.norm(aligned - gk, axis=-1).mean()) * MM
    mme = float("nan")
    if pred_verts is not None and gt_verts is not None:
        pv, gv = _match(pred_verts, gt_verts, "hand vertices")
        mme = float(np.linalg.norm(pv - gv, axis=-1).mean()) * MM
    return mje, pa, mme


def object_errors(R_pred, T_pred, R_gt, T_gt, model: ObjectModel, camera: CameraIntrinsics | None = None):
    """(OCE, MCE, SMCE, ADD, ADD-S, ADD_0.1d, ADDS_0.1d, REP)."""
    R_pred, R_gt = _match(R_pred, R_gt, "object rotation")
    T_pred, T_gt = _match(T_pred, T_gt, "object translation")
    oce = float(np.linalg.norm(_apply(R_pred, T_pred, model.center) - _apply(R_gt, T_gt, model.center))) * MM
    cg = _apply(R_gt, T_gt, model.corners)
    mce = float(np.linalg.norm(_apply(R_pred, T_pred, model.corners) - cg, axis=-1).mean()) * MM
    syms = model.symmetry.all_rotations()
    sc = np.einsum("sij,cj->sci", R_pred @ syms, model.corners) + T_pred
    smce = min(float(np.linalg.norm(sc - cg, axis=-1).mean(axis=-1).min()) * MM, mce)
    pp = _apply(R_pred, T_pred, model.points)
    pg = _apply(R_gt, T_gt, model.points)
    add = float(np.linalg.norm(pp - pg, axis=-1).mean()) * MM
    nn, _ = cKDTree(pg).query(pp)
    adds = min(float(nn.mean()) * MM, add)
    thr = 0.1 * model.diameter * MM
    rep = float("nan")
    if camera is not None:
        up, vp = project_points(pp, camera)
        ug, vg = project_points(pg, camera)
        ok = vp & vg
        if ok.any():
            rep = float(np.linalg.norm(up[ok] - ug[ok], axis=-1).mean())
    return oce, mce, smce, add, adds, 100.0 * (add < thr), 100.0 * (adds < thr), rep


def pose_errors(pred_kp, gt_kp, R_pred, T_pred, R_gt, T_gt, model: ObjectModel, camera=None,
                pred_verts=None, gt_verts=None, with_scale=True) -> PoseErrors:
    mje, pa, mme = hand_errors(pred_kp, gt_kp, pred_verts, gt_verts, with_scale)
    return PoseErrors(mje, pa, mme, *object_errors(R_pred, T_pred, R_gt, T_gt, model, camera))


# ---------------------------------------------------------------- physical plausibility

@dataclass
class PhysicsMetrics:
    contact: bool
    PD: float              # mm
    min_distance: float    # mm, signed
    stability: float | None = None

    @property
    def CP(self):
        return 100.0 if self.contact else 0.0

    def to_dict(self):
        return {"CP": self.CP, "contact": bool(self.contact), "PD": self.PD, "min_distance": self.min_distance,
                "stability": self.stability}


def contact_and_penetration(hand_mesh: TriMesh, object_mesh: TriMesh, tau=CONTACT_TAU) -> PhysicsMetrics:
    """Signed distances of the hand vertices to the object surface.

    PD is the deepest vertex penetration; contact holds when some vertex is
    closer than ``tau`` (or inside).
    """
    if len(hand_mesh.vertices) == 0 or len(object_mesh.faces) == 0:
        raise EmptyMesh("contact metrics need non-empty meshes")
    d = signed_distance(object_mesh, hand_mesh.vertices).distance
    dmin = float(d.min())
    return PhysicsMetrics(dmin < tau, max(0.0, -dmin) * MM, dmin * MM)


def stability_proxy(pose, shape, object_mesh_camera: TriMesh, gravity, cfg: SolverConfig = SolverConfig()):
    """Lowest L_force + 30 L_torque reached by the pseudo-force solve.

    With every anchor out of range the object is in free fall and the value is
    the squared gravity magnitude.
    """
    try:
        return solve_pseudo_forces(pose, shape, object_mesh_camera, gravity, cfg).min_stability
    except AllAnchorsFrozen:
        g = np.asarray(getattr(gravity, "vector", gravity), dtype=float)
        return float(g @ g)


def summarize(rows):
    """Dataset-level table: mean errors, CP as the contact percentage, PD mean."""
    keys = [k for k in CSV_COLUMNS if k not in ("CP",)]
    out = {k: float(np.nanmean([r[k] for r in rows])) for k in keys}
    out["CP"] = float(np.mean([r["CP"] for r in rows]))
    return out


def write_csv(rows, path, columns=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", *columns])
        for r in rows:
            w.writerow([r.get("name", "")] + [f"{r[c]:.6g}" for c in columns])
    return path
