"""Simplified articulated hand.

Not MANO: a 16-joint tree in MANO joint order with a shipped rest skeleton, a
tube-and-slab surface mesh skinned by linear blend skinning, 32 contact anchors
and the four-level joint hierarchy used by visual aggregation.

Keypoint order (21): the 16 joints in MANO order followed by the five tips in
finger order index, middle, pinky, ring, thumb.

Shape vector ``betas`` (10): ``betas[0]`` sets the global scale
``1 + 0.1 * tanh(betas[0])``; ``betas[1:6]`` scale the phalanx lengths of thumb,
index, middle, ring, pinky by ``1 + 0.1 * tanh(b)``; ``betas[6:]`` are unused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import DegenerateTriangle, DimensionMismatch
from .geom import aa_to_matrix, matrix_to_aa
from .mesh import TriMesh

N_JOINTS = 16
N_KEYPOINTS = 21
N_ANCHORS = 32
N_BETAS = 10

SKELETON_ASSET = "hand_skeleton.v1.json"
ANCHOR_ASSET = "anchors.v1.json"


def _read_asset(name):
    return json.loads(resources.files("graspforge.assets").joinpath(name).read_text())


@lru_cache(maxsize=None)
def skeleton_asset():
    return _read_asset(SKELETON_ASSET)


PARENTS = tuple(skeleton_asset()["parents"])
TIP_PARENTS = tuple(skeleton_asset()["tip_parents"])
FINGER_CHAINS = tuple(tuple(c) for c in skeleton_asset()["finger_chains"])
FINGERS = tuple(skeleton_asset()["fingers"])
# keypoint index of each finger's tip, in FINGERS order
TIP_KEYPOINTS = tuple(range(16, 21))


@dataclass(frozen=True)
class JointHierarchy:
    levels: tuple          # four tuples of joint indices
    children: dict         # joint index -> tuple of descendant keypoint indices
    parents: tuple = PARENTS

    def level_of(self, joint):
        for i, lv in enumerate(self.levels):
            if joint in lv:
                return i + 1
        raise KeyError(joint)


@lru_cache(maxsize=None)
def joint_hierarchy() -> JointHierarchy:
    """Levels L1 = wrist, L2 = MCP (thumb CMC), L3 = PIP (thumb MCP), L4 = DIP (thumb IP)."""
    levels = (
        (0,),
        tuple(c[0] for c in FINGER_CHAINS),
        tuple(c[1] for c in FINGER_CHAINS),
        tuple(c[2] for c in FINGER_CHAINS),
    )
    children = {0: tuple(range(1, N_KEYPOINTS))}
    for chain, tip in zip(FINGER_CHAINS, TIP_KEYPOINTS):
        for pos, j in enumerate(chain):
            children[j] = tuple(chain[pos + 1:]) + (tip,)
    return JointHierarchy(levels, children)


# ---------------------------------------------------------------- shape

@dataclass(frozen=True, eq=False)
class HandShape:
    betas: np.ndarray
    rest_joints: np.ndarray      # (16, 3)
    rest_tips: np.ndarray        # (5, 3)
    rest_vertices: np.ndarray    # (V, 3)
    faces: np.ndarray            # (F, 3)
    weights: np.ndarray          # (V, 16), rows on the simplex
    flexion_axes: np.ndarray     # (5, 3) rest-frame flexion axis per finger
    pad_directions: np.ndarray   # (5, 3) rest-frame palmar direction per finger
    regions: dict = field(repr=False)  # construction bookkeeping used for anchors

    @classmethod
    def from_betas(cls, betas=None) -> "HandShape":
        b = np.zeros(N_BETAS) if betas is None else np.asarray(betas, dtype=float).reshape(-1)
        if b.shape != (N_BETAS,):
            raise DimensionMismatch(f"betas must have {N_BETAS} entries")
        return _build_shape(tuple(float(x) for x in b))

    @property
    def rest_keypoints(self):
        return np.vstack([self.rest_joints, self.rest_tips])

    def rest_mesh(self):
        return TriMesh(self.rest_vertices, self.faces, drop_degenerate=False)


def _shaped_skeleton(betas):
    sk = skeleton_asset()
    J = np.array(sk["rest_joints"], dtype=float)
    tips = np.array(sk["rest_tips"], dtype=float)
    g = 1.0 + 0.1 * np.tanh(betas[0])
    order = sk["beta_finger_order"]
    mult = {name: 1.0 + 0.1 * np.tanh(betas[1 + order.index(name)]) for name in order}
    outJ = np.zeros_like(J)
    for j in range(N_JOINTS):
        p = PARENTS[j]
        if p < 0:
            outJ[j] = g * J[j]
            continue
        finger = next(FINGERS[i] for i, c in enumerate(FINGER_CHAINS) if j in c)
        m = 1.0 if p == 0 else mult[finger]
        outJ[j] = outJ[p] + g * m * (J[j] - J[p])
    outT = np.zeros_like(tips)
    for i, p in enumerate(TIP_PARENTS):
        outT[i] = outJ[p] + g * mult[FINGERS[i]] * (tips[i] - J[p])
    return g, outJ, outT


def _grid_box(lo, hi, div):
    """Closed box surface on a lattice; returns vertices and outward faces."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = np.asarray(div, dtype=int)
    index = {}
    verts = []

    def vid(ijk):
        if ijk not in index:
            index[ijk] = len(verts)
            verts.append(lo + (hi - lo) * np.array(ijk) / n)
        return index[ijk]

    faces = []
    center = (lo + hi) / 2
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, n[axis]):
            for a in range(n[u]):
                for b in range(n[v]):
                    quad = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        ijk = [0, 0, 0]
                        ijk[axis], ijk[u], ijk[v] = side, a + da, b + db
                        quad.append(vid(tuple(ijk)))
                    for tri in ((quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])):
                        p = [verts[i] for i in tri]
                        nrm = np.cross(p[1] - p[0], p[2] - p[0])
                        if np.dot(nrm, (p[0] + p[1] + p[2]) / 3 - center) < 0:
                            tri = (tri[0], tri[2], tri[1])
                        faces.append(tri)
    return np.array(verts), np.array(faces)


@lru_cache(maxsize=32)
def _build_shape(betas):
    sk = skeleton_asset()
    g, J, tips = _shaped_skeleton(np.array(betas))
    M = int(sk["tube_segments"])
    S = int(sk["stations_per_bone"])
    z = float(sk["blend_half_width"])
    radii = g * np.array(sk["finger_radius"])

    verts = []
    weights = []
    faces = []
    regions = {"palm": None, "fingers": []}

    pv, pf = _grid_box(g * np.array(sk["palm_box"]["lo"]), g * np.array(sk["palm_box"]["hi"]),
                       sk["palm_box"]["divisions"])
    verts.extend(pv)
    for _ in range(len(pv)):
        w = np.zeros(N_JOINTS)
        w[0] = 1.0
        weights.append(w)
    faces.extend(pf.tolist())
    regions["palm"] = {"faces": (0, len(pf)), "lo": g * np.array(sk["palm_box"]["lo"]),
                       "hi": g * np.array(sk["palm_box"]["hi"]), "divisions": list(sk["palm_box"]["divisions"])}

    flex_axes = np.zeros((5, 3))
    pad_dirs = np.zeros((5, 3))
    phi = 2 * np.pi * (np.arange(M) + 0.5) / M
    for fi, chain in enumerate(FINGER_CHAINS):
        pts = [J[chain[0]], J[chain[1]], J[chain[2]], tips[fi]]
        d = pts[3] - pts[0]
        d /= np.linalg.norm(d)
        pad = np.array(sk["finger_pad_direction"][fi], dtype=float)
        e2 = pad - np.dot(pad, d) * d
        e2 /= np.linalg.norm(e2)
        e1 = np.cross(e2, d)
        flex_axes[fi] = np.cross(d, e2)
        pad_dirs[fi] = e2
        r0 = radii[fi]
        r_end = 0.85 * r0
        total = sum(np.linalg.norm(pts[i + 1] - pts[i]) for i in range(3))
        cap_center = pts[3] - r_end * d

        # stations: (center, radius, {joint: weight}, bone, fraction)
        stations = []
        run = 0.0
        for b in range(3):
            start = pts[b]
            end = cap_center if b == 2 else pts[b + 1]
            length = np.linalg.norm(end - start)
            fracs = [k / S for k in range(S)] + ([1.0] if b == 2 else [])
            own = chain[b]
            prev = PARENTS[own]
            nxt = chain[b + 1] if b < 2 else None
            for f in fracs:
                c = start + f * (end - start)
                s_arc = (run + f * length) / total
                w = {}
                w_prev = 0.5 * max(0.0, 1.0 - f / z)
                w_next = 0.5 * max(0.0, 1.0 - (1.0 - f) / z) if nxt is not None else 0.0
                if w_prev:
                    w[prev] = w_prev
                if w_next:
                    w[nxt] = w_next
                w[own] = 1.0 - w_prev - w_next
                stations.append((c, r0 + (r_end - r0) * s_arc, w, b, f))
            run += np.linalg.norm(pts[b + 1] - pts[b])
        # hemispherical cap rings
        for alpha in (np.pi / 6, np.pi / 3):
            stations.append((cap_center + r_end * np.sin(alpha) * d, r_end * np.cos(alpha),
                             {chain[2]: 1.0}, 3, alpha))

        base = len(verts)
        ring_start = []
        for c, r, w, _, _ in stations:
            ring_start.append(len(verts))
            for k in range(M):
                verts.append(c + r * (np.cos(phi[k]) * e1 + np.sin(phi[k]) * e2))
                wv = np.zeros(N_JOINTS)
                for j, val in w.items():
                    wv[j] = val
                weights.append(wv)
        base_center = len(verts)
        verts.append(stations[0][0])
        wv = np.zeros(N_JOINTS)
        for j, val in stations[0][2].items():
            wv[j] = val
        weights.append(wv)
        apex = len(verts)
        verts.append(pts[3])
        wv = np.zeros(N_JOINTS)
        wv[chain[2]] = 1.0
        weights.append(wv)

        face0 = len(faces)
        strips = []
        for i in range(len(stations) - 1):
            a0, a1 = ring_start[i], ring_start[i + 1]
            strip_start = len(faces)
            for k in range(M):
                k1 = (k + 1) % M
                faces.append((a0 + k, a0 + k1, a1 + k1))
                faces.append((a0 + k, a1 + k1, a1 + k))
            strips.append({"bone": stations[i][3], "fraction": stations[i][4],
                           "faces": (strip_start, len(faces))})
        for k in range(M):
            faces.append((base_center, ring_start[0] + (k + 1) % M, ring_start[0] + k))
        last = ring_start[-1]
        for k in range(M):
            faces.append((apex, last + k, last + (k + 1) % M))
        regions["fingers"].append({"faces": (face0, len(faces)), "strips": strips, "vertex_base": base})

    return HandShape(
        betas=np.array(betas), rest_joints=J, rest_tips=tips,
        rest_vertices=np.array(verts), faces=np.array(faces, dtype=np.int64),
        weights=np.array(weights), flexion_axes=flex_axes, pad_directions=pad_dirs,
        regions=regions,
    )


# ---------------------------------------------------------------- pose / kinematics

@dataclass
class HandPose:
    theta: np.ndarray  # (16, 3) axis-angle; row 0 is the global wrist rotation
    trans: np.ndarray  # (3,) wrist position in the camera frame

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(N_JOINTS, 3)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)

    @classmethod
    def identity(cls, trans=(0.0, 0.0, 0.0)):
        return cls(np.zeros((N_JOINTS, 3)), np.asarray(trans, dtype=float))

    def copy(self):
        return HandPose(self.theta.copy(), self.trans.copy())

    def to_dict(self):
        return {"theta": self.theta.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["theta"], dtype=float), np.array(d["trans"], dtype=float))


def joint_transforms(theta, trans, shape: HandShape):
    """Global joint rotations and positions, batched over leading axes of ``theta``.

    ``theta`` has shape (..., 16, 3) and ``trans`` (..., 3). Returns ``(R, t)`` with
    shapes (..., 16, 3, 3) and (..., 16, 3); ``t[..., j]`` is the posed joint ``j``.
    """
    theta = np.asarray(theta, dtype=float)
    trans = np.broadcast_to(np.asarray(trans, dtype=float), theta.shape[:-2] + (3,))
    local = aa_to_matrix(theta)
    R = np.empty_like(local)
    t = np.empty(theta.shape[:-2] + (N_JOINTS, 3))
    J = shape.rest_joints
    R[..., 0, :, :] = local[..., 0, :, :]
    t[..., 0, :] = trans
    for j in range(1, N_JOINTS):
        p = PARENTS[j]
        R[..., j, :, :] = R[..., p, :, :] @ local[..., j, :, :]
        t[..., j, :] = t[..., p, :] + np.einsum("...ij,j->...i", R[..., p, :, :], J[j] - J[p])
    return R, t


def forward_kinematics(pose: HandPose, shape: HandShape):
    """21 camera-frame keypoints for one pose."""
    return forward_kinematics_batch(pose.theta, pose.trans, shape)


def forward_kinematics_batch(theta, trans, shape: HandShape):
    R, t = joint_transforms(theta, trans, shape)
    tip_off = shape.rest_tips - shape.rest_joints[list(TIP_PARENTS)]
    tips = t[..., TIP_PARENTS, :] + np.einsum("...kij,kj->...ki", R[..., TIP_PARENTS, :, :], tip_off)
    return np.concatenate([t, tips], axis=-2)


def skin_vertices(theta, trans, shape: HandShape, vertex_ids=None):
    """Linear blend skinning of (a subset of) the rest vertices."""
    R, t = joint_transforms(theta, trans, shape)
    V = shape.rest_vertices if vertex_ids is None else shape.rest_vertices[vertex_ids]
    W = shape.weights if vertex_ids is None else shape.weights[vertex_ids]
    # displacement form of R_j (v - J_j) + t_j, so the identity pose reproduces v exactly
    J = shape.rest_joints
    shift = np.empty_like(t)
    shift[..., 0, :] = t[..., 0, :] - J[0]
    for j in range(1, N_JOINTS):
        p = PARENTS[j]
        shift[..., j, :] = shift[..., p, :] + np.einsum("...ij,j->...i", R[..., p, :, :] - np.eye(3), J[j] - J[p])
    rel = V[None, :, :] - J[:, None, :]                                                  # (16, V, 3)
    per_joint = np.einsum("...jab,jvb->...jva", R - np.eye(3), rel) + shift[..., :, None, :]  # (..., 16, V, 3)
    return V + np.einsum("vj,...jva->...va", W, per_joint)


def skin_mesh(pose: HandPose, shape: HandShape) -> TriMesh:
    return TriMesh(skin_vertices(pose.theta, pose.trans, shape), shape.faces, drop_degenerate=False)


# ---------------------------------------------------------------- anchors

@dataclass(frozen=True)
class AnchorTable:
    names: tuple
    faces: np.ndarray   # (32,) face indices into the canonical hand mesh
    bary: np.ndarray    # (32, 3)

    def __post_init__(self):
        if len(self.faces) != N_ANCHORS or self.bary.shape != (N_ANCHORS, 3):
            raise DimensionMismatch(f"anchor table must have {N_ANCHORS} entries")
        if np.any(self.bary < 0) or not np.allclose(self.bary.sum(axis=1), 1.0):
            raise DimensionMismatch("barycentric weights must be nonnegative and sum to 1")

    def to_json(self):
        return {
            "schema": "graspforge.anchors.v1",
            "mesh": {"skeleton": SKELETON_ASSET},
            "anchors": [{"name": n, "face": int(f), "bary": [float(x) for x in b]}
                        for n, f, b in zip(self.names, self.faces, self.bary)],
        }

    @classmethod
    def from_json(cls, d):
        a = d["anchors"]
        return cls(tuple(x["name"] for x in a), np.array([x["face"] for x in a], dtype=np.int64),
                   np.array([x["bary"] for x in a], dtype=float))


PAD_NAMES = ("proximal", "middle", "distal", "tip")


def generate_anchor_table(shape: HandShape | None = None) -> AnchorTable:
    """Derive the 32-anchor layout from the canonical mesh construction.

    Digit anchors: the palmar-most triangle of the tube strip between stations
    1/2 and 3/4 of each phalanx, plus the first cap strip for the tip pad. Palm
    anchors: a 4 x 3 lattice of triangles on the palmar face of the palm slab.
    """
    shape = shape or HandShape.from_betas()
    normals = shape.rest_mesh().face_normals
    names, faces = [], []
    stations = shape.regions
    S = int(skeleton_asset()["stations_per_bone"])
    for fi, finger in enumerate(FINGERS):
        strips = stations["fingers"][fi]["strips"]
        pad = shape.pad_directions[fi]
        wanted = [(0, S // 2), (1, S // 2), (2, S // 2), None]
        for name, key in zip(PAD_NAMES, wanted):
            if key is None:
                strip = next(s for s in strips if s["bone"] == 2 and s["fraction"] == 1.0)
            else:
                strip = next(s for s in strips if s["bone"] == key[0] and s["fraction"] == key[1] / S)
            lo, hi = strip["faces"]
            idx = np.arange(lo, hi)
            faces.append(int(idx[np.argmax(normals[idx] @ pad)]))
            names.append(f"{finger}_{name}")
    palm = stations["palm"]
    lo, hi = palm["faces"]
    idx = np.arange(lo, hi)
    cen = shape.rest_vertices[shape.faces[idx]].mean(axis=1)
    on_palmar = idx[(normals[idx] @ np.array([0.0, 0.0, -1.0]) > 0.99)]
    cen = shape.rest_vertices[shape.faces[on_palmar]].mean(axis=1)
    plo, phi = palm["lo"], palm["hi"]
    for r, yf in enumerate((0.25, 0.5, 0.75)):
        for c, xf in enumerate((0.2, 0.4, 0.6, 0.8)):
            target = np.array([plo[0] + xf * (phi[0] - plo[0]), plo[1] + yf * (phi[1] - plo[1]), plo[2]])
            faces.append(int(on_palmar[np.argmin(np.linalg.norm(cen - target, axis=1))]))
            names.append(f"palm_{r}{c}")
    return AnchorTable(tuple(names), np.array(faces, dtype=np.int64), np.full((N_ANCHORS, 3), 1.0 / 3.0))


@lru_cache(maxsize=None)
def load_anchor_table() -> AnchorTable:
    return AnchorTable.from_json(_read_asset(ANCHOR_ASSET))


def anchor_frames_from_triangles(tri, bary):
    """Anchor positions and local-to-global frames from triangles (..., 3, 3).

    x follows edge p1->p2, z the normal (p2-p1) x (p3-p2), y = z x x.
    """
    p1, p2, p3 = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    pos = np.einsum("...k,...kd->...d", bary, tri)
    e = p2 - p1
    n = np.cross(e, p3 - p2)
    ne = np.linalg.norm(e, axis=-1, keepdims=True)
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(0.5 * nn < 1e-12):
        raise DegenerateTriangle("anchor triangle area below 1e-12 m^2")
    x = e / ne
    z = n / nn
    y = np.cross(z, x)
    return pos, np.stack([x, y, z], axis=-1)


def anchor_states(mesh: TriMesh, table: AnchorTable | None = None):
    """Anchor positions (32, 3) and frames (32, 3, 3) on a skinned hand mesh."""
    table = table or load_anchor_table()
    tri = mesh.vertices[mesh.faces[table.faces]]
    return anchor_frames_from_triangles(tri, table.bary)


def posed_anchor_states(theta, trans, shape: HandShape, table: AnchorTable | None = None):
    """Anchor states straight from a pose, skinning only the 96 anchor vertices.

    Batched over leading axes of ``theta``.
    """
    table = table or load_anchor_table()
    vids = shape.faces[table.faces].reshape(-1)
    v = skin_vertices(theta, trans, shape, vids)
    tri = v.reshape(v.shape[:-2] + (N_ANCHORS, 3, 3))
    return anchor_frames_from_triangles(tri, table.bary)


def flexion_pose(angles, shape: HandShape | None = None, wrist_aa=(0.0, 0.0, 0.0), trans=(0.0, 0.0, 0.0),
                 spread=None, twist=None) -> HandPose:
    """Convenience pose builder.

    ``angles`` is (5, 3): flexion of the three chain joints per finger (FINGERS
    order) about each finger's rest flexion axis. ``spread`` (5,) optionally
    rotates the first chain joint about the palmar direction (abduction) and
    ``twist`` (5,) about the finger's rest direction (axial rotation, thumb
    opposition). The base joint rotation is spread * twist * flexion.
    """
    shape = shape or HandShape.from_betas()
    angles = np.asarray(angles, dtype=float).reshape(5, 3)
    spread = np.zeros(5) if spread is None else np.asarray(spread, dtype=float)
    twist = np.zeros(5) if twist is None else np.asarray(twist, dtype=float)
    theta = np.zeros((N_JOINTS, 3))
    theta[0] = wrist_aa
    for fi, chain in enumerate(FINGER_CHAINS):
        for k, j in enumerate(chain):
            theta[j] = angles[fi, k] * shape.flexion_axes[fi]
        if spread[fi] or twist[fi]:
            axis = np.cross(shape.pad_directions[fi], shape.flexion_axes[fi])
            R = (aa_to_matrix(spread[fi] * shape.pad_directions[fi]) @ aa_to_matrix(twist[fi] * axis)
                 @ aa_to_matrix(theta[chain[0]]))
            theta[chain[0]] = matrix_to_aa(R)
    return HandPose(theta, np.asarray(trans, dtype=float))
