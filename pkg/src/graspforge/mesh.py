"""Triangle meshes, signed distance queries, primitive generators and OBJ I/O."""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import EmptyMesh, InvalidDimensions, IoError, ParseError

# closest-feature codes returned by closest_point_on_triangles
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_BC, EDGE_CA = range(7)

_LEAF_SIZE = 4
_QUERY_CHUNK = 2048


@dataclass
class SdfResult:
    """Signed distances (negative inside), closest surface points and outward normals."""

    distance: np.ndarray
    closest: np.ndarray
    normal: np.ndarray


class TriMesh:
    """Immutable triangle mesh.

    Faces with (numerically) zero area are dropped on construction unless
    ``drop_degenerate=False`` (used for skinned meshes whose face indexing must
    stay fixed). Derived
    quantities (normals, pseudo-normals, the BVH) are computed lazily and cached.
    """

    def __init__(self, vertices, faces, drop_degenerate=True):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidDimensions("face index out of range")
        if len(f) and drop_degenerate:
            tri = v[f]
            area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            scale = max(np.ptp(v, axis=0).max(), 1e-300)
            f = f[area2 > 1e-14 * scale * scale]
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f

    def __len__(self):
        return len(self.faces)

    def __eq__(self, other):
        return (isinstance(other, TriMesh) and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.faces, other.faces))

    def __repr__(self):
        return f"TriMesh({len(self.vertices)} vertices, {len(self.faces)} faces)"

    def _require_nonempty(self):
        if len(self.vertices) == 0 or len(self.faces) == 0:
            raise EmptyMesh("mesh has no faces")

    @property
    def triangles(self):
        return self.vertices[self.faces]

    @cached_property
    def _face_cross(self):
        t = self.triangles
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    @cached_property
    def face_normals(self):
        c = self._face_cross
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @property
    def area(self):
        return float(self.face_areas.sum())

    @property
    def volume(self):
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    @cached_property
    def centroid(self):
        """Volumetric centroid of the enclosed solid (uniform density)."""
        self._require_nonempty()
        t = self.triangles
        vols = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])) / 6.0
        return (vols[:, None] * t.sum(axis=1)).sum(axis=0) / (4.0 * vols.sum())

    @property
    def bounds(self):
        self._require_nonempty()
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, R, t):
        return TriMesh(self.vertices @ np.asarray(R).T + np.asarray(t), self.faces, drop_degenerate=False)

    def is_watertight(self):
        e = np.sort(self._directed_edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def _directed_edges(self):
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    @cached_property
    def _edge_table(self):
        """Per-face edge ids (ab, bc, ca) and angle-weighted edge pseudo-normals."""
        nf = len(self.faces)
        und = np.sort(self._directed_edges(), axis=1)
        uniq, inverse = np.unique(und, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        normals = np.zeros((len(uniq), 3))
        fn = np.tile(self.face_normals, (3, 1))
        np.add.at(normals, inverse, fn)
        normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
        face_edges = inverse.reshape(3, nf).T
        return face_edges, normals

    @cached_property
    def vertex_pseudo_normals(self):
        t = self.triangles
        n = np.zeros_like(self.vertices)
        for i in range(3):
            e1 = t[:, (i + 1) % 3] - t[:, i]
            e2 = t[:, (i + 2) % 3] - t[:, i]
            cosang = np.einsum("ij,ij->i", e1, e2) / (
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(n, self.faces[:, i], ang[:, None] * self.face_normals)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    @cached_property
    def bvh(self):
        self._require_nonempty()
        return _Bvh(self.triangles)


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles ``(a, b, c)`` to ``p`` (all shape (n, 3)).

    Vectorised transcription of the region tests in Ericson, *Real-Time
    Collision Detection*, 5.1.5. Returns ``(points, feature_code)``.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    code = np.full(len(p), -1, dtype=np.int8)
    todo = np.ones(len(p), dtype=bool)

    def assign(mask, pts, feature):
        m = mask & todo
        out[m] = pts[m] if pts.ndim == 2 else pts
        code[m] = feature
        todo[m] = False

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a, VERT_A)
        assign((d3 >= 0) & (d4 <= d3), b, VERT_B)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, EDGE_AB)
        assign((d6 >= 0) & (d5 <= d6), c, VERT_C)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, EDGE_CA)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b), EDGE_BC)
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(todo, a + v[:, None] * ab + w[:, None] * ac, FACE)
    return out, code


class _Bvh:
    """Axis-aligned bounding-volume hierarchy over triangles.

    Built by median splits on the longest centroid extent. Queries traverse the
    tree breadth-first for a whole batch of points at once, pruning nodes whose
    box lies farther than the current upper bound on the point's distance.
    """

    def __init__(self, triangles):
        self.tri = triangles
        lo_t = triangles.min(axis=1)
        hi_t = triangles.max(axis=1)
        cen = triangles.mean(axis=1)
        order = []
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def build(idx):
            node = len(lo)
            lo.append(lo_t[idx].min(axis=0))
            hi.append(hi_t[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(-1)
            count.append(0)
            if len(idx) <= _LEAF_SIZE:
                start[node] = len(order)
                count[node] = len(idx)
                order.extend(idx.tolist())
                return node
            ext = np.ptp(cen[idx], axis=0)
            axis = int(np.argmax(ext))
            srt = idx[np.argsort(cen[idx, axis], kind="stable")]
            half = len(srt) // 2
            left[node] = build(srt[:half])
            right[node] = build(srt[half:])
            return node

        build(np.arange(len(triangles)))
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)
        self.order = np.array(order, dtype=np.int64)
        # a triangle vertex is always a valid upper bound for the surface distance
        self._verts = triangles.reshape(-1, 3)

    def _box_dist2(self, p, nodes):
        d = np.maximum(self.lo[nodes] - p, 0.0) + np.maximum(p - self.hi[nodes], 0.0)
        return np.einsum("ij,ij->i", d, d)

    def candidates(self, points):
        """Return (point_index, face_index) pairs that may hold the closest face."""
        from scipy.spatial import cKDTree

        ub = cKDTree(self._verts).query(points)[0] ** 2
        pi = np.arange(len(points))
        ni = np.zeros(len(points), dtype=np.int64)
        leaf_p, leaf_n = [], []
        while len(pi):
            keep = self._box_dist2(points[pi], ni) <= ub[pi] * (1 + 1e-12) + 1e-300
            pi, ni = pi[keep], ni[keep]
            is_leaf = self.left[ni] < 0
            leaf_p.append(pi[is_leaf])
            leaf_n.append(ni[is_leaf])
            pi, ni = pi[~is_leaf], ni[~is_leaf]
            pi = np.concatenate([pi, pi])
            ni = np.concatenate([self.left[ni], self.right[ni]])
        lp = np.concatenate(leaf_p)
        ln = np.concatenate(leaf_n)
        cnt = self.count[ln]
        rep_p = np.repeat(lp, cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        faces = self.order[np.repeat(self.start[ln], cnt) + offs]
        return rep_p, faces


def _nearest_over_pairs(mesh, points, pidx, fidx):
    tri = mesh.triangles
    cp, code = closest_point_on_triangles(points[pidx], tri[fidx, 0], tri[fidx, 1], tri[fidx, 2])
    d2 = np.sum((points[pidx] - cp) ** 2, axis=1)
    # per point, keep the pair with smallest distance (ties -> lower face index)
    order = np.lexsort((fidx, d2, pidx))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pidx[order][1:] != pidx[order][:-1]
    best = order[first]
    return pidx[best], fidx[best], cp[best], code[best]


def _pseudo_normals(mesh, fidx, code):
    face_edges, edge_normals = mesh._edge_table
    n = mesh.face_normals[fidx].copy()
    vn = mesh.vertex_pseudo_normals
    for feat, corner in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
        m = code == feat
        n[m] = vn[mesh.faces[fidx[m], corner]]
    for feat, slot in ((EDGE_AB, 0), (EDGE_BC, 1), (EDGE_CA, 2)):
        m = code == feat
        n[m] = edge_normals[face_edges[fidx[m], slot]]
    return n


def signed_distance(mesh: TriMesh, points, method="bvh") -> SdfResult:
    """Signed distance from ``points`` (shape (3,) or (n, 3)) to ``mesh``.

    The sign comes from the angle-weighted pseudo-normal of the closest feature
    (face, edge or vertex), which is exact for watertight, consistently oriented
    meshes. ``method="brute"`` tests every face and exists as a reference path.
    """
    mesh._require_nonempty()
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    n = len(pts)
    dist = np.empty(n)
    closest = np.empty((n, 3))
    normal = np.empty((n, 3))
    nf = len(mesh.faces)
    for s in range(0, n, _QUERY_CHUNK):
        chunk = pts[s:s + _QUERY_CHUNK]
        if method == "brute":
            pidx = np.repeat(np.arange(len(chunk)), nf)
            fidx = np.tile(np.arange(nf), len(chunk))
        elif method == "bvh":
            pidx, fidx = mesh.bvh.candidates(chunk)
        else:
            raise ValueError(f"unknown method {method!r}")
        pi, fi, cp, code = _nearest_over_pairs(mesh, chunk, pidx, fidx)
        pn = _pseudo_normals(mesh, fi, code)
        diff = chunk[pi] - cp
        d = np.linalg.norm(diff, axis=1)
        sign = np.where(np.einsum("ij,ij->i", diff, pn) < 0, -1.0, 1.0)
        dist[s + pi] = sign * d
        closest[s + pi] = cp
        normal[s + pi] = pn
    if single:
        return SdfResult(dist[0], closest[0], normal[0])
    return SdfResult(dist, closest, normal)


# ---------------------------------------------------------------- primitives

def _icosphere(level):
    t = (1.0 + 5**0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return np.array(verts), np.array(faces)


def make_primitive(kind, dimensions, level=3) -> TriMesh:
    """Watertight, outward-oriented primitive centred at the origin.

    * ``sphere``: ``dimensions = (radius,)``; icosphere subdivided ``level`` times
      (20 * 4**level faces), vertices scaled so the largest inward and outward
      radial deviations are equal.
    * ``box``: ``dimensions = (size_x, size_y, size_z)`` full edge lengths; 12 faces.
    * ``cylinder``: ``dimensions = (radius, height)`` along z; ``8 * 2**level``
      segments around the axis, capped with fans.
    """
    dims = np.atleast_1d(np.asarray(dimensions, dtype=float))
    if not np.all(np.isfinite(dims)) or np.any(dims <= 0):
        raise InvalidDimensions(f"dimensions must be positive, got {dims.tolist()}")
    if kind == "sphere":
        if dims.size != 1:
            raise InvalidDimensions("sphere takes (radius,)")
        v, f = _icosphere(int(level))
        # push vertices out so the faces straddle the sphere: the radial error
        # becomes +-(1-m)/(1+m) instead of [0, 1-m] for an inscribed mesh
        t = v[f]
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        m = np.min(np.abs(np.einsum("ij,ij->i", n / np.linalg.norm(n, axis=1, keepdims=True), t[:, 0])))
        return TriMesh(v * (2.0 / (1.0 + m)) * dims[0], f)
    if kind == "box":
        if dims.size != 3:
            raise InvalidDimensions("box takes (size_x, size_y, size_z)")
        h = dims / 2.0
        v = np.array(list(itertools.product(*[(-1.0, 1.0)] * 3))) * h
        # corner index = 4*ix + 2*iy + iz
        f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),   # -x, +x
             (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),   # -y, +y
             (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]   # -z, +z
        return TriMesh(v, f)
    if kind == "cylinder":
        if dims.size != 2:
            raise InvalidDimensions("cylinder takes (radius, height)")
        r, h = dims
        n = 8 * 2 ** int(level)
        ang = 2 * np.pi * np.arange(n) / n
        ring = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        bottom = np.column_stack([ring, np.full(n, -h / 2)])
        top = np.column_stack([ring, np.full(n, h / 2)])
        v = np.vstack([bottom, top, [[0, 0, -h / 2], [0, 0, h / 2]]])
        cb, ct = 2 * n, 2 * n + 1
        f = []
        for i in range(n):
            j = (i + 1) % n
            f += [(i, j, n + j), (i, n + j, n + i), (cb, j, i), (ct, n + i, n + j)]
        return TriMesh(v, f)
    raise InvalidDimensions(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------- keypoints

def _box_keypoints(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    center = (lo + hi) / 2.0
    corners = np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
                        for i, j, k in itertools.product((0, 1), repeat=3)])
    edges = [(corners[i] + corners[j]) / 2.0 for i, j in BOX_EDGES]
    faces = []
    for axis in range(3):
        for side in (lo, hi):
            p = center.copy()
            p[axis] = side[axis]
            faces.append(p)
    return np.vstack([center[None], corners, np.array(edges), np.array(faces)])


# (corner_a, corner_b) index pairs into the 8 corners, in edge-midpoint order
BOX_EDGES = []
for _axis in range(3):
    _others = [a for a in range(3) if a != _axis]
    for _s1, _s2 in itertools.product((0, 1), repeat=2):
        _i0 = [0, 0, 0]
        _i0[_others[0]], _i0[_others[1]] = _s1, _s2
        _i1 = list(_i0)
        _i1[_axis] = 1
        BOX_EDGES.append((4 * _i0[0] + 2 * _i0[1] + _i0[2], 4 * _i1[0] + 2 * _i1[1] + _i1[2]))
BOX_EDGES = tuple(BOX_EDGES)


def bbox_keypoints_27(mesh: TriMesh):
    """27 object-frame keypoints from the axis-aligned bounding box.

    Order: index 0 center; 1-8 corners (``4*ix + 2*iy + iz`` with 0 = min side);
    9-20 edge midpoints (x-parallel edges first, then y, then z, see
    :data:`BOX_EDGES`); 21-26 face midpoints (-x, +x, -y, +y, -z, +z).
    """
    if len(mesh.vertices) == 0:
        raise EmptyMesh("mesh has no vertices")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return _box_keypoints(lo, hi)


def bbox_corners(mesh: TriMesh):
    return bbox_keypoints_27(mesh)[1:9]


# ---------------------------------------------------------------- OBJ

def save_obj(mesh: TriMesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def load_obj(path) -> TriMesh:
    """Read the ``v``/``f`` subset of Wavefront OBJ; polygons are fan-triangulated."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ParseError("vertex needs 3 coordinates", lineno)
            try:
                verts.append([float(x) for x in rest[:3]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {raw.strip()!r}", lineno) from None
        elif tag == "f":
            if len(rest) < 3:
                raise ParseError("face needs at least 3 vertices", lineno)
            idx = []
            for tok in rest:
                try:
                    i = int(tok.split("/", 1)[0])
                except ValueError:
                    raise ParseError(f"bad face index {tok!r}", lineno) from None
                if i == 0:
                    raise ParseError("face index 0 is invalid in OBJ", lineno)
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise ParseError(f"face index {tok!r} out of range", lineno)
                idx.append(i)
            faces += [(idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1)]
    if not verts or not faces:
        raise EmptyMesh(f"{os.fspath(path)} contains no faces")
    return TriMesh(verts, faces)
