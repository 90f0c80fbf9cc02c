import numpy as np
import pytest

from graspforge.errors import EmptyMesh, InvalidDimensions, IoError, ParseError
from graspforge.mesh import (BOX_EDGES, TriMesh, bbox_keypoints_27, load_obj, make_primitive, save_obj,
                             signed_distance)


@pytest.fixture(scope="module")
def sphere4():
    return make_primitive("sphere", (1.0,), level=4)


def test_box_counts_and_volume():
    m = make_primitive("box", (0.1, 0.1, 0.1))
    assert len(m.vertices) == 8 and len(m.faces) == 12
    assert abs(m.volume - 1e-3) < 1e-12
    assert m.is_watertight()


def test_sphere_area_within_one_percent():
    r = 0.05
    m = make_primitive("sphere", (r,), level=3)
    assert abs(m.area - 4 * np.pi * r**2) / (4 * np.pi * r**2) < 0.01
    assert m.is_watertight() and m.volume > 0


def test_cylinder_vertices_on_implicit_surface():
    r, h = 0.03, 0.1
    m = make_primitive("cylinder", (r, h))
    v = m.vertices
    rho = np.hypot(v[:, 0], v[:, 1])
    on_side = np.isclose(rho, r, atol=1e-12)
    on_cap = np.isclose(np.abs(v[:, 2]), h / 2, atol=1e-12) & (rho <= r + 1e-12)
    assert np.all(on_side | on_cap)
    assert m.is_watertight() and m.volume > 0


@pytest.mark.parametrize("kind,dims", [("sphere", (0.0,)), ("box", (1, -1, 1)), ("cylinder", (1,)), ("cone", (1,))])
def test_invalid_dimensions(kind, dims):
    with pytest.raises(InvalidDimensions):
        make_primitive(kind, dims)


def test_sdf_sphere_examples(sphere4):
    assert abs(signed_distance(sphere4, [0, 0, 2.0]).distance - 1.0) < 1e-3
    assert abs(signed_distance(sphere4, [0, 0, 0.0]).distance + 1.0) < 1e-3


def test_sdf_matches_analytic_sphere(sphere4, rng):
    p = rng.uniform(-2, 2, size=(1000, 3))
    res = signed_distance(sphere4, p)
    assert np.max(np.abs(res.distance - (np.linalg.norm(p, axis=1) - 1.0))) < 1e-3
    assert np.allclose(np.linalg.norm(res.normal, axis=1), 1.0)


def test_sdf_bvh_matches_brute(rng):
    for m in (make_primitive("box", (0.2, 0.1, 0.05)), make_primitive("cylinder", (0.03, 0.1), level=2)):
        p = rng.uniform(-0.15, 0.15, size=(400, 3))
        a, b = signed_distance(m, p), signed_distance(m, p, method="brute")
        assert np.allclose(a.distance, b.distance, atol=1e-12)


def test_sdf_closest_point_on_surface(rng):
    m = make_primitive("box", (0.2, 0.1, 0.05))
    res = signed_distance(m, rng.uniform(-0.3, 0.3, size=(300, 3)))
    again = signed_distance(m, res.closest)
    assert np.max(np.abs(again.distance)) < 1e-12


def test_sdf_sign_flips_once_along_axis_rays():
    for m in (make_primitive("box", (0.2, 0.1, 0.05)), make_primitive("cylinder", (0.03, 0.1)),
              make_primitive("sphere", (0.05,))):
        for axis in range(3):
            t = np.linspace(-0.3, 0.3, 601) + 1e-4
            p = np.zeros((len(t), 3))
            p[:, axis] = t
            s = np.sign(signed_distance(m, p).distance)
            assert np.count_nonzero(np.diff(s)) == 2   # in once, out once


def test_sdf_is_1_lipschitz(rng):
    m = make_primitive("cylinder", (0.03, 0.1), level=2)
    p = rng.uniform(-0.1, 0.1, size=(500, 3))
    q = p + rng.normal(scale=0.02, size=p.shape)
    dp, dq = signed_distance(m, p).distance, signed_distance(m, q).distance
    assert np.all(np.abs(dp - dq) <= np.linalg.norm(p - q, axis=1) + 1e-12)


def test_sdf_empty_mesh():
    with pytest.raises(EmptyMesh):
        signed_distance(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), [0, 0, 0])


def test_keypoints_unit_cube():
    kp = bbox_keypoints_27(make_primitive("box", (1, 1, 1)))
    assert kp.shape == (27, 3)
    assert np.allclose(kp[0], 0)
    assert np.allclose(np.abs(kp[1:9]), 0.5)
    assert np.allclose(kp[1], [-0.5, -0.5, -0.5]) and np.allclose(kp[8], [0.5, 0.5, 0.5])
    assert np.allclose(kp[22], [0.5, 0, 0])
    # faces: -x, +x, -y, +y, -z, +z
    assert np.allclose(kp[21:], np.vstack([-np.eye(3), np.eye(3)])[[0, 3, 1, 4, 2, 5]] * 0.5)


def test_keypoints_translation_equivariant(rng):
    m = make_primitive("cylinder", (0.03, 0.1))
    t = rng.normal(size=3)
    assert np.allclose(bbox_keypoints_27(m.transformed(np.eye(3), t)), bbox_keypoints_27(m) + t, atol=1e-12)


def test_edge_midpoints_are_corner_means():
    kp = bbox_keypoints_27(make_primitive("sphere", (0.04,), level=2).transformed(np.eye(3), [0.1, 0.2, 0.3]))
    corners = kp[1:9]
    for e, (i, j) in enumerate(BOX_EDGES):
        assert np.allclose(kp[9 + e], (corners[i] + corners[j]) / 2, atol=1e-15)
        assert np.count_nonzero(corners[i] != corners[j]) == 1   # adjacent corners


def test_obj_roundtrip(tmp_path):
    m = make_primitive("sphere", (0.05,), level=2)
    save_obj(m, tmp_path / "s.obj")
    back = load_obj(tmp_path / "s.obj")
    assert np.max(np.abs(back.vertices - m.vertices)) < 1e-8
    assert np.array_equal(back.faces, m.faces)


def test_obj_slash_suffixes_ignored(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1/1/1 3//2 2\nf 1 2 4\nf 1 4 3\nf 2 3 4\n")
    assert len(load_obj(p).faces) == 4


def test_obj_malformed_face_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n")
    with pytest.raises(ParseError) as e:
        load_obj(p)
    assert e.value.line == 4 and "line 4" in str(e.value)


def test_obj_empty_file(tmp_path):
    p = tmp_path / "empty.obj"
    p.write_text("")
    with pytest.raises(EmptyMesh):
        load_obj(p)


def test_obj_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_obj(tmp_path / "nope.obj")
