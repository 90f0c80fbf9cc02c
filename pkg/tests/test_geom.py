import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from graspforge.errors import BehindCamera, DegenerateConfiguration, DegenerateRotation
from graspforge.geom import (CameraIntrinsics, aa_to_matrix, canonical_aa, chordal_mean, geodesic_angle,
                             matrix_to_aa, matrix_to_quat, matrix_to_rot6d, procrustes_align, project_pinhole,
                             project_points, quat_to_matrix, rot6d_to_matrix, unproject)

from conftest import random_rotations

finite3 = arrays(np.float64, 3, elements=st.floats(-6.0, 6.0))


def test_aa_zero_is_identity():
    assert np.array_equal(aa_to_matrix(np.zeros(3)), np.eye(3))


def test_aa_quarter_turn_about_z():
    R = aa_to_matrix([0.0, 0.0, np.pi / 2])
    assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_aa_roundtrip_matches_canonical(rng):
    r = rng.normal(scale=2.5, size=(500, 3))
    # stay away from the antipodal angle, where the axis sign is ambiguous
    keep = np.abs(np.mod(np.linalg.norm(r, axis=1), 2 * np.pi) - np.pi) > 1e-3
    r = r[keep]
    assert np.allclose(matrix_to_aa(aa_to_matrix(r)), canonical_aa(r), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(finite3)
def test_aa_is_proper_rotation(r):
    R = aa_to_matrix(r)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_canonical_aa_magnitude_at_most_pi(rng):
    r = rng.normal(scale=10.0, size=(1000, 3))
    c = canonical_aa(r)
    assert np.all(np.linalg.norm(c, axis=1) <= np.pi + 1e-12)
    assert np.allclose(aa_to_matrix(c), aa_to_matrix(r), atol=1e-10)


def test_quaternion_roundtrip(rng):
    R = random_rotations(rng, 200)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_rot6d_identity_and_scale_invariance():
    assert np.allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3), atol=0)
    assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=0)


def test_rot6d_roundtrip(rng):
    R = random_rotations(rng, 500)
    assert np.max(np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R)) < 1e-10


def test_rot6d_parallel_columns_raise():
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix([0, 0, 0, 0, 1, 0])


def test_rot6d_result_is_proper(rng):
    M = rot6d_to_matrix(rng.normal(size=(300, 6)))
    assert np.allclose(np.swapaxes(M, 1, 2) @ M, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(M), 1.0)


def test_project_pinhole_examples():
    k = CameraIntrinsics(500, 500, 32, 32, 64, 64)
    assert np.allclose(project_pinhole([0, 0, 1], k), [[32, 32]])
    assert np.allclose(project_pinhole([0.1, 0, 1], k), [[82, 32]])


def test_project_behind_camera():
    k = CameraIntrinsics(500, 500, 32, 32, 64, 64)
    with pytest.raises(BehindCamera):
        project_pinhole([0.0, 0.0, 0.0], k)
    uv, valid = project_points([[0, 0, -1.0], [0, 0, 1.0]], k)
    assert list(valid) == [False, True] and np.all(np.isnan(uv[0]))


def test_unproject_inverts_projection(rng):
    k = CameraIntrinsics(600, 610, 128, 120, 256, 256)
    p = rng.uniform([-0.3, -0.3, 0.1], [0.3, 0.3, 2.0], size=(1000, 3))
    uv = project_pinhole(p, k)
    assert np.max(np.abs(unproject(uv, p[:, 2], k) - p)) < 1e-9


def test_projection_homogeneous(rng):
    k = CameraIntrinsics(600, 600, 128, 128, 256, 256)
    p = rng.uniform([-0.3, -0.3, 0.1], [0.3, 0.3, 2.0], size=(100, 3))
    lam = rng.uniform(0.1, 10.0, size=(100, 1))
    assert np.allclose(project_pinhole(lam * p, k), project_pinhole(p, k), atol=1e-9)


def test_intrinsics_validation():
    from graspforge.errors import InvalidParameter
    with pytest.raises(InvalidParameter):
        CameraIntrinsics(-1, 1, 0, 0, 10, 10)
    with pytest.raises(InvalidParameter):
        CameraIntrinsics(1, 1, 20, 0, 10, 10)


def test_procrustes_identity(rng):
    x = rng.normal(size=(20, 3))
    s = procrustes_align(x, x)
    assert np.isclose(s.scale, 1.0) and np.allclose(s.R, np.eye(3)) and np.allclose(s.t, 0, atol=1e-12)
    assert np.allclose(s.apply(x), x, atol=1e-12)


def test_procrustes_recovers_similarity(rng):
    x = rng.normal(size=(30, 3))
    R = random_rotations(rng, 1)[0]
    t = rng.normal(size=3)
    s = procrustes_align(x, 2.0 * x @ R.T + t)
    assert abs(s.scale - 2.0) < 1e-9
    assert np.max(np.abs(s.R - R)) < 1e-9 and np.max(np.abs(s.t - t)) < 1e-9


def test_procrustes_rigid_mode(rng):
    x = rng.normal(size=(30, 3))
    R = random_rotations(rng, 1)[0]
    s = procrustes_align(x, 3.0 * x @ R.T, with_scale=False)
    assert s.scale == 1.0 and np.allclose(s.R, R, atol=1e-9)


def test_procrustes_noisy_beats_identity(rng):
    for _ in range(50):
        x = rng.normal(size=(15, 3))
        y = 1.3 * x @ random_rotations(rng, 1)[0].T + rng.normal(size=3) + 0.05 * rng.normal(size=(15, 3))
        res = np.sum((procrustes_align(x, y).apply(x) - y) ** 2)
        assert res <= np.sum((x - y) ** 2)


def test_procrustes_invariant_to_source_rigid_motion(rng):
    x = rng.normal(size=(15, 3))
    y = x + 0.1 * rng.normal(size=(15, 3))
    R = random_rotations(rng, 1)[0]
    x2 = x @ R.T + rng.normal(size=3)
    r1 = np.sum((procrustes_align(x, y).apply(x) - y) ** 2)
    r2 = np.sum((procrustes_align(x2, y).apply(x2) - y) ** 2)
    assert np.isclose(r1, r2, rtol=1e-9)


def test_procrustes_collinear_raises():
    x = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(x, x)


def test_chordal_mean_symmetric_pair():
    for deg in (5, 15, 30):
        a = np.radians(deg)
        Rs = aa_to_matrix([[0, 0, a], [0, 0, -a]])
        assert geodesic_angle(chordal_mean(Rs), np.eye(3)) < 1e-9
