import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npnf import ad, geom

# principal point on a pixel centre: pixel (3, 3) looks straight down +z
K8 = geom.Intrinsics(fx=4.0, fy=5.0, cx=3.5, cy=3.5, width=8, height=8)

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def random_transform(rng):
    return geom.pose_to_transform(np.concatenate([rng.normal(size=3), rng.normal(size=3)]))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        geom.Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        geom.Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_exp_so3_identity_and_quarter_turn():
    np.testing.assert_array_equal(geom.exp_so3(np.zeros(3)), np.eye(3))
    R = geom.exp_so3(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_exp_so3_inverse_composition():
    rng = np.random.default_rng(1)
    for _ in range(50):
        phi = rng.normal(size=3)
        np.testing.assert_allclose(geom.exp_so3(phi) @ geom.exp_so3(-phi), np.eye(3), atol=1e-12)


def test_exp_so3_orthonormal_many():
    rng = np.random.default_rng(2)
    for phi in rng.normal(scale=2.0, size=(10_000, 3)):
        R = geom.exp_so3(phi)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-10
        assert abs(np.linalg.det(R) - 1.0) < 1e-10


@pytest.mark.parametrize("norm", [1e-8, 1e-3, 1.0, 3.0])
def test_exp_so3_jacobian_matches_fd(norm):
    rng = np.random.default_rng(3)
    axis = rng.normal(size=3)
    phi0 = axis / np.linalg.norm(axis) * norm
    w = rng.normal(size=(3, 3))
    tape = ad.Tape()
    p = tape.leaf(phi0)
    (g,) = ad.backward(tape, ad.sum_(geom.exp_so3(p) * w), [p])
    fd = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-5
        fd[k] = (np.sum(geom.exp_so3(phi0 + e) * w) - np.sum(geom.exp_so3(phi0 - e) * w)) / 2e-5
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-5


def test_log_exp_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(phi)
        np.testing.assert_allclose(geom.log_so3(geom.exp_so3(phi)), phi, atol=1e-9)
    # half turn
    R = geom.exp_so3(np.array([np.pi, 0.0, 0.0]))
    np.testing.assert_allclose(np.abs(geom.log_so3(R)), [np.pi, 0, 0], atol=1e-9)


def test_canonical_wraps_long_rotation_vectors():
    phi = np.array([0.0, 0.0, 1.5 * np.pi])
    c = geom.PoseParam(phi, np.zeros(3)).canonical()
    assert np.linalg.norm(c.phi) < np.pi
    np.testing.assert_allclose(geom.exp_so3(c.phi), geom.exp_so3(phi), atol=1e-12)


def test_pose_to_transform_zero_and_centre():
    T = geom.pose_to_transform(geom.PoseParam.identity())
    np.testing.assert_array_equal(T.R, np.eye(3))
    np.testing.assert_array_equal(T.t, np.zeros(3))
    p = geom.PoseParam(np.array([0.2, -0.1, 0.4]), np.array([1.0, 2.0, 3.0]))
    T = geom.pose_to_transform(p)
    np.testing.assert_allclose(geom.camera_center(T), -T.R.T @ T.t, atol=1e-15)
    np.testing.assert_allclose(T.apply(geom.camera_center(T)[None]), [[0, 0, 0]], atol=1e-12)


def test_relative_pose_cases():
    rng = np.random.default_rng(5)
    Ti, Tj = random_transform(rng), random_transform(rng)
    I = geom.RigidTransform.identity()
    rel = geom.relative_pose(Ti, Ti)
    np.testing.assert_allclose(rel.matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(geom.relative_pose(I, Tj).matrix(), Tj.matrix(), atol=1e-12)
    # identity second frame gives the inverse
    np.testing.assert_allclose(geom.relative_pose(Ti, I).matrix(), np.linalg.inv(Ti.matrix()),
                               atol=1e-12)
    # two-step oracle through world coordinates
    x = rng.normal(size=(5, 3))
    world = (x - Ti.t) @ Ti.R          # R^T (x - t)
    np.testing.assert_allclose(geom.relative_pose(Ti, Tj).apply(x), Tj.apply(world), atol=1e-12)


def test_relative_pose_chain():
    rng = np.random.default_rng(6)
    for _ in range(20):
        Ti, Tj, Tk = (random_transform(rng) for _ in range(3))
        lhs = geom.relative_pose(Ti, Tk)
        rhs = geom.relative_pose(Tj, Tk).compose(geom.relative_pose(Ti, Tj))
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-10)


def test_backproject_examples():
    np.testing.assert_allclose(geom.backproject(np.array([1.0]), K8, np.array([[3, 3]])),
                               [[0.0, 0.0, 1.0]])
    # principal point plus one focal length to the right
    px = np.array([[3 + 4, 3]])
    np.testing.assert_allclose(geom.backproject(np.array([2.0]), K8, px), [[2.0, 0.0, 2.0]])
    with pytest.raises(geom.NonPositiveDepth):
        geom.backproject(np.array([0.0]), K8, np.array([[1, 1]]))


def test_backproject_depth_map_indexing():
    D = np.arange(64, dtype=float).reshape(8, 8) + 1.0
    pts = geom.backproject(D, K8, np.array([[2, 5]]))
    assert pts[0, 2] == D[5, 2]


def test_project_examples():
    uv, mask = geom.project(np.array([[0.0, 0.0, 1.0], [0.3, 0.1, 0.0], [100.0, 0.0, 1.0]]), K8)
    np.testing.assert_allclose(uv[0], [3.0, 3.0])
    assert mask.tolist() == [True, False, False]


@given(st.integers(0, 7), st.integers(0, 7), st.floats(0.1, 50.0))
def test_project_backproject_round_trip(u, v, d):
    px = np.array([[u, v]])
    uv, mask = geom.project(geom.backproject(np.array([d]), K8, px), K8)
    assert mask[0]
    np.testing.assert_allclose(uv, px, atol=1e-9)


def test_camera_ray_examples():
    ray = geom.camera_ray(geom.PoseParam.identity(), K8, (3, 3))
    np.testing.assert_allclose(ray.origin, 0.0)
    np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0])
    ray = geom.camera_ray(geom.PoseParam(np.zeros(3), np.array([0.0, 0.0, -5.0])), K8, (3, 3))
    np.testing.assert_allclose(ray.origin, [0.0, 0.0, 5.0])


def test_camera_ray_passes_through_point():
    rng = np.random.default_rng(7)
    for _ in range(20):
        pose = np.concatenate([rng.normal(scale=0.3, size=3), rng.normal(size=3)])
        T = geom.pose_to_transform(pose)
        cam = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1, 5)])
        world = T.inverse().apply(cam[None])[0]
        uv, _ = geom.project(cam[None], K8)
        ray = geom.camera_ray(pose, K8, uv[0])
        along = world - ray.origin
        off = along - np.dot(along, ray.direction) * ray.direction
        assert np.linalg.norm(off) < 1e-9
        assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12


@settings(max_examples=50)
@given(vec3, vec3)
def test_rigid_transform_valid(phi, t):
    T = geom.pose_to_transform(np.concatenate([phi, t]))
    assert T.is_valid()
    np.testing.assert_allclose(T.compose(T.inverse()).matrix(), np.eye(4), atol=1e-10)


def test_ray_cosines_convert_distance_to_z():
    px = np.array([[0, 0], [3, 3], [7, 2]])
    rays = geom.pixel_rays(K8, px)
    unit = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    np.testing.assert_allclose(unit[:, 2], geom.ray_cosines(K8, px))
