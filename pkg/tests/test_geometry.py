import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from rayprior.geometry import (
    Camera,
    Ray,
    SphericalDir,
    camera_rays,
    dir_from_spherical,
    dirs_from_spherical,
    look_at,
    pixel_ray,
    pose_distance,
    ray_sphere_bounds,
    so3_exp,
    so3_log,
    spherical_from_dir,
    spherical_from_dirs,
)


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def cam100():
    return Camera(100.0, 100.0, 50.0, 50.0, 100, 100, np.eye(3), np.zeros(3))


unit_vectors = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(
    lambda v: np.linalg.norm(v) > 1e-3
).map(lambda v: np.asarray(v) / np.linalg.norm(v))


class TestCamera:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Camera(1.0, 1.0, 0.5, 0.5, 2, 2, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            Camera(1.0, 1.0, 0.5, 0.5, 2, 2, np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(0.0, 1.0, 0.5, 0.5, 2, 2, np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            Camera(1.0, 1.0, 2.0, 0.5, 2, 2, np.eye(3), np.zeros(3))

    def test_w2c_inverts_c2w(self):
        cam = Camera.from_pose(look_at([1.0, 2.0, 3.0]), fx=50, width=64, height=64)
        np.testing.assert_allclose(cam.pose_w2c @ cam.pose_c2w, np.eye(4), atol=1e-12)

    def test_look_at_points_forward(self):
        T = look_at([0.0, -4.0, 1.0])
        fwd = T[:3, 2]
        np.testing.assert_allclose(fwd, -T[:3, 3] / np.linalg.norm(T[:3, 3]), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(T[:3, :3]), 1.0, atol=1e-12)

    def test_look_at_from_pole(self):
        T = look_at([0.0, 0.0, 4.0])
        np.testing.assert_allclose(T[:3, 2], [0, 0, -1], atol=1e-12)


class TestPixelRay:
    def test_principal_ray(self, cam100):
        r = pixel_ray(cam100, 49.5, 49.5)
        np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-12)

    def test_45_degree_ray(self, cam100):
        u = 100.0 + 50.0 - 0.5  # (u + 0.5 - cx) / fx = 1
        cam = Camera(100.0, 100.0, 50.0, 50.0, 200, 100, np.eye(3), np.zeros(3))
        r = pixel_ray(cam, u, 49.5)
        np.testing.assert_allclose(r.direction, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-12)

    def test_translation_moves_origin_only(self):
        cam = Camera(100.0, 100.0, 50.0, 50.0, 100, 100, np.eye(3), [0.0, 0.0, -4.0])
        r = pixel_ray(cam, 49.5, 49.5)
        np.testing.assert_allclose(r.origin, [0, 0, -4])
        np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-12)

    def test_out_of_bounds(self, cam100):
        with pytest.raises(ValueError):
            pixel_ray(cam100, 100, 3)
        with pytest.raises(ValueError):
            pixel_ray(cam100, -1, 3)

    def test_unit_norm_over_image(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            R = Rotation.random(random_state=rng).as_matrix()
            cam = Camera(rng.uniform(20, 200), rng.uniform(20, 200), 31.0, 17.0, 64, 48, R, rng.normal(size=3))
            _, d = camera_rays(cam)
            assert np.abs(np.linalg.norm(d, axis=-1) - 1).max() < 1e-9

    def test_camera_rays_match_pixel_ray(self):
        cam = Camera.from_pose(look_at([2.0, -3.0, 1.0]), fx=40, width=32, height=24)
        o, d = camera_rays(cam)
        for u, v in [(0, 0), (31, 23), (10, 5)]:
            r = pixel_ray(cam, u, v)
            np.testing.assert_allclose(d[v, u], r.direction, atol=1e-12)
            np.testing.assert_allclose(o[v, u], r.origin)

    def test_ray_validation(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), [1.0, 1.0, 0.0], 0.0, 1.0)
        with pytest.raises(ValueError):
            Ray(np.zeros(3), [1.0, 0.0, 0.0], 2.0, 1.0)


class TestSphereBounds:
    def test_hit_and_miss(self):
        o = np.array([[0.0, 0.0, -4.0], [0.0, 2.0, -4.0]])
        d = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        near, far, hit = ray_sphere_bounds(o, d, 1.2)
        assert hit.tolist() == [True, False]
        np.testing.assert_allclose([near[0], far[0]], [2.8, 5.2])

    def test_inside_origin_clamps_near(self):
        near, far, hit = ray_sphere_bounds(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), 1.0)
        assert hit[0] and near[0] == 0.0 and far[0] == pytest.approx(1.0)


class TestSpherical:
    @pytest.mark.parametrize("theta,phi,expected", [
        (0.0, 0.0, (1, 0, 0)),
        (np.pi / 2, 1.234, (0, 0, 1)),
        (0.0, np.pi / 2, (0, 1, 0)),
    ])
    def test_dir_from_spherical(self, theta, phi, expected):
        np.testing.assert_allclose(dir_from_spherical(SphericalDir(theta, phi)), expected, atol=1e-15)

    @pytest.mark.parametrize("d,expected", [
        ((0, 0, 1), (np.pi / 2, 0.0)),
        ((1, 0, 0), (0.0, 0.0)),
        ((0, -1, 0), (0.0, -np.pi / 2)),
    ])
    def test_spherical_from_dir(self, d, expected):
        s = spherical_from_dir(d)
        assert s.theta == pytest.approx(expected[0], abs=1e-15)
        assert s.phi == pytest.approx(expected[1], abs=1e-15)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            spherical_from_dir((1.0, 1.0, 0.0))

    @given(st.floats(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6), st.floats(-np.pi + 1e-9, np.pi))
    def test_round_trip_angles(self, theta, phi):
        s = spherical_from_dir(dir_from_spherical(SphericalDir(theta, phi)))
        assert s.theta == pytest.approx(theta, abs=1e-9)
        assert s.phi == pytest.approx(phi, abs=1e-9)

    @given(unit_vectors)
    def test_round_trip_vectors(self, d):
        if abs(d[2]) >= 1 - 1e-9:
            return
        back = dirs_from_spherical(*spherical_from_dirs(d))
        np.testing.assert_allclose(back, d, atol=1e-8)


class TestSO3:
    def test_log_identity(self):
        np.testing.assert_array_equal(so3_log(np.eye(3)), np.zeros(3))

    def test_log_quarter_turn(self):
        np.testing.assert_allclose(so3_log(rot_z(np.pi / 2)), [0, 0, np.pi / 2], atol=1e-12)

    def test_exp_matches_scipy(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = rng.normal(size=3) * rng.uniform(0, 3)
            np.testing.assert_allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)

    def test_random_round_trip(self):
        rng = np.random.default_rng(2)
        for R in Rotation.random(500, random_state=rng).as_matrix():
            back = Rotation.from_rotvec(so3_log(R)).as_matrix()
            np.testing.assert_allclose(back, R, atol=1e-8)

    @pytest.mark.parametrize("angle", [1e-9, 1e-7, 1e-5, np.pi - 1e-3, np.pi - 1e-5, np.pi - 1e-8, np.pi])
    def test_branch_edges(self, angle):
        axis = np.array([0.3, -0.5, 0.8])
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(angle * axis).as_matrix()
        w = so3_log(R)
        np.testing.assert_allclose(Rotation.from_rotvec(w).as_matrix(), R, atol=1e-8)
        assert np.linalg.norm(w) <= np.pi + 1e-9

    @settings(max_examples=200)
    @given(st.tuples(*[st.floats(-4, 4, allow_nan=False)] * 3))
    def test_log_norm_bounded(self, w):
        assert np.linalg.norm(so3_log(Rotation.from_rotvec(w).as_matrix())) <= np.pi + 1e-9


class TestPoseDistance:
    def test_identity(self):
        assert pose_distance(np.eye(3), [np.eye(3)]) == 0.0

    def test_quarter_turn(self):
        assert pose_distance(rot_z(np.pi / 2), [np.eye(3)]) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_nearest_of_set(self):
        assert pose_distance(rot_z(0.4), [rot_z(0.1), rot_z(0.3)]) == pytest.approx(0.1, abs=1e-12)

    def test_empty_set(self):
        with pytest.raises(ValueError):
            pose_distance(np.eye(3), [])

    def test_member_and_symmetry(self):
        rng = np.random.default_rng(3)
        X = list(Rotation.random(8, random_state=rng).as_matrix())
        for x in X:
            assert pose_distance(x, X) == pytest.approx(0.0, abs=1e-12)
        y = Rotation.random(random_state=rng).as_matrix()
        d = pose_distance(y, X)
        # independent oracle: scipy rotation vectors
        logs = [Rotation.from_matrix(x).as_rotvec() for x in X]
        wy = Rotation.from_matrix(y).as_rotvec()
        dists = [np.linalg.norm(lx - wy) for lx in logs]
        assert d == pytest.approx(min(dists), abs=1e-9)
        nearest = X[int(np.argmin(dists))]
        assert pose_distance(nearest, [y]) == pytest.approx(d, abs=1e-12)
