"""Cameras, rays, spherical directions and rotation-group utilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

_ORTHO_TOL = 1e-6
_UNIT_TOL = 1e-6


def check_rotation(R, tol=_ORTHO_TOL):
    """Return ``R`` as a float64 3x3 array, raising if it is not in SO(3)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("rotation contains non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or np.linalg.det(R) <= 0:
        raise ValueError("matrix is not a proper rotation (R^T R != I or det <= 0)")
    return R


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. The camera looks down its +z axis, x right, y down."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # camera -> world
    translation: np.ndarray  # camera center in world

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        R = check_rotation(self.rotation, tol=1e-9)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_pose(cls, pose_c2w, *, fx, fy=None, cx=None, cy=None, width, height):
        pose = np.asarray(pose_c2w, dtype=np.float64)
        fy = fx if fy is None else fy
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, int(width), int(height), pose[:3, :3], pose[:3, 3])

    @property
    def center(self):
        return self.translation

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def pose_c2w(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def pose_w2c(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation.T
        T[:3, 3] = -self.rotation.T @ self.translation
        return T


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + t * self.direction


class SphericalDir(NamedTuple):
    theta: float  # elevation above the xy-plane
    phi: float  # azimuth


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera->world 4x4 pose whose +z axis points from ``eye`` to ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = right, down, forward, eye
    return T


def pixel_ray(cam: Camera, u: float, v: float, t_near=0.0, t_far=np.inf) -> Ray:
    """Ray through the center of pixel ``(u, v)``, i.e. image point ``(u+0.5, v+0.5)``."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    d_cam = np.array([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0])
    d = cam.rotation @ d_cam
    d /= np.linalg.norm(d)
    return Ray(cam.center.copy(), d, t_near, t_far)


def camera_rays(cam: Camera):
    """Origins and unit directions for every pixel, each shaped (H, W, 3)."""
    u, v = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def ray_sphere_bounds(origins, dirs, radius, center=(0.0, 0.0, 0.0)):
    """Entry/exit distances of rays against a sphere.

    Returns ``(t_near, t_far, hit)``; entries where ``hit`` is False are zero.
    Origins inside the sphere get ``t_near = 0``.
    """
    oc = np.asarray(origins, dtype=np.float64) - np.asarray(center)
    d = np.asarray(dirs, dtype=np.float64)
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    s = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - s, 0.0)
    far = -b + s
    hit &= far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


def dirs_from_spherical(theta, phi):
    """Vectorized ``(cos t cos p, cos t sin p, sin t)``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


def spherical_from_dirs(d):
    """Vectorized inverse of :func:`dirs_from_spherical`; azimuth is 0 at the poles."""
    d = np.asarray(d, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise ValueError("spherical conversion requires unit vectors")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(z, rho)
    phi = np.where(rho > 1e-12, np.arctan2(y, x), 0.0)
    # arctan2 returns -pi for (-x, -0.0); keep azimuth in (-pi, pi]
    phi = np.where(phi <= -np.pi, np.pi, phi)
    return theta, phi


def dir_from_spherical(s: SphericalDir):
    return dirs_from_spherical(s.theta, s.phi)


def spherical_from_dir(d) -> SphericalDir:
    theta, phi = spherical_from_dirs(np.asarray(d, dtype=np.float64).reshape(3))
    return SphericalDir(float(theta), float(phi))


def hat(w):
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w):
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(w)
    K = hat(w)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + np.sin(angle) / angle * K
        + (1 - np.cos(angle)) / angle**2 * K @ K
    )


def so3_log(R):
    """Rotation vector of ``R`` with angle in [0, pi]."""
    R = check_rotation(R)
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_a)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        # first order: R - R^T ~ 2 hat(w)
        return 0.5 * skew
    if np.pi - angle > 1e-4:
        return angle / (2.0 * np.sin(angle)) * skew
    # near pi: sin(angle) is unreliable, recover the axis from the symmetric part
    B = 0.5 * (R + R.T) - cos_a * np.eye(3)
    B /= 1.0 - cos_a
    i = int(np.argmax(np.diag(B)))
    axis = B[i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ skew < 0:
        axis = -axis
    return angle * axis


def pose_distance(y, X):
    """Minimum rotation-vector distance from ``y`` to a non-empty set ``X`` of rotations."""
    X = list(X)
    if not X:
        raise ValueError("pose_distance needs at least one reference rotation")
    wy = so3_log(y)
    logs = np.array([so3_log(x) for x in X])
    return float(np.min(np.linalg.norm(logs - wy, axis=1)))
