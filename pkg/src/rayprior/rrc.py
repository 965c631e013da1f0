"""Random ray casting: virtual rays through recovered surface points, labelled
with the color of the real pixel they were derived from."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import dirs_from_spherical, spherical_from_dirs

POLE_GUARD = 1e-4


@dataclass
class RayBatch:
    """A batch of training rays with labels; arrays share the leading axis."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    colors: np.ndarray  # (R, 3) supervision targets
    masks: np.ndarray  # (R,) 1 = object, 0 = background
    pixel_ids: np.ndarray  # (R,) flat index into the training-pixel table
    depths: np.ndarray = None  # (R,) cached expected depth t_z
    virtual: np.ndarray = None  # (R,) bool, ray was replaced by a virtual ray
    offsets: np.ndarray = None  # (R, 2) applied (d_theta, d_phi)

    def __len__(self):
        return len(self.origins)

    def surface_points(self):
        return self.origins + self.depths[:, None] * self.dirs


@dataclass(frozen=True)
class SurfaceSample:
    origin: np.ndarray
    direction: np.ndarray
    depth: float
    color: np.ndarray
    mask: float
    t_near: float = 0.0
    t_far: float = np.inf
    pixel_id: int = -1

    @property
    def point(self):
        return self.origin + self.depth * self.direction


@dataclass(frozen=True)
class VirtualRay:
    origin: np.ndarray
    direction: np.ndarray
    color: np.ndarray
    t_near: float
    t_far: float
    pixel_id: int
    d_theta: float
    d_phi: float


def perturb_rays(origins, dirs, depths, eta, rng):
    """Re-cast rays from their surface points within an ``eta`` cone.

    The direction from the surface point back to the origin is moved by
    ``d_theta, d_phi ~ U[-eta, eta]`` in (elevation, azimuth); the new origin
    keeps the original distance ``t_z``. Elevations past the poles are clamped.
    Returns ``(new_origins, new_dirs, offsets)``.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise ValueError("surface depth must be positive")
    v = origins + depths[:, None] * dirs
    theta, phi = spherical_from_dirs(-dirs)
    offsets = rng.uniform(-eta, eta, size=(len(depths), 2))
    limit = np.pi / 2 - POLE_GUARD
    theta_new = np.clip(theta + offsets[:, 0], -limit, limit)
    # leave unperturbed rays exactly as they were, including those at the poles
    moved = np.any(offsets != 0, axis=1)
    back = dirs_from_spherical(theta_new, phi + offsets[:, 1])
    back = np.where(moved[:, None], back, -dirs)
    new_origins = v + depths[:, None] * back
    new_dirs = (v - new_origins) / depths[:, None]
    new_dirs /= np.linalg.norm(new_dirs, axis=1, keepdims=True)
    new_origins = np.where(moved[:, None], new_origins, origins)
    new_dirs = np.where(moved[:, None], new_dirs, dirs)
    return new_origins, new_dirs, offsets


def perturb_ray(s: SurfaceSample, eta, rng) -> VirtualRay:
    if s.mask < 0.5:
        raise ValueError("random ray casting needs a foreground (mask = 1) sample")
    o, d, offs = perturb_rays(s.origin[None], s.direction[None], [s.depth], eta, rng)
    return VirtualRay(o[0], d[0], np.asarray(s.color).copy(), s.t_near, s.t_far, s.pixel_id, *offs[0])


def make_rrc_batch(batch: RayBatch, eta, p_rrc, rng, per_iteration=False):
    """Swap each eligible foreground ray for a virtual ray with probability ``p_rrc``.

    Eligible rays have mask 1 and a cached depth inside ``[near, far]``. With
    ``per_iteration`` a single draw decides for the whole batch. Labels, masks
    and bounds are carried over unchanged.
    """
    n = len(batch)
    eligible = batch.masks > 0.5
    if batch.depths is not None:
        eligible &= (batch.depths >= batch.near) & (batch.depths <= batch.far) & (batch.depths > 0)
    else:
        eligible[:] = False
    if p_rrc <= 0 or not eligible.any():
        return replace(batch, virtual=np.zeros(n, bool), offsets=np.zeros((n, 2)))
    if per_iteration:
        chosen = eligible & (rng.random() < p_rrc)
    else:
        chosen = eligible & (rng.random(n) < p_rrc)
    origins, dirs = batch.origins.copy(), batch.dirs.copy()
    offsets = np.zeros((n, 2))
    idx = np.flatnonzero(chosen)
    if idx.size:
        o, d, off = perturb_rays(batch.origins[idx], batch.dirs[idx], batch.depths[idx], eta, rng)
        origins[idx], dirs[idx], offsets[idx] = o, d, off
    return replace(batch, origins=origins, dirs=dirs, virtual=chosen, offsets=offsets)
