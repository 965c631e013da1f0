"""Analytic toy scenes, dataset files, and pose-distance test splits."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, camera_rays, look_at, pose_distance, so3_log
from .images import load_mask, load_png, save_mask, save_png

SPLITS = ("train", "test-close", "test-middle", "test-far")


# --------------------------------------------------------------------------
# scene description


@dataclass
class Checker:
    """Checkerboard in (azimuth, elevation) about a primitive's center."""

    n_azimuth: int = 8
    n_elevation: int = 4
    color_a: tuple = (0.85, 0.3, 0.2)
    color_b: tuple = (0.2, 0.45, 0.85)

    def albedo(self, local):
        n = local / np.linalg.norm(local, axis=-1, keepdims=True)
        az = np.arctan2(n[..., 1], n[..., 0]) + np.pi
        el = np.arcsin(np.clip(n[..., 2], -1, 1)) + np.pi / 2
        parity = (np.floor(az / (2 * np.pi) * self.n_azimuth) + np.floor(el / np.pi * self.n_elevation)) % 2
        return np.where(parity[..., None] > 0, self.color_a, self.color_b)


@dataclass
class Stripes:
    axis: int = 2
    period: float = 0.5
    color_a: tuple = (0.9, 0.8, 0.3)
    color_b: tuple = (0.3, 0.7, 0.4)

    def albedo(self, local):
        parity = np.floor(local[..., self.axis] / (0.5 * self.period)) % 2
        return np.where(parity[..., None] > 0, self.color_a, self.color_b)


@dataclass
class Solid:
    color: tuple = (0.8, 0.8, 0.8)

    def albedo(self, local):
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), local.shape).copy()


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    texture: object = field(default_factory=Checker)

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, -1)
        c = np.sum(oc * oc, -1) - self.radius**2
        disc = b * b - c
        s = np.sqrt(np.maximum(disc, 0))
        t = np.where(-b - s > 1e-9, -b - s, -b + s)
        return np.where((disc > 0) & (t > 1e-9), t, np.inf)

    def normal(self, p):
        n = p - np.asarray(self.center)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def contains(self, p):
        return np.linalg.norm(np.asarray(p) - np.asarray(self.center)) < self.radius

    def extent(self):
        return np.linalg.norm(self.center) + self.radius


@dataclass
class Box:
    lo: tuple = (-0.5, -0.5, -0.5)
    hi: tuple = (0.5, 0.5, 0.5)
    texture: object = field(default_factory=Stripes)

    @property
    def center(self):
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (np.asarray(self.lo) - o) * inv
            t1 = (np.asarray(self.hi) - o) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)

    def normal(self, p):
        c = self.center
        half = 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))
        q = (p - c) / half
        axis = np.argmax(np.abs(q), axis=-1)
        n = np.zeros_like(p)
        np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(q, axis[..., None], -1)), -1)
        return n

    def contains(self, p):
        p = np.asarray(p)
        return bool(np.all(p > np.asarray(self.lo)) and np.all(p < np.asarray(self.hi)))

    def extent(self):
        return float(np.max(np.linalg.norm(np.stack(np.meshgrid(*zip(self.lo, self.hi)), -1).reshape(-1, 3), axis=1)))


@dataclass
class ToyScene:
    primitives: list
    light_dir: tuple = (0.3, -0.4, 0.866)  # unit vector toward the light
    intensity: float = 1.0
    specular: float = 0.0  # Phong lobe weight; 0 keeps the scene purely Lambertian
    shininess: float = 32.0
    bound_radius: float = 1.2

    def __post_init__(self):
        ld = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = tuple(ld / np.linalg.norm(ld))
        for p in self.primitives:
            if p.extent() > self.bound_radius:
                raise ValueError("primitive extends beyond the scene bounds")


def checker_sphere(specular=0.0):
    return ToyScene([Sphere()], specular=specular)


def oracle_render(scene: ToyScene, cam: Camera):
    """Ray-trace one primary ray per pixel: Lambertian shading of the nearest hit
    (plus an optional Phong lobe), black background. Returns ``(rgb, mask)``."""
    for p in scene.primitives:
        if p.contains(cam.center):
            raise ValueError("camera lies inside a scene primitive")
    o, d = camera_rays(cam)
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    ts = np.stack([p.intersect(o, d) for p in scene.primitives], axis=0)
    which = np.argmin(ts, axis=0)
    t = ts[which, np.arange(len(o))]
    hit = np.isfinite(t)
    rgb = np.zeros((len(o), 3))
    light = np.asarray(scene.light_dir)
    for k, prim in enumerate(scene.primitives):
        sel = hit & (which == k)
        if not sel.any():
            continue
        p = o[sel] + t[sel, None] * d[sel]
        n = prim.normal(p)
        ndotl = np.maximum(0.0, n @ light)
        shade = prim.texture.albedo(p - np.asarray(prim.center)) * (ndotl * scene.intensity)[:, None]
        if scene.specular > 0:
            refl = 2 * (n @ light)[:, None] * n - light
            lobe = np.maximum(0.0, np.sum(refl * -d[sel], axis=1)) ** scene.shininess
            shade = shade + (scene.specular * scene.intensity * lobe * (ndotl > 0))[:, None]
        rgb[sel] = np.clip(shade, 0.0, 1.0)
    return rgb.reshape(cam.height, cam.width, 3), hit.reshape(cam.height, cam.width).astype(np.float64)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Frame:
    name: str
    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    split: str = "train"
    group: str = "train"  # generation band: train / interp / extrap
    d_y: float = 0.0


@dataclass
class Dataset:
    frames: list
    root: str = None

    def select(self, split=None, group=None):
        return [
            f for f in self.frames
            if (split is None or f.split == split) and (group is None or f.group == group)
        ]

    @property
    def train(self):
        return self.select(split="train")

    @property
    def test(self):
        return [f for f in self.frames if f.split != "train"]


@dataclass
class PoseSampler:
    image_size: int = 64
    fov_deg: float = 40.0
    radius: float = 4.0
    n_train: int = 60
    train_elevation: tuple = (40.0, 90.0)
    n_interp: int = 10
    n_extrap: int = 30
    extrap_elevation: tuple = (0.0, 30.0)
    seed: int = 0


def _sample_poses(rng, n, elevation_deg, radius):
    lo, hi = np.radians(elevation_deg)
    # uniform over the spherical band's area
    z = rng.uniform(np.sin(lo), np.sin(hi), size=n)
    az = rng.uniform(-np.pi, np.pi, size=n)
    el = np.arcsin(z)
    eyes = radius * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], -1)
    return [look_at(e) for e in eyes]


def make_camera(pose, size, fov_deg):
    fx = 0.5 * size / np.tan(0.5 * np.radians(fov_deg))
    return Camera.from_pose(pose, fx=fx, width=size, height=size)


def generate_dataset(scene: ToyScene, sampler: PoseSampler, out_dir=None):
    """Render training views in one elevation band and test views in others.

    Test frames carry their pose distance to the training set and a
    close/middle/far tag. Writes PNGs and ``transforms.json`` when ``out_dir``
    is given.
    """
    if sampler.n_train < 1:
        raise ValueError("need at least one training view")
    rng = np.random.default_rng(sampler.seed)
    groups = [
        ("train", _sample_poses(rng, sampler.n_train, sampler.train_elevation, sampler.radius)),
        ("interp", _sample_poses(rng, sampler.n_interp, sampler.train_elevation, sampler.radius)),
        ("extrap", _sample_poses(rng, sampler.n_extrap, sampler.extrap_elevation, sampler.radius)),
    ]
    frames = []
    for group, poses in groups:
        for i, pose in enumerate(poses):
            cam = make_camera(pose, sampler.image_size, sampler.fov_deg)
            rgb, mask = oracle_render(scene, cam)
            frames.append(Frame(f"{group}_{i:03d}", cam, rgb, mask, split="train" if group == "train" else "", group=group))
    train_rots = [f.camera.rotation for f in frames if f.group == "train"]
    tests = [f for f in frames if f.group != "train"]
    if tests:
        tags, dists = split_by_distance([f.camera.rotation for f in tests], train_rots)
        for f, tag, dy in zip(tests, tags, dists):
            f.split, f.d_y = tag, float(dy)
    ds = Dataset(frames, root=out_dir)
    if out_dir is not None:
        save_dataset(ds, out_dir, fov_deg=sampler.fov_deg)
    return ds


def split_by_distance(candidates, train_rotations, boundaries=None):
    """Tag candidate rotations close/middle/far by their pose distance to the training set.

    ``boundaries`` are two increasing thresholds; by default the tertiles of
    the candidate distances. Returns ``(tags, distances)``.
    """
    train_rotations = list(train_rotations)
    if not train_rotations:
        raise ValueError("training set is empty")
    train_logs = np.array([so3_log(R) for R in train_rotations])
    dists = np.array([
        np.min(np.linalg.norm(train_logs - so3_log(R), axis=1)) for R in candidates
    ])
    if boundaries is None:
        boundaries = np.quantile(dists, [1 / 3, 2 / 3]) if len(dists) else (0.0, 0.0)
    lo, hi = boundaries
    tags = np.where(dists < lo, "test-close", np.where(dists < hi, "test-middle", "test-far"))
    return [str(t) for t in tags], dists


def save_dataset(ds: Dataset, out_dir, fov_deg):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    entries = []
    for f in ds.frames:
        img_rel = f"images/{f.name}.png"
        mask_rel = f"masks/{f.name}.png"
        save_png(os.path.join(out_dir, img_rel), f.image)
        save_mask(os.path.join(out_dir, mask_rel), f.mask)
        entries.append({
            "file_path": img_rel,
            "mask_path": mask_rel,
            "transform_matrix": f.camera.pose_c2w.tolist(),
            "split": f.split,
            "group": f.group,
            "d_y": f.d_y,
        })
    cam = ds.frames[0].camera
    manifest = {
        "camera_angle_x": float(np.radians(fov_deg)),
        "width": cam.width,
        "height": cam.height,
        "camera_convention": "x right, y down, z forward",
        "gamma": 2.2,
        "frames": entries,
    }
    with open(os.path.join(out_dir, "transforms.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    ds.root = out_dir


def load_dataset(path):
    """Load ``transforms.json`` (or a directory holding it) and every referenced image."""
    if os.path.isdir(path):
        path = os.path.join(path, "transforms.json")
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        manifest = json.load(fh)
    w, h = int(manifest["width"]), int(manifest["height"])
    fx = 0.5 * w / np.tan(0.5 * manifest["camera_angle_x"])
    frames = []
    for i, e in enumerate(manifest["frames"]):
        img_path = os.path.join(root, e["file_path"])
        mask_path = os.path.join(root, e["mask_path"])
        for p in (img_path, mask_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"manifest references missing file {p}")
        img, mask = load_png(img_path), load_mask(mask_path)
        if img.shape[:2] != (h, w) or mask.shape != (h, w):
            raise ValueError(f"{e['file_path']}: image size does not match the manifest intrinsics")
        split = e.get("split", "train")
        if split not in SPLITS:
            raise ValueError(f"unknown split tag {split!r}")
        cam = Camera.from_pose(np.array(e["transform_matrix"]), fx=fx, width=w, height=h)
        name = os.path.splitext(os.path.basename(e["file_path"]))[0]
        frames.append(Frame(name, cam, img[..., :3], mask, split, e.get("group", split), float(e.get("d_y", 0.0))))
    return Dataset(frames, root=root)


def retag_by_distance(ds: Dataset, boundaries=None):
    """Recompute test-frame distances and close/middle/far tags in place."""
    train_rots = [f.camera.rotation for f in ds.train]
    tests = ds.test
    tags, dists = split_by_distance([f.camera.rotation for f in tests], train_rots, boundaries)
    for f, tag, dy in zip(tests, tags, dists):
        f.split, f.d_y = tag, float(dy)
    return ds


__all__ = [
    "Box", "Checker", "Dataset", "Frame", "PoseSampler", "Solid", "Sphere", "Stripes", "ToyScene",
    "checker_sphere", "generate_dataset", "load_dataset", "oracle_render", "pose_distance",
    "retag_by_distance", "save_dataset", "split_by_distance",
]
