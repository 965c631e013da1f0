"""Rough mesh extraction, ray-triangle acceleration and the per-vertex ray atlas."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

from .geometry import Camera, Ray, camera_rays


class EmptySurfaceError(RuntimeError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (F, 3) int64
    normals: np.ndarray = None  # (V, 3) unit, outward
    voxel_size: float = None  # grid spacing when extracted from a density grid

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def face_normals(self):
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals following the triangle winding."""
    v = vertices[triangles]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])  # length = 2 * area
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, triangles[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def default_iso_level(voxel_size):
    """Density whose opacity across one voxel diagonal is 0.5."""
    return np.log(2.0) / (voxel_size * np.sqrt(3.0))


def _density_fn(density):
    if hasattr(density, "eval_sigma"):
        return lambda x: density.eval_sigma(x)[0]
    return density


def density_grid(density, resolution, radius, chunk=65536):
    fn = _density_fn(density)
    axis = np.linspace(-radius, radius, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(fn(pts[i:i + chunk]), dtype=np.float64) for i in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def extract_mesh(density, resolution=64, iso_level=None, radius=1.2):
    """Marching cubes on a density grid over ``[-radius, radius]^3``.

    ``density`` is a field (anything with ``eval_sigma``) or a callable
    ``points -> sigma``. Only the largest connected component is kept, and
    triangles are wound so normals point toward lower density.
    """
    if resolution < 16:
        raise ValueError("grid resolution must be at least 16")
    voxel = 2.0 * radius / (resolution - 1)
    iso = default_iso_level(voxel) if iso_level is None else float(iso_level)
    grid = density_grid(density, resolution, radius)
    if not (grid.min() < iso < grid.max()):
        raise EmptySurfaceError(
            f"no voxel crosses iso level {iso:.4g} (density range {grid.min():.4g}..{grid.max():.4g}); "
            "try a lower iso level"
        )
    verts, faces, _, _ = marching_cubes(grid, level=iso, spacing=(voxel,) * 3)
    verts = verts.astype(np.float64) - radius
    faces = faces.astype(np.int64)

    v = verts[faces]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    faces = faces[area2 > 2e-12]

    faces = _largest_component(len(verts), faces)
    used, inverse = np.unique(faces, return_inverse=True)
    verts, faces = verts[used], inverse.reshape(-1, 3)

    # orient: density should drop along the face normal
    fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    cen = verts[faces].mean(axis=1)
    fn_density = _density_fn(density)
    step = 0.5 * voxel
    outside = np.asarray(fn_density(cen + step * fn), dtype=np.float64)
    inside = np.asarray(fn_density(cen - step * fn), dtype=np.float64)
    if np.mean(outside > inside) > 0.5:
        faces = faces[:, ::-1].copy()
    return TriMesh(verts, faces, voxel_size=voxel)


def _largest_component(n_vertices, faces):
    if len(faces) == 0:
        raise EmptySurfaceError("marching cubes produced no triangles; try a lower iso level")
    rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    _, labels = connected_components(adj, directed=False)
    face_labels = labels[faces[:, 0]]
    counts = np.bincount(face_labels)
    return faces[face_labels == np.argmax(counts)]


# --------------------------------------------------------------------------
# BVH


@numba.njit(cache=True, error_model="numpy")
def _traverse(origins, dirs, t_min, t_max, v0, e1, e2, bmin, bmax, left, right, start, count, order):
    n = origins.shape[0]
    t_hit = np.full(n, np.inf)
    tri_hit = np.full(n, -1, dtype=np.int64)
    bu = np.zeros(n)
    bv = np.zeros(n)
    stack = np.empty(128, dtype=np.int64)
    eps = 1e-9
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = 1.0 / dx, 1.0 / dy, 1.0 / dz
        best = t_max[r]
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slab test
            lo = t_min[r]
            hi = best
            for ax in range(3):
                if ax == 0:
                    o_, inv = ox, ix
                elif ax == 1:
                    o_, inv = oy, iy
                else:
                    o_, inv = oz, iz
                ta = (bmin[node, ax] - o_) * inv
                tb = (bmax[node, ax] - o_) * inv
                if ta > tb:
                    ta, tb = tb, ta
                if ta != ta:  # 0 * inf
                    ta = -np.inf
                if tb != tb:
                    tb = np.inf
                if ta > lo:
                    lo = ta
                if tb < hi:
                    hi = tb
            if lo > hi * (1.0 + 1e-12) + 1e-12:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    px = dy * e2[f, 2] - dz * e2[f, 1]
                    py = dz * e2[f, 0] - dx * e2[f, 2]
                    pz = dx * e2[f, 1] - dy * e2[f, 0]
                    det = e1[f, 0] * px + e1[f, 1] * py + e1[f, 2] * pz
                    if abs(det) < 1e-14:
                        continue
                    inv_det = 1.0 / det
                    sx, sy, sz = ox - v0[f, 0], oy - v0[f, 1], oz - v0[f, 2]
                    u = (sx * px + sy * py + sz * pz) * inv_det
                    if u < -eps or u > 1.0 + eps:
                        continue
                    qx = sy * e1[f, 2] - sz * e1[f, 1]
                    qy = sz * e1[f, 0] - sx * e1[f, 2]
                    qz = sx * e1[f, 1] - sy * e1[f, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv_det
                    if v < -eps or u + v > 1.0 + eps:
                        continue
                    t = (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz) * inv_det
                    if t <= t_min[r]:
                        continue
                    if t < best or (t == best and best_tri >= 0 and f < best_tri):
                        best, best_tri, best_u, best_v = t, f, u, v
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        if best_tri >= 0:
            t_hit[r] = best
            tri_hit[r] = best_tri
            bu[r] = best_u
            bv[r] = best_v
    return t_hit, tri_hit, bu, bv


class Bvh:
    """Axis-aligned bounding-box tree over a triangle mesh (median split)."""

    def __init__(self, mesh: TriMesh, leaf_size=4):
        tri = mesh.vertices[mesh.triangles]
        self.v0 = np.ascontiguousarray(tri[:, 0])
        self.e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self.e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        tmin, tmax = tri.min(axis=1), tri.max(axis=1)
        cent = tri.mean(axis=1)
        order = np.arange(len(tri))
        bmin, bmax, left, right, start, count = [], [], [], [], [], []

        def new_node(lo, hi):
            idx = order[lo:hi]
            bmin.append(tmin[idx].min(axis=0) if len(idx) else np.zeros(3))
            bmax.append(tmax[idx].max(axis=0) if len(idx) else np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(lo)
            count.append(hi - lo)
            return len(bmin) - 1

        stack = [(new_node(0, len(tri)), 0, len(tri))]
        while stack:
            node, lo, hi = stack.pop()
            if hi - lo <= leaf_size:
                continue
            c = cent[order[lo:hi]]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (hi - lo) // 2
            part = np.argpartition(c[:, axis], mid, kind="introselect")
            order[lo:hi] = order[lo:hi][part]
            a = new_node(lo, lo + mid)
            b = new_node(lo + mid, hi)
            left[node], right[node] = a, b
            count[node] = 0
            stack.append((a, lo, lo + mid))
            stack.append((b, lo + mid, hi))
        self.bmin = np.array(bmin)
        self.bmax = np.array(bmax)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = order.astype(np.int64)
        self.n_triangles = len(tri)

    def intersect(self, origins, dirs, t_min=1e-9, t_max=np.inf):
        """Closest hit per ray: ``(t, triangle, u, v)``; misses have ``t=inf``, triangle ``-1``.

        Barycentric weights of the hit are ``(1-u-v, u, v)``. Ties in ``t`` go to the
        lowest triangle index, so results do not depend on tree layout.
        """
        origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        n = len(origins)
        if self.n_triangles == 0:
            return np.full(n, np.inf), np.full(n, -1), np.zeros(n), np.zeros(n)
        tmin = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
        tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
        return _traverse(
            origins, dirs, tmin, tmax, self.v0, self.e1, self.e2,
            self.bmin, self.bmax, self.left, self.right, self.start, self.count, self.order,
        )


def intersect_brute_force(mesh: TriMesh, origin, direction, t_min=1e-9):
    """Closest hit of one ray against every triangle; ``(t, tri, u, v)``."""
    tri = mesh.vertices[mesh.triangles]
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    d = np.asarray(direction, dtype=np.float64)
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = np.asarray(origin) - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    eps = 1e-9
    ok &= (u >= -eps) & (u <= 1 + eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > t_min)
    if not ok.any():
        return np.inf, -1, 0.0, 0.0
    cand = np.flatnonzero(ok)
    best = cand[np.lexsort((cand, t[cand]))[0]]
    return t[best], int(best), u[best], v[best]


# --------------------------------------------------------------------------
# projection and visibility


def project_vertices(points, cam: Camera):
    """Pixel coordinates ``uv`` (N, 2), camera depth ``z`` (N,), and a projectable flag."""
    p = (np.atleast_2d(points) - cam.center) @ cam.rotation  # world -> camera
    z = p[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    uv = np.stack([cam.fx * p[:, 0] / zs + cam.cx, cam.fy * p[:, 1] / zs + cam.cy], axis=1)
    return uv, z, ok


def project_vertex(V, cam: Camera):
    """``(uv, z)`` for one point, or ``None`` when it is at or behind the camera."""
    uv, z, ok = project_vertices(np.asarray(V, dtype=np.float64)[None], cam)
    if not ok[0]:
        return None
    return uv[0], float(z[0])


def visible_vertices(points, cam: Camera, bvh: Bvh, eps):
    """Per-point visibility: inside the image, and nothing on the mesh blocks the
    line of sight more than ``eps`` before the point."""
    points = np.atleast_2d(points)
    uv, _, ok = project_vertices(points, cam)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    idx = np.flatnonzero(ok)
    if idx.size:
        to_v = points[idx] - cam.center
        dist = np.linalg.norm(to_v, axis=1)
        t, _, _, _ = bvh.intersect(np.broadcast_to(cam.center, to_v.shape), to_v / dist[:, None])
        ok[idx] = t >= dist - eps
    return ok


def vertex_visible(V, cam, bvh, eps):
    return bool(visible_vertices(np.asarray(V, dtype=np.float64)[None], cam, bvh, eps)[0])


# --------------------------------------------------------------------------
# ray atlas


@dataclass
class RayAtlas:
    mesh: TriMesh
    directions: np.ndarray  # (V, 3), unit where valid, zero elsewhere
    counts: np.ndarray  # (V,) number of contributing images
    _bvh: Bvh = field(default=None, repr=False)

    @property
    def valid(self):
        return self.counts > 0

    @property
    def bvh(self):
        if self._bvh is None:
            self._bvh = Bvh(self.mesh)
        return self._bvh

    def lookup(self, origins, dirs):
        """Batched lookup: ``(directions, hit)``; rows with ``hit=False`` are zero."""
        origins = np.atleast_2d(origins)
        t, tri, u, v = self.bvh.intersect(origins, dirs)
        out = np.zeros((len(origins), 3))
        hit = tri >= 0
        if not hit.any():
            return out, hit
        idx = np.flatnonzero(hit)
        corners = self.mesh.triangles[tri[idx]]  # (H, 3)
        bary = np.stack([1.0 - u[idx] - v[idx], u[idx], v[idx]], axis=1)
        bary = np.clip(bary, 0.0, None) * self.valid[corners]
        wsum = bary.sum(axis=1)
        d = np.einsum("hk,hkc->hc", bary, self.directions[corners])
        n = np.linalg.norm(d, axis=1)
        good = (wsum > 0) & (n > 1e-9)
        out[idx[good]] = d[good] / n[good, None]
        hit[idx[~good]] = False
        return out, hit


def build_ray_atlas(mesh: TriMesh, cameras, eps=None, bvh=None):
    """Average, per vertex, the pixel-ray directions of every camera that sees it.

    A camera counts only if its pixel ray meets the vertex normal from the front.

    ``eps`` is the visibility tolerance; by default half the extraction voxel
    (half the mean edge length for meshes without one).
    """
    if len(cameras) < 1:
        raise ValueError("need at least one camera to build a ray atlas")
    bvh = bvh or Bvh(mesh)
    if eps is None:
        eps = 0.5 * (mesh.voxel_size or mean_edge_length(mesh))
    acc = np.zeros((mesh.n_vertices, 3))
    counts = np.zeros(mesh.n_vertices, dtype=np.int64)
    for cam in cameras:
        _, ray_map = camera_rays(cam)  # (H, W, 3)
        vis = visible_vertices(mesh.vertices, cam, bvh, eps)
        idx = np.flatnonzero(vis)
        uv, _, _ = project_vertices(mesh.vertices[idx], cam)
        px = np.clip(np.floor(uv).astype(np.int64), 0, [cam.width - 1, cam.height - 1])
        d = ray_map[px[:, 1], px[:, 0]]
        # grazing silhouette vertices can pass the occlusion test from behind
        front = np.sum(d * mesh.normals[idx], axis=1) < 0
        acc[idx[front]] += d[front]
        counts[idx[front]] += 1
    norm = np.linalg.norm(acc, axis=1)
    counts[norm < 1e-12] = 0
    dirs = np.where(counts[:, None] > 0, acc / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    return RayAtlas(mesh, dirs, counts, bvh)


def atlas_lookup(atlas: RayAtlas, ray: Ray):
    """Atlas direction for a single ray, or ``None`` on a miss."""
    d, hit = atlas.lookup(ray.origin[None], ray.direction[None])
    return d[0] if hit[0] else None


def mean_edge_length(mesh: TriMesh):
    v = mesh.vertices[mesh.triangles]
    edges = np.concatenate([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]])
    return float(np.linalg.norm(edges, axis=1).mean())


# --------------------------------------------------------------------------
# files


def save_obj(path, mesh: TriMesh):
    with open(path, "w") as fh:
        fh.write(f"# {mesh.n_vertices} vertices, {len(mesh.triangles)} triangles\n")
        if mesh.voxel_size is not None:
            fh.write(f"# voxel_size {mesh.voxel_size!r}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for x, y, z in mesh.normals:
            fh.write(f"vn {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")


def load_obj(path):
    verts, normals, faces = [], [], []
    voxel = None
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[:2] == ["#", "voxel_size"]:
                voxel = float(parts[2])
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    normals = np.array(normals) if len(normals) == len(verts) else None
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64), normals, voxel)


# Atlas sidecar (little-endian):
#   magic b"RPAT", version u32, vertex count u32,
#   then per vertex: direction 3 x f32, valid u8, contributing-image count u32
ATLAS_MAGIC = b"RPAT"
_ATLAS_RECORD = np.dtype([("d", "<f4", (3,)), ("valid", "u1"), ("count", "<u4")])


def save_atlas(path, atlas: RayAtlas):
    rec = np.zeros(atlas.mesh.n_vertices, dtype=_ATLAS_RECORD)
    rec["d"] = atlas.directions
    rec["valid"] = atlas.valid
    rec["count"] = atlas.counts
    with open(path, "wb") as fh:
        fh.write(ATLAS_MAGIC + struct.pack("<II", 1, len(rec)))
        fh.write(rec.tobytes())


def load_atlas(path, mesh: TriMesh):
    with open(path, "rb") as fh:
        if fh.read(4) != ATLAS_MAGIC:
            raise ValueError(f"{path}: not a ray atlas file")
        _, n = struct.unpack("<II", fh.read(8))
        rec = np.frombuffer(fh.read(n * _ATLAS_RECORD.itemsize), dtype=_ATLAS_RECORD)
    if n != mesh.n_vertices:
        raise ValueError(f"atlas has {n} vertices but mesh has {mesh.n_vertices}")
    counts = np.where(rec["valid"] > 0, rec["count"].astype(np.int64), 0)
    dirs = rec["d"].astype(np.float64)
    norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.where(counts[:, None] > 0, dirs / np.where(norm > 0, norm, 1), 0.0)
    return RayAtlas(mesh, dirs, counts)
