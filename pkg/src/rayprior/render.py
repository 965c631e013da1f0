"""Stratified ray sampling, volume compositing and its gradient, image rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Ray, camera_rays, ray_sphere_bounds


@dataclass
class RayQuadrature:
    """Sample depths ``t`` and spacings ``delta``, both shaped (R, N)."""

    t: np.ndarray
    delta: np.ndarray

    @property
    def n_samples(self):
        return self.t.shape[-1]

    def points(self, origins, dirs):
        return origins[:, None, :] + self.t[..., None] * dirs[:, None, :]


@dataclass
class CompositeResult:
    color: np.ndarray  # (R, 3)
    weights: np.ndarray  # (R, N)
    transmittance: np.ndarray  # (R, N) transmittance reaching each sample
    final_transmittance: np.ndarray  # (R,)
    depth: np.ndarray  # (R,)

    @property
    def opacity(self):
        return 1.0 - self.final_transmittance


def stratified_samples(near, far, n_samples, rng=None):
    """One depth per equal bin of ``[near, far]``: uniform draw if ``rng`` is given, else the bin center.

    The last spacing is capped at ``far - near``.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    span = far - near
    if rng is None:
        u = np.full((near.shape[0], n_samples), 0.5)
    else:
        u = rng.random((near.shape[0], n_samples))
    t = near[:, None] + (np.arange(n_samples) + u) / n_samples * span[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = span
    return RayQuadrature(t, delta)


def stratified_sample(ray: Ray, n_samples, rng=None):
    return stratified_samples([ray.t_near], [ray.t_far], n_samples, rng)


def composite(quad: RayQuadrature, sigma, color):
    """Alpha-composite densities (R, N) and colors (R, N, 3) against black."""
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("negative density")
    tau = sigma * quad.delta
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))
    alpha = -np.expm1(-tau)
    w = trans * alpha
    return CompositeResult(
        color=np.einsum("rn,rnc->rc", w, color),
        weights=w,
        transmittance=trans,
        final_transmittance=np.exp(-cum[:, -1]),
        depth=np.sum(w * quad.t, axis=-1),
    )


def composite_backward(quad, sigma, color, res: CompositeResult, d_color=None, d_final=None, d_depth=None):
    """Gradients ``(d_sigma, d_color_samples)`` of a scalar loss through :func:`composite`.

    ``d_color`` (R, 3), ``d_final`` (R,) and ``d_depth`` (R,) are the upstream
    gradients with respect to the pixel color, final transmittance and depth.
    """
    color = np.asarray(color, dtype=np.float64)
    w, delta = res.weights, quad.delta
    t_next = res.transmittance - w  # transmittance just after each sample
    d_sigma = np.zeros_like(w)
    d_c = np.zeros_like(color)
    if d_color is not None:
        d_color = np.asarray(d_color, dtype=np.float64)
        wc = w[..., None] * color
        after = wc.sum(axis=1, keepdims=True) - np.cumsum(wc, axis=1)
        d_sigma += delta * np.einsum("rnc,rc->rn", t_next[..., None] * color - after, d_color)
        d_c = w[..., None] * d_color[:, None, :]
    if d_depth is not None:
        wt = w * quad.t
        after = wt.sum(axis=1, keepdims=True) - np.cumsum(wt, axis=1)
        d_sigma += delta * (t_next * quad.t - after) * np.asarray(d_depth)[:, None]
    if d_final is not None:
        d_sigma -= delta * (res.final_transmittance * np.asarray(d_final))[:, None]
    return d_sigma, d_c


# --------------------------------------------------------------------------
# field-level rendering


@dataclass
class RenderContext:
    quad: RayQuadrature
    sigma: np.ndarray
    color: np.ndarray
    result: CompositeResult
    sigma_cache: object
    color_cache: object


def render_rays(field, origins, dirs, near, far, n_samples, rng=None, color_dirs=None, diffuse_only=None):
    """Volume-render a ray batch. Returns ``(CompositeResult, RenderContext)``.

    Sample points follow ``dirs``; the color head sees ``color_dirs`` when given
    (e.g. a substituted atlas direction), else ``dirs``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = origins.shape[0]
    quad = stratified_samples(near, far, n_samples, rng)
    pts = quad.points(origins, dirs).reshape(-1, 3)
    sigma, feat, scache = field.sigma_forward(pts)
    cd = dirs if color_dirs is None else np.asarray(color_dirs, dtype=np.float64)
    cd = np.repeat(cd, n_samples, axis=0)
    d_only = None if diffuse_only is None else np.repeat(np.asarray(diffuse_only, bool), n_samples)
    color, ccache = field.color_forward(cd, feat, diffuse_only=d_only)
    sigma = sigma.reshape(n_rays, n_samples)
    color = color.reshape(n_rays, n_samples, 3)
    res = composite(quad, sigma, color)
    return res, RenderContext(quad, sigma, color, res, scache, ccache)


def render_rays_backward(field, ctx: RenderContext, d_color=None, d_final=None):
    """Flat parameter gradients (``{path: array}``) for upstream pixel gradients."""
    d_sigma, d_c = composite_backward(ctx.quad, ctx.sigma, ctx.color, ctx.result, d_color, d_final)
    head_grads, d_feat = field.color_backward(ctx.color_cache, d_c.reshape(-1, 3))
    head_grads.update(field.sigma_backward(ctx.sigma_cache, d_sigma.reshape(-1), d_feat))
    return field.flat_grads(head_grads)


def render_image(field, cam: Camera, n_samples=64, atlas=None, diffuse_only=False, seed=None, chunk=4096):
    """Render ``(rgb, depth, opacity)`` for a camera.

    With ``atlas`` (anything exposing ``lookup(origins, dirs) -> (dirs, hit)``),
    the color head sees the atlas direction wherever the lookup hits and the
    pixel's own direction elsewhere. ``seed=None`` uses bin-center sampling;
    otherwise each tile draws from its own ``(seed, tile)`` stream.
    """
    radius = field.config.bound_radius
    if np.linalg.norm(cam.center) <= radius:
        raise ValueError("camera lies inside the scene bounds")
    o, d = camera_rays(cam)
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    near, far, hit = ray_sphere_bounds(o, d, radius)
    n_pix = o.shape[0]
    rgb = np.zeros((n_pix, 3))
    depth = np.zeros(n_pix)
    opacity = np.zeros(n_pix)
    idx = np.flatnonzero(hit)
    cdirs = d.copy()
    if atlas is not None and idx.size:
        sub, found = atlas.lookup(o[idx], d[idx])
        cdirs[idx[found]] = sub[found]
    for tile, start in enumerate(range(0, idx.size, chunk)):
        sel = idx[start:start + chunk]
        rng = None if seed is None else np.random.default_rng([seed, tile])
        d_only = np.full(sel.size, True) if diffuse_only else None
        res, _ = render_rays(field, o[sel], d[sel], near[sel], far[sel], n_samples, rng, cdirs[sel], d_only)
        rgb[sel] = res.color
        depth[sel] = res.depth
        opacity[sel] = res.opacity
    shape = (cam.height, cam.width)
    return rgb.reshape(*shape, 3), depth.reshape(shape), opacity.reshape(shape)
