"""Two-stage optimisation: plain field fitting, then fine-tuning with random ray
casting and ray-atlas direction substitution."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import camera_rays, ray_sphere_bounds
from .field import FieldConfig, RadianceField
from .nn import AdamState, adam_step, load_checkpoint, save_checkpoint
from .render import render_image, render_rays, render_rays_backward
from .rrc import RayBatch, make_rrc_batch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


@dataclass
class TrainSchedule:
    n_iter_stage1: int = 15000
    n_iter_stage2: int = 15000
    batch_rays: int = 1024
    n_samples: int = 64
    p_rrc: float = 0.7
    p_ra: float = 0.5
    eta_deg: float = 30.0
    lambda_opacity: float = 0.1
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    lr_stage2: float | None = None  # None: hold the stage-1 final rate
    fg_fraction: float = 0.5
    rrc_per_iteration: bool = False
    ra_per_iteration: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("p_rrc", "p_ra", "fg_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_iter_stage1 < 0 or self.n_iter_stage2 < 0:
            raise ValueError("iteration counts must be non-negative")
        if not 0.0 <= self.eta_deg < 90.0:
            raise ValueError("eta must lie in [0, 90) degrees")

    @property
    def eta(self):
        return np.radians(self.eta_deg)

    @property
    def stage2_lr(self):
        return self.lr_end if self.lr_stage2 is None else self.lr_stage2

    def stage1_lr(self, k):
        if self.n_iter_stage1 <= 1:
            return self.lr_start
        frac = k / (self.n_iter_stage1 - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    iteration: int
    stage: int
    mse: float
    l_o: float
    total: float
    rrc_frac: float = 0.0
    ra_frac: float = 0.0


@dataclass
class TrainResult:
    field: object
    adam: AdamState
    history: list = field(default_factory=list)
    iteration: int = 0  # next global iteration index


def photometric_loss(pred, label):
    """Mean squared error over rays and channels, and its gradient."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def opacity_loss(final_transmittance, mask):
    """Mean of ``|m + T_N - 1|`` and its (sub)gradient w.r.t. ``T_N`` (0 at the kink)."""
    r = np.asarray(mask, dtype=np.float64) + np.asarray(final_transmittance, dtype=np.float64) - 1.0
    return float(np.mean(np.abs(r))), np.sign(r) / r.size


# --------------------------------------------------------------------------
# training-pixel table


class PixelTable:
    """Every training pixel whose ray crosses the scene bounds, flattened."""

    def __init__(self, frames, bound_radius):
        o, d, c, m, img, pix = [], [], [], [], [], []
        self.shapes = []
        for i, f in enumerate(frames):
            ro, rd = camera_rays(f.camera)
            n = f.camera.width * f.camera.height
            o.append(ro.reshape(-1, 3))
            d.append(rd.reshape(-1, 3))
            c.append(np.asarray(f.image, dtype=np.float64).reshape(-1, 3))
            m.append(np.asarray(f.mask, dtype=np.float64).reshape(-1))
            img.append(np.full(n, i))
            pix.append(np.arange(n))
            self.shapes.append((f.camera.height, f.camera.width))
        o, d = np.concatenate(o), np.concatenate(d)
        near, far, hit = ray_sphere_bounds(o, d, bound_radius)
        masks = np.concatenate(m)
        if np.any(masks[~hit] > 0.5):
            log.warning("%d object pixels miss the scene bounds", int(np.sum(masks[~hit] > 0.5)))
        keep = np.flatnonzero(hit)
        self.origins, self.dirs = o[keep], d[keep]
        self.near, self.far = near[keep], far[keep]
        self.colors = np.concatenate(c)[keep]
        self.masks = masks[keep]
        self.image_ids = np.concatenate(img)[keep]
        self.pixel_ids = np.concatenate(pix)[keep]
        self.depths = None
        self.fg = np.flatnonzero(self.masks > 0.5)
        self.bg = np.flatnonzero(self.masks <= 0.5)

    def __len__(self):
        return len(self.origins)

    def set_depth_cache(self, depth_maps):
        flat = np.stack([np.asarray(dm, dtype=np.float64).reshape(-1) for dm in depth_maps])
        self.depths = flat[self.image_ids, self.pixel_ids]

    def draw(self, rng, n_rays, fg_fraction):
        n_fg = int(round(n_rays * fg_fraction))
        if len(self.bg) == 0:
            n_fg = n_rays
        elif len(self.fg) == 0:
            n_fg = 0
        idx = np.concatenate([
            self.fg[rng.integers(len(self.fg), size=n_fg)] if n_fg else np.zeros(0, np.int64),
            self.bg[rng.integers(len(self.bg), size=n_rays - n_fg)] if n_rays > n_fg else np.zeros(0, np.int64),
        ])
        return RayBatch(
            self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx],
            self.colors[idx], self.masks[idx], idx,
            None if self.depths is None else self.depths[idx],
        )


# --------------------------------------------------------------------------
# loop


def _streams(seed, it):
    return (np.random.default_rng([seed, it, k]) for k in range(3))


def _train_loop(result, table, schedule, n_iter, lr_fn, stage, atlas=None, priors=False, checkpoint_path=None):
    fld, adam = result.field, result.adam
    params = fld.flat_params()
    deferred = fld.config.mode == "deferred"
    start = result.iteration
    for k in range(n_iter):
        it = start + k
        rng_main, rng_rrc, rng_ra = _streams(schedule.seed, it)
        batch = table.draw(rng_main, schedule.batch_rays, schedule.fg_fraction)
        n = len(batch)
        virtual = np.zeros(n, bool)
        ra_used = np.zeros(n, bool)
        color_dirs = None
        if priors:
            if schedule.p_rrc > 0:
                batch = make_rrc_batch(batch, schedule.eta, schedule.p_rrc, rng_rrc, schedule.rrc_per_iteration)
                virtual = batch.virtual
            if schedule.p_ra > 0 and atlas is not None:
                if schedule.ra_per_iteration:
                    chosen = np.full(n, rng_ra.random() < schedule.p_ra)
                else:
                    chosen = rng_ra.random(n) < schedule.p_ra
                idx = np.flatnonzero(chosen)
                if idx.size:
                    sub, hit = atlas.lookup(batch.origins[idx], batch.dirs[idx])
                    if hit.any():
                        color_dirs = batch.dirs.copy()
                        color_dirs[idx[hit]] = sub[hit]
                        ra_used[idx[hit]] = True
        if deferred:
            # specular joins only after pre-training, and never on prior-driven rays
            diffuse_only = np.ones(n, bool) if stage == 1 else (virtual | ra_used)
        else:
            diffuse_only = None
        res, ctx = render_rays(fld, batch.origins, batch.dirs, batch.near, batch.far,
                               schedule.n_samples, rng_main, color_dirs, diffuse_only)
        mse, g_color = photometric_loss(res.color, batch.colors)
        l_o, g_trans = opacity_loss(res.final_transmittance, batch.masks)
        total = mse + schedule.lambda_opacity * l_o
        grads = render_rays_backward(fld, ctx, g_color, schedule.lambda_opacity * g_trans)
        if stage == 1 and deferred:
            grads = {p: g for p, g in grads.items() if not p.startswith("specular.")}
        try:
            if not np.isfinite(total):
                raise FloatingPointError(f"loss became {total}")
            adam_step(params, grads, adam, lr=lr_fn(k))
        except FloatingPointError as exc:
            result.iteration = it
            if checkpoint_path:
                save_checkpoint(checkpoint_path, params, adam, {"iteration": it, "diverged": True})
            raise TrainingDivergedError(f"training diverged at iteration {it}: {exc}", result) from exc
        fld.bump_version()
        result.history.append(LossReport(it, stage, mse, l_o, total, float(virtual.mean()), float(ra_used.mean())))
        if (k + 1) % 1000 == 0:
            log.info("stage %d it %d mse %.5f l_o %.4f", stage, it + 1, mse, l_o)
    result.iteration = start + n_iter
    return result


def _fresh(result_or_field, schedule):
    if isinstance(result_or_field, TrainResult):
        r = result_or_field
        return TrainResult(r.field.copy(), copy.deepcopy(r.adam), list(r.history), r.iteration)
    return TrainResult(result_or_field.copy(), AdamState(lr=schedule.lr_start))


def train_stage1(field_or_result, dataset_frames, schedule: TrainSchedule, n_iter=None, lr=None,
                 table=None, checkpoint_path=None):
    """Fit the field with photometric + opacity losses.

    Passing a previous :class:`TrainResult` continues it (same optimizer, next
    iteration indices). ``lr`` pins a constant rate instead of the decay.
    The input is never modified.
    """
    result = _fresh(field_or_result, schedule)
    table = table or PixelTable(dataset_frames, result.field.config.bound_radius)
    n_iter = schedule.n_iter_stage1 if n_iter is None else n_iter
    lr_fn = (lambda k: lr) if lr is not None else schedule.stage1_lr
    return _train_loop(result, table, schedule, n_iter, lr_fn, 1, checkpoint_path=checkpoint_path)


def train_stage2(stage1: TrainResult, dataset_frames, depth_maps, atlas, schedule: TrainSchedule,
                 n_iter=None, table=None, checkpoint_path=None):
    """Fine-tune a stage-1 result with random ray casting and atlas directions."""
    if schedule.p_rrc > 0 and depth_maps is None:
        raise ValueError("random ray casting needs the stage-1 depth cache; run compute_depth_cache first")
    if schedule.p_ra > 0 and atlas is None:
        raise ValueError("atlas substitution needs a ray atlas; run build_ray_atlas on the extracted mesh first")
    result = _fresh(stage1, schedule)
    table = table or PixelTable(dataset_frames, result.field.config.bound_radius)
    if depth_maps is not None:
        table.set_depth_cache(depth_maps)
    n_iter = schedule.n_iter_stage2 if n_iter is None else n_iter
    lr = schedule.stage2_lr
    return _train_loop(result, table, schedule, n_iter, lambda k: lr, 2, atlas=atlas, priors=True,
                       checkpoint_path=checkpoint_path)


def compute_depth_cache(fld, frames, n_samples):
    """Expected depth per training pixel, rendered with bin-center sampling."""
    return [render_image(fld, f.camera, n_samples)[1] for f in frames]


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "stage", "mse", "l_o", "total", "rrc_frac", "ra_frac"])
        for r in history:
            w.writerow([r.iteration, r.stage, f"{r.mse:.8g}", f"{r.l_o:.8g}", f"{r.total:.8g}",
                        f"{r.rrc_frac:.4f}", f"{r.ra_frac:.4f}"])


def save_result(path, result: TrainResult, meta=None):
    """Checkpoint a training result: parameters, optimizer state and field config."""
    info = {"field": result.field.config.to_dict(), "iteration": result.iteration}
    info.update(meta or {})
    save_checkpoint(path, result.field.flat_params(), result.adam, info)


def load_result(path):
    """Inverse of :func:`save_result`; the loss history is not stored."""
    tensors, adam, meta = load_checkpoint(path)
    if "field" not in meta:
        raise ValueError(f"{path}: checkpoint carries no field configuration")
    fld = RadianceField(FieldConfig(**meta["field"]))
    fld.load_flat(tensors)
    return TrainResult(fld, adam or AdamState(), [], int(meta.get("iteration", 0))), meta
