"""End-to-end experiment runs and ablation grids."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .config import RunConfig, dump_config
from .images import load_raw, save_png, save_raw
from .mesh import build_ray_atlas, extract_mesh, load_atlas, load_obj, save_atlas, save_obj
from .metrics import MetricReport
from .render import render_image
from .scenes import checker_sphere, generate_dataset, load_dataset
from .trainer import (
    compute_depth_cache, load_result, save_result, train_stage1, train_stage2, write_loss_csv,
)
from .field import RadianceField

log = logging.getLogger(__name__)

SCENES = ("checker_sphere", "specular_sphere")
# name -> (uses random ray casting, uses the ray atlas)
VARIANTS = {"rrc": (True, False), "ra": (False, True), "rrc+ra": (True, True)}
ETA_SWEEP = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0)


class PipelineStageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage


@contextmanager
def stage(name, timings=None):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc
    if timings is not None:
        timings[name] = round(time.perf_counter() - t0, 3)


@dataclass
class RunLayout:
    """File locations inside a run directory."""

    root: str

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def data(self):
        return self.path("data")

    @property
    def stage1(self):
        return self.path("stage1.ckpt")

    @property
    def mesh(self):
        return self.path("mesh.obj")

    @property
    def atlas(self):
        return self.path("atlas.rpat")

    def depth(self, name):
        return self.path("depth", f"{name}.rpfg")

    def model(self, variant):
        return self.stage1 if variant == "baseline" else self.path(f"{variant}.ckpt")

    def renders(self, variant):
        return self.path("renders", variant)


def make_scene(cfg: RunConfig):
    if cfg.scene == "checker_sphere":
        return checker_sphere()
    if cfg.scene == "specular_sphere":
        return checker_sphere(specular=cfg.specular)
    raise ValueError(f"unknown scene {cfg.scene!r}; choose from {SCENES}")


def variant_grid(cfg: RunConfig):
    """Stage-2 runs requested by the config: ``(name, p_rrc, p_ra, eta_deg)``."""
    rows = []
    for v in cfg.variants:
        if v == "none":
            continue
        rrc, ra = VARIANTS[v]
        rows.append((v, cfg.p_rrc if rrc else 0.0, cfg.p_ra if ra else 0.0, cfg.eta_deg))
    for eta in cfg.eta_sweep:
        rows.append((f"rrc+ra@eta{float(eta):g}", cfg.p_rrc, cfg.p_ra, float(eta)))
    return rows


@dataclass
class ExperimentResult:
    summary: list  # one dict per model row
    reports: dict  # variant -> MetricReport
    manifest: dict
    layout: RunLayout = None
    models: dict = field(default_factory=dict)


class _Recorder:
    def __init__(self, root):
        self.root = root
        self.files = []

    def __call__(self, path):
        rel = os.path.relpath(path, self.root)
        if rel not in self.files:
            self.files.append(rel)
        return path


def prepare_dataset(cfg: RunConfig, layout: RunLayout, record=None):
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    ds = generate_dataset(make_scene(cfg), cfg.pose_sampler(), out_dir=layout.data)
    if record is not None:
        record(os.path.join(layout.data, "transforms.json"))
        for f in ds.frames:
            record(os.path.join(layout.data, "images", f"{f.name}.png"))
            record(os.path.join(layout.data, "masks", f"{f.name}.png"))
    return ds


def evaluate(fld, frames, atlas=None, n_samples=64, out_dir=None, record=None, meta=None):
    """Render each frame and score it against its reference image."""
    report = MetricReport(meta=dict(meta or {}))
    for f in frames:
        rgb = np.clip(render_image(fld, f.camera, n_samples, atlas=atlas)[0], 0.0, 1.0)
        report.add(f.name, f.split, rgb, f.image, f.group, f.d_y)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            p = os.path.join(out_dir, f"{f.name}.png")
            save_png(p, rgb)
            if record is not None:
                record(p)
    return report


def _summary_row(name, report, p_rrc, p_ra, eta):
    row = {"model": name, "p_rrc": p_rrc, "p_ra": p_ra, "eta_deg": eta}
    for key in ("group", "split"):
        for tag, agg in report.aggregate(key).items():
            if tag == "train":
                continue
            row[f"psnr_{tag}"] = agg["psnr"]
            row[f"ssim_{tag}"] = agg["ssim"]
    row["lpips"] = "n/a"
    return row


def write_summary_csv(path, rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def run_experiment(cfg: RunConfig, eval_samples=64):
    """generate -> stage 1 -> mesh -> depth cache -> atlas -> stage 2 variants -> renders -> metrics.

    Every file written is listed in ``manifest.json`` in the run directory.
    """
    layout = RunLayout(cfg.output_dir)
    os.makedirs(layout.root, exist_ok=True)
    rec = _Recorder(layout.root)
    timings = {}
    dump_config(cfg, rec(layout.path("config.txt")))
    base_schedule = cfg.schedule()

    with stage("generate", timings):
        ds = prepare_dataset(cfg, layout, rec)
        train, tests = ds.train, ds.test
        if not train:
            raise ValueError("dataset has no training frames")

    with stage("stage1", timings):
        s1 = train_stage1(RadianceField(cfg.field_config(), seed=cfg.seed), train, base_schedule)
        save_result(rec(layout.stage1), s1, {"stage": 1, "config": cfg.digest()})
        write_loss_csv(rec(layout.path("stage1_loss.csv")), s1.history)

    grid = variant_grid(cfg)
    need_rrc = any(p_rrc > 0 for _, p_rrc, _, _ in grid)
    need_ra = any(p_ra > 0 for _, _, p_ra, _ in grid)
    mesh = atlas = depth_maps = None
    if need_ra:
        with stage("extract-mesh", timings):
            mesh = extract_mesh(s1.field, cfg.mesh_resolution, cfg.iso_level, cfg.bound_radius)
            save_obj(rec(layout.mesh), mesh)
    if need_rrc:
        with stage("depth-cache", timings):
            depth_maps = compute_depth_cache(s1.field, train, cfg.n_samples)
            os.makedirs(layout.path("depth"), exist_ok=True)
            for f, dm in zip(train, depth_maps):
                save_raw(rec(layout.depth(f.name)), dm[..., None])
    if need_ra:
        with stage("build-atlas", timings):
            atlas = build_ray_atlas(mesh, [f.camera for f in train])
            save_atlas(rec(layout.atlas), atlas)

    models = {"baseline": (s1.field, None, 0.0, 0.0, cfg.eta_deg)}
    for name, p_rrc, p_ra, eta in grid:
        with stage(f"stage2:{name}", timings):
            sched = replace(base_schedule, p_rrc=p_rrc, p_ra=p_ra, eta_deg=eta)
            s2 = train_stage2(s1, train, depth_maps if p_rrc > 0 else None, atlas if p_ra > 0 else None, sched)
            save_result(rec(layout.model(name)), s2, {"stage": 2, "variant": name, "config": cfg.digest()})
            write_loss_csv(rec(layout.path(f"{name}_loss.csv")), s2.history)
            models[name] = (s2.field, atlas if p_ra > 0 else None, p_rrc, p_ra, eta)

    reports, summary = {}, []
    for name, (fld, at, p_rrc, p_ra, eta) in models.items():
        with stage(f"evaluate:{name}", timings):
            meta = {"config": cfg.digest(), "seed": cfg.seed, "checkpoint": os.path.basename(layout.model(name))}
            rep = evaluate(fld, tests, at, eval_samples, layout.renders(name), rec, meta)
            rep.write_csv(rec(layout.path(f"metrics_{name}.csv")))
            reports[name] = rep
            summary.append(_summary_row(name, rep, p_rrc, p_ra, eta))
    write_summary_csv(rec(layout.path("summary.csv")), summary)

    manifest = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "config": asdict(cfg),
        "timings_s": timings,
        "summary": summary,
        "files": rec.files,
    }
    with open(layout.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    return ExperimentResult(summary, reports, manifest, layout, {k: v[0] for k, v in models.items()})


# --------------------------------------------------------------------------
# pieces used by the individual command-line verbs


def load_run_artifacts(layout: RunLayout, need_depth=False, need_atlas=False, train=None):
    """Load the stage-1 result and, on request, the cached depth maps and atlas."""
    s1, _ = load_result(layout.stage1)
    depth_maps = atlas = None
    if need_depth:
        depth_maps = [load_raw(layout.depth(f.name))[..., 0] for f in train]
    if need_atlas:
        atlas = load_atlas(layout.atlas, load_obj(layout.mesh))
    return s1, depth_maps, atlas
