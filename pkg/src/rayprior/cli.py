"""Command-line entry point: ``rayprior <verb> --config run.cfg --set key=value``.

Exit codes: 0 success, 2 configuration error, 3 pipeline-stage failure,
4 metric-input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .config import ConfigError, load_config
from .images import load_png, save_raw
from .mesh import EmptySurfaceError, build_ray_atlas, extract_mesh, load_obj, save_atlas, save_obj
from .metrics import MetricInputError, MetricReport
from .pipeline import (
    ETA_SWEEP, PipelineStageError, RunLayout, evaluate, load_run_artifacts, prepare_dataset,
    run_experiment, stage,
)
from .field import RadianceField
from .scenes import load_dataset, split_by_distance
from .trainer import (
    TrainingDivergedError, compute_depth_cache, load_result, save_result, train_stage1, train_stage2,
    write_loss_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_METRIC = 0, 2, 3, 4
log = logging.getLogger("rayprior")


def _dataset(cfg, layout):
    path = cfg.dataset or os.path.join(layout.data, "transforms.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset at {path}; run gen-scene first or set dataset=...")
    return load_dataset(path)


def cmd_gen_scene(cfg, args):
    layout = RunLayout(cfg.output_dir)
    with stage("generate"):
        ds = prepare_dataset(replace(cfg, dataset=None), layout)
    print(f"wrote {len(ds.frames)} frames to {layout.data}")


def cmd_split(cfg, args):
    layout = RunLayout(cfg.output_dir)
    path = cfg.dataset or os.path.join(layout.data, "transforms.json")
    with stage("split"):
        ds = load_dataset(path)
        tests = ds.test
        bounds = tuple(args.boundaries) if args.boundaries else None
        tags, dists = split_by_distance([f.camera.rotation for f in tests], [f.camera.rotation for f in ds.train], bounds)
        if os.path.isdir(path):
            path = os.path.join(path, "transforms.json")
        with open(path) as fh:
            manifest = json.load(fh)
        by_name = {f.name: (t, float(d)) for f, t, d in zip(tests, tags, dists)}
        for e in manifest["frames"]:
            name = os.path.splitext(os.path.basename(e["file_path"]))[0]
            if name in by_name:
                e["split"], e["d_y"] = by_name[name]
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=1)
    for tag in ("test-close", "test-middle", "test-far"):
        print(f"{tag}: {tags.count(tag)}")


def cmd_train(cfg, args):
    layout = RunLayout(cfg.output_dir)
    os.makedirs(layout.root, exist_ok=True)
    ds = _dataset(cfg, layout)
    schedule = cfg.schedule()
    if args.stage == 1:
        with stage("stage1"):
            fld = RadianceField(cfg.field_config(), seed=cfg.seed)
            res = train_stage1(fld, ds.train, schedule, checkpoint_path=layout.stage1 + ".diverged")
            save_result(layout.stage1, res, {"stage": 1, "config": cfg.digest()})
            write_loss_csv(layout.path("stage1_loss.csv"), res.history)
        print(f"stage 1 done: {layout.stage1}")
        return
    with stage("stage2"):
        need_depth = cfg.p_rrc > 0
        s1, _, atlas = load_run_artifacts(layout, need_atlas=cfg.p_ra > 0)
        depth = None
        if need_depth:
            if all(os.path.exists(layout.depth(f.name)) for f in ds.train):
                _, depth, _ = load_run_artifacts(layout, need_depth=True, train=ds.train)
            else:
                depth = compute_depth_cache(s1.field, ds.train, cfg.n_samples)
                os.makedirs(layout.path("depth"), exist_ok=True)
                for f, dm in zip(ds.train, depth):
                    save_raw(layout.depth(f.name), dm[..., None])
        name = args.name
        res = train_stage2(s1, ds.train, depth, atlas, schedule, checkpoint_path=layout.model(name) + ".diverged")
        save_result(layout.model(name), res, {"stage": 2, "variant": name, "config": cfg.digest()})
        write_loss_csv(layout.path(f"{name}_loss.csv"), res.history)
    print(f"stage 2 done: {layout.model(name)}")


def cmd_extract_mesh(cfg, args):
    layout = RunLayout(cfg.output_dir)
    with stage("extract-mesh"):
        s1, _ = load_result(layout.stage1)
        mesh = extract_mesh(s1.field, cfg.mesh_resolution, cfg.iso_level, cfg.bound_radius)
        save_obj(layout.mesh, mesh)
    print(f"mesh: {mesh.n_vertices} vertices, {len(mesh.triangles)} triangles -> {layout.mesh}")


def cmd_build_atlas(cfg, args):
    layout = RunLayout(cfg.output_dir)
    with stage("build-atlas"):
        ds = _dataset(cfg, layout)
        atlas = build_ray_atlas(load_obj(layout.mesh), [f.camera for f in ds.train], eps=args.eps)
        save_atlas(layout.atlas, atlas)
    print(f"atlas: {int(atlas.valid.sum())}/{len(atlas.valid)} vertices observed -> {layout.atlas}")


def cmd_render(cfg, args):
    layout = RunLayout(cfg.output_dir)
    with stage("render"):
        ds = _dataset(cfg, layout)
        res, _ = load_result(layout.model(args.name))
        atlas = None
        if args.atlas:
            _, _, atlas = load_run_artifacts(layout, need_atlas=True)
        frames = ds.test if args.split == "test" else ds.select(split=args.split)
        out = layout.renders(args.name)
        evaluate(res.field, frames, atlas, args.samples, out)
    print(f"rendered {len(frames)} frames to {out}")


def cmd_eval(cfg, args):
    layout = RunLayout(cfg.output_dir)
    ds = _dataset(cfg, layout)
    src = args.renders or layout.renders(args.name)
    report = MetricReport(meta={"config": cfg.digest(), "seed": cfg.seed, "checkpoint": args.name})
    for f in ds.test:
        p = os.path.join(src, f"{f.name}.png")
        if not os.path.exists(p):
            raise MetricInputError(f"missing render {p}")
        report.add(f.name, f.split, load_png(p), f.image, f.group, f.d_y)
    out = args.out or layout.path(f"metrics_{args.name}.csv")
    report.write_csv(out)
    for tag, agg in report.aggregate("group").items():
        print(f"{tag}: PSNR {agg['psnr']:.3f} dB  SSIM {agg['ssim']:.4f}  (n={agg['n']})")


def cmd_ablate(cfg, args):
    if args.grid == "components":
        cfg = replace(cfg, variants=("rrc", "ra", "rrc+ra"), eta_sweep=())
    elif args.grid == "eta":
        cfg = replace(cfg, variants=("none",), eta_sweep=ETA_SWEEP)
    result = run_experiment(cfg)
    for row in result.summary:
        cols = "  ".join(f"{k}={v:.3f}" for k, v in row.items() if k.startswith("psnr_"))
        print(f"{row['model']:>16}  {cols}")
    print(f"manifest: {result.layout.path('manifest.json')}")


def build_parser():
    parser = argparse.ArgumentParser(prog="rayprior", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(fn=fn)
        return p

    verb("gen-scene", cmd_gen_scene, "render the toy scene's training and test views")
    p = verb("split", cmd_split, "tag test views close/middle/far by pose distance")
    p.add_argument("--boundaries", type=float, nargs=2, metavar=("LO", "HI"))
    p = verb("train", cmd_train, "run stage 1 or stage 2 training")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--name", default="rrc+ra", help="stage-2 model name")
    verb("extract-mesh", cmd_extract_mesh, "extract a mesh from the stage-1 density")
    p = verb("build-atlas", cmd_build_atlas, "accumulate training directions on the mesh")
    p.add_argument("--eps", type=float, default=None, help="visibility tolerance (default half a voxel)")
    p = verb("render", cmd_render, "render views from a checkpoint")
    p.add_argument("--name", default="baseline", help="model name (baseline = stage 1)")
    p.add_argument("--split", default="test")
    p.add_argument("--atlas", action="store_true", help="feed atlas directions to the color head")
    p.add_argument("--samples", type=int, default=64)
    p = verb("eval", cmd_eval, "score rendered views against references")
    p.add_argument("--name", default="baseline")
    p.add_argument("--renders", help="directory of rendered PNGs")
    p.add_argument("--out", help="CSV path")
    p = verb("ablate", cmd_ablate, "full pipeline over an ablation grid")
    p.add_argument("--grid", choices=("config", "components", "eta"), default="config")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MetricInputError as exc:
        print(f"metric input error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except PipelineStageError as exc:
        cause = exc.__cause__
        if isinstance(cause, MetricInputError):
            print(f"metric input error in stage '{exc.stage}': {cause}", file=sys.stderr)
            return EXIT_METRIC
        if isinstance(cause, ConfigError):
            print(f"config error in stage '{exc.stage}': {cause}", file=sys.stderr)
            return EXIT_CONFIG
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, EmptySurfaceError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
