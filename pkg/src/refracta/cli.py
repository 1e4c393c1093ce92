"""Command-line interface.

Subcommands mirror the pipeline stages plus dataset generation, rendering,
and evaluation. Each reads an optional TOML/JSON config (flags override) and
exits 0 on success, 2 on configuration errors, 3 on data errors, and 4 on
numerical failures, always with a single-line diagnostic on stderr.
"""

import argparse
import json
import os
import sys

from . import __version__, pipeline
from .backend import set_threads, thread_count_from_env
from .bvh import AccelIndex
from .errors import ConfigError, DataError, NumericalError, RefractaError
from .io import load_json, save_pfm
from .synth import make_dataset, path_trace_reference
from .optics import render_layer


def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    if path.endswith(".json"):
        return load_json(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            try:
                return tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    raise ConfigError(f"config must be .toml or .json, got {path}")


def _common_flags(p, out=True):
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--threads", type=int, help="worker pool cap (env REFRACTA_THREADS)")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--ior", type=float, help="assumed index of refraction")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser():
    p = argparse.ArgumentParser(prog="refracta", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scene bundles")
    _common_flags(g)
    g.add_argument("--scenes", type=int, default=1, help="number of scenes")
    g.add_argument("--views", type=int, default=10)
    g.add_argument("--size", type=int, default=128, help="image resolution")
    g.add_argument("--ior-range", nargs=2, type=float, metavar=("LO", "HI"))
    g.add_argument("--grid", type=int, default=128, help="shape polygonization grid")

    for name in ("carve", "trace-normals", "search", "refine", "fuse", "reconstruct", "eval", "pipeline"):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all stages")
        _common_flags(s)
        s.add_argument("--scene", required=True, help="scene manifest.json")
        s.add_argument("--views", type=int, help="use only the first N views")
        if name == "fuse":
            s.add_argument("--strategy", choices=("re", "avg", "nearest"))
        if name == "reconstruct":
            s.add_argument("--method", choices=("poisson", "deform"))
        if name == "pipeline":
            s.add_argument("--no-resume", action="store_true", help="re-run every stage")

    r = sub.add_parser("render", help="render a view (rendering layer or reference tracer)")
    _common_flags(r, out=False)
    r.add_argument("--scene", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--mode", choices=("layer", "reference"), default="layer")
    r.add_argument("--spp", type=int, default=16)
    r.add_argument("--bounces", type=int, default=2)
    r.add_argument("--output", required=True, help="output PFM path")
    return p


def _merged_config(args):
    cfg = _load_config(getattr(args, "config", None))
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a table/object")
    for key in ("seed", "ior"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "strategy", None):
        cfg.setdefault("fuse", {})["strategy"] = args.strategy
    if getattr(args, "method", None):
        cfg.setdefault("reconstruct", {})["method"] = args.method
    return cfg


def _run_stage_only(args, stage):
    cfg = _merged_config(args)
    scene = pipeline.Scene(args.scene, max_views=getattr(args, "views", None))
    out = args.out
    os.makedirs(out, exist_ok=True)
    ior = float(cfg.get("ior", scene.true_ior))
    sub = dict(cfg.get(stage.replace("-", "_"), {}))
    if stage == "carve":
        pipeline.stage_carve(scene, out, sub)
    elif stage == "trace-normals":
        pipeline.stage_trace_normals(scene, out, sub, ior)
    elif stage == "search":
        pipeline.stage_search(scene, out, sub, ior)
    elif stage == "refine":
        pipeline.stage_refine(scene, out, sub, ior)
    elif stage == "fuse":
        pipeline.stage_fuse(scene, out, sub, ior)
    elif stage == "reconstruct":
        pipeline.stage_reconstruct(scene, out, sub, ior)
    elif stage == "eval":
        pipeline.stage_eval(scene, out, sub, ior, full_cfg=cfg)
    print(f"{stage}: done -> {out}")


def _cmd_gen(args):
    cfg = _merged_config(args)
    seed = int(cfg.get("seed", 0))
    scenes = make_dataset(
        args.out,
        shape_seeds=list(range(seed, seed + args.scenes)),
        views=args.views,
        image_size=args.size,
        ior=float(cfg.get("ior", 1.4723)),
        grid_resolution=args.grid,
        ior_range=tuple(args.ior_range) if args.ior_range else None,
        seed=seed,
    )
    for m in scenes:
        print(m)


def _cmd_render(args):
    cfg = _merged_config(args)
    scene = pipeline.Scene(args.scene)
    ior = float(cfg.get("ior", scene.true_ior))
    cams = scene.cameras()
    if not (0 <= args.view < len(cams)):
        raise ConfigError(f"--view {args.view} out of range (scene has {len(cams)} views)")
    cam = cams[args.view]
    env = scene.env()
    if args.mode == "layer":
        pair = scene.gt_pairs(ior)[args.view]
        out = render_layer(env, pair, cam, ior)
        img = out.total()
    else:
        mesh = scene.gt_mesh()
        res = path_trace_reference(
            AccelIndex(mesh), env, cam, ior, max_bounces=args.bounces,
            samples_per_pixel=args.spp, seed=int(cfg.get("seed", 0)), pixel_filter="box",
        )
        img = res.image
    save_pfm(args.output, img)
    print(f"render: {args.mode} view {args.view} -> {args.output}")


def _cmd_pipeline(args):
    cfg = _merged_config(args)
    statuses = pipeline.run_pipeline(
        args.scene, args.out, config=cfg,
        max_views=getattr(args, "views", None),
        resume=not getattr(args, "no_resume", False),
    )
    for stage, status in statuses:
        print(f"{stage}: {status}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        set_threads(thread_count_from_env(getattr(args, "threads", None)))
        if args.command == "gen":
            _cmd_gen(args)
        elif args.command == "render":
            _cmd_render(args)
        elif args.command == "pipeline":
            _cmd_pipeline(args)
        else:
            _run_stage_only(args, args.command)
    except ConfigError as exc:
        print(f"refracta: error code=2 kind=config message={json.dumps(str(exc))}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"refracta: error code=3 kind=data message={json.dumps(str(exc))}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"refracta: error code=4 kind=numerical message={json.dumps(str(exc))}", file=sys.stderr)
        return 4
    except RefractaError as exc:  # pragma: no cover - catch-all for subclasses
        print(f"refracta: error code=4 kind=internal message={json.dumps(str(exc))}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
