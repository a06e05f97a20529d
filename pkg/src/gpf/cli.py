"""Command-line front end: ``gpf <command> [options]``.

Commands: synth, depth, fetch, render, train, finetune, edit, eval. Global
options go before the command: ``gpf --seed 1 --config run.json train ...``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as gio
from .config import RunConfig, load_config

log = logging.getLogger("gpf")

SAMPLERS = ("log16", "uni64", "uni128", "uni64+128", "surf2")


def _views(args, need_images=True):
    views = gio.cameras_read(args.cams, getattr(args, "images", None), load_images=need_images)
    if need_images and any(v.image is None for v in views):
        raise SystemExit("error: every camera needs an image for this command")
    return views


def _model(args, cfg: RunConfig, fetch: bool):
    from .kernel import KernelParameters
    from .features import FetchAggregatorParams
    from .render import Model

    if getattr(args, "params", None):
        w, agg, has_fetch = gio.load_params(args.params)
        kern = KernelParameters.init(0, agg)
        model = Model(KernelParameters({k: w[k] for k in kern.weights}, agg))
        if fetch:
            fw = FetchAggregatorParams.init(0).weights
            if has_fetch:
                fw = {k: w[k] for k in fw}
            model = dataclasses.replace(model, fetch=FetchAggregatorParams(fw))
        return model
    return Model.init(args.seed, cfg.render.aggregator, fetch=fetch)


def _save_model(path, model) -> None:
    gio.ensure_dir(path)
    gio.save_params(path, model.weights(), model.aggregator, model.fetch is not None)


def _scene(field, views, cfg: RunConfig, fetch: bool):
    from .training import build_scene

    return build_scene(field, views, cfg.kernel, cfg.log, cfg.depth, fetch=fetch, top_k=cfg.fetch.top_k_views)


def _sampling(args, cfg: RunConfig) -> RunConfig:
    """Fold ``--sampler`` / ``--base`` into the run config."""
    over = {}
    if getattr(args, "sampler", None):
        over["train"] = {"sampler": args.sampler}
        over["render"] = {"sampler": args.sampler}
    if getattr(args, "base", None) is not None:
        over["log"] = {"base": args.base}
    return cfg.override(over) if over else cfg


def _write_json(path, obj) -> None:
    gio.ensure_dir(path)
    Path(path).write_text(json.dumps(obj, indent=1))


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> None:
    from .synth import synth_scene

    sc = cfg.synth
    s = synth_scene(args.kind or sc.kind, args.n_points or sc.n_points, args.n_views or sc.n_views,
                    args.resolution or sc.resolution, seed=args.seed, n_held_out=sc.n_held_out)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    gio.ply_write(out / "points.ply", s.field.positions, s.field.f_c)
    for group, views, depths in (("view", s.views, s.gt_depths), ("held", s.held_out, s.held_out_depths)):
        names = []
        for i, (v, d) in enumerate(zip(views, depths)):
            names.append(f"images/{group}_{i:03d}.png")
            gio.png_write(out / names[-1], v.image)
            gio.pfm_write(out / "depth" / f"{group}_{i:03d}.pfm", d)
        gio.cameras_write(out / ("cams.json" if group == "view" else "held_out.json"), views, names)
    _write_json(out / "config.json", s.suggested_config())
    print(f"wrote {len(s.field)} points, {len(s.views)} views, {len(s.held_out)} held-out views to {out}")


def cmd_depth(args, cfg: RunConfig) -> None:
    from .depth import estimate_depth_map
    from .render import Scene

    field = gio.load_field(args.features, args.points) if args.features else gio.field_from_ply(args.points)
    views = _views(args, need_images=False)
    if not 0 <= args.view < len(views):
        raise SystemExit(f"error: --view {args.view} out of range (0..{len(views) - 1})")
    scene = Scene.build(field, views, cfg.kernel, cfg.log, cfg.depth)
    D = estimate_depth_map(field, scene.index, views[args.view], scene.depth_cfg)
    gio.ensure_dir(args.out)
    gio.pfm_write(args.out, D)


def cmd_fetch(args, cfg: RunConfig) -> None:
    from .features import fetch_forward

    field = gio.field_from_ply(args.points)
    views = _views(args)
    scene = _scene(field, views, cfg, fetch=True)
    model = _model(args, cfg, fetch=True)
    feats, _ = fetch_forward(model.fetch.weights, scene.fetch_inputs)
    gio.ensure_dir(args.out)
    gio.save_field(args.out, field.with_features(feats))


def _load_scene_field(args):
    return gio.load_field(args.scene)


def cmd_train(args, cfg: RunConfig) -> None:
    from .training import bake_features, train

    cfg = _sampling(args, cfg)
    views = _views(args)
    fetch = args.points is not None
    if fetch == (args.scene is not None):
        raise SystemExit("error: give exactly one of --points (fetch mode) or --scene (field mode)")
    field = gio.field_from_ply(args.points) if fetch else _load_scene_field(args)
    scene = _scene(field, views, cfg, fetch=fetch)
    model = _model(args, cfg, fetch=fetch)
    tc = cfg.train
    if args.iters is not None:
        tc = dataclasses.replace(tc, iters=args.iters)
    tc = dataclasses.replace(tc, seed=args.seed, train_features=tc.train_features and not fetch)
    res = train(scene, model, tc, callback=lambda it, loss: log.info("iter %d loss %.6g", it, loss))
    if args.params_out:
        _save_model(args.params_out, res.model)
    if args.out:
        out_scene = bake_features(res.scene, res.model) if fetch else res.scene
        gio.ensure_dir(args.out)
        gio.save_field(args.out, out_scene.field)
    if args.metrics:
        _write_json(args.metrics, {"loss": [float(x) for x in res.history]})


def cmd_finetune(args, cfg: RunConfig) -> None:
    from .training import finetune_schedule

    cfg = _sampling(args, cfg)
    views = _views(args)
    field = _load_scene_field(args)
    scene = _scene(field, views, cfg, fetch=False)
    model = dataclasses.replace(_model(args, cfg, fetch=False), fetch=None)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    fc = dataclasses.replace(cfg.finetune, seed=args.seed)
    res = finetune_schedule(scene, model, fc, dataclasses.replace(cfg.train, seed=args.seed), stages=stages)
    gio.ensure_dir(args.out)
    gio.save_field(args.out, res.scene.field)
    if args.params_out:
        _save_model(args.params_out, res.model)
    if args.metrics:
        _write_json(args.metrics, {"initial_loss": res.initial_loss, "best_loss": res.best_loss,
                                   "records": res.records})


def cmd_render(args, cfg: RunConfig) -> None:
    from .render import Scene, render_image

    cfg = _sampling(args, cfg)
    field = _load_scene_field(args)
    views = _views(args, need_images=False)
    if not 0 <= args.view < len(views):
        raise SystemExit(f"error: --view {args.view} out of range (0..{len(views) - 1})")
    scene = Scene.build(field, views, cfg.kernel, cfg.log, cfg.depth)
    model = dataclasses.replace(_model(args, cfg, fetch=False), fetch=None)
    sampler = cfg.render.sampler
    img, depth = render_image(scene, model, views[args.view], sampler, chunk=cfg.render.chunk, view_id=args.view,
                              return_depth=True)
    gio.ensure_dir(args.out)
    gio.png_write(args.out, img)
    if args.float_out:
        gio.pfm_write(args.float_out, img)
    if args.depth_out:
        gio.pfm_write(args.depth_out, depth)


def cmd_edit(args, cfg: RunConfig) -> None:
    from .edit import select_points, transfer_features, transform_points

    field = _load_scene_field(args)
    sel = select_points(field, args.region) if args.region else np.arange(len(field))
    if len(sel) == 0:
        raise SystemExit("error: region selects no points")
    if args.op == "move":
        if not args.transform:
            raise SystemExit("error: move needs --transform")
        T = _read_transform(args.transform)
        out = transform_points(field, sel, T)
    else:
        if args.op == "recolor" and args.color:
            feats = field.features
            feats[sel, :3] = np.array([float(c) for c in args.color.split(",")])
            out = field.with_features(feats)
        else:
            if not args.source:
                raise SystemExit(f"error: {args.op} needs --source (or --color for recolor)")
            src = gio.load_field(args.source)
            which = "color+low" if args.op == "recolor" else args.which
            part = transfer_features(src, field.subset(sel), which=which, k=args.k)
            feats = field.features
            feats[sel] = part.features
            out = field.with_features(feats)
    gio.ensure_dir(args.out)
    gio.save_field(args.out, out)


def _read_transform(path) -> np.ndarray:
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, dict):
        T = np.eye(4)
        if "matrix" in obj:
            return np.array(obj["matrix"], dtype=np.float64).reshape(4, 4)
        T[:3, :3] = np.array(obj.get("rotation", np.eye(3)), dtype=np.float64).reshape(3, 3)
        T[:3, 3] = np.array(obj.get("translation", [0, 0, 0]), dtype=np.float64)
        return T
    return np.array(obj, dtype=np.float64).reshape(4, 4)


def cmd_eval(args, cfg: RunConfig) -> None:
    from .metrics import psnr, ssim

    a, b = gio.png_read(args.pred), gio.png_read(args.gt)
    res = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
    text = json.dumps(res)
    if args.out:
        gio.ensure_dir(args.out)
        Path(args.out).write_text(text)
    print(text)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpf", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("--config", default=None, help="JSON file overriding module defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--kind", choices=("sphere", "slab", "two_slabs", "textured_cube", "hole_slab"))
    s.add_argument("--n-points", type=int)
    s.add_argument("--n-views", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("depth", help="estimate a visible depth map (PFM)")
    s.add_argument("--points", required=True)
    s.add_argument("--features")
    s.add_argument("--cams", required=True)
    s.add_argument("--view", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_depth)

    s = sub.add_parser("fetch", help="fetch per-point features from images")
    s.add_argument("--points", required=True)
    s.add_argument("--cams", required=True)
    s.add_argument("--images")
    s.add_argument("--params")
    s.add_argument("--out", required=True, help="scene .gpff (a sibling .ply is written too)")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("render", help="render one view to PNG")
    s.add_argument("--scene", required=True)
    s.add_argument("--cams", required=True)
    s.add_argument("--view", type=int, required=True)
    s.add_argument("--sampler", choices=SAMPLERS)
    s.add_argument("--base", type=float, help="log-sampling base")
    s.add_argument("--params")
    s.add_argument("--out", required=True)
    s.add_argument("--float-out", help="also write the image as PFM")
    s.add_argument("--depth-out", help="also write the rendered depth as PFM")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", help="optimize kernel (and aggregator) parameters")
    s.add_argument("--points", help="point cloud; trains the fetch aggregators jointly")
    s.add_argument("--scene", help="scene .gpff; trains on its stored features")
    s.add_argument("--cams", required=True)
    s.add_argument("--images")
    s.add_argument("--params")
    s.add_argument("--iters", type=int)
    s.add_argument("--sampler", choices=SAMPLERS)
    s.add_argument("--base", type=float, help="log-sampling base")
    s.add_argument("--params-out")
    s.add_argument("--out", help="write the (fetched) scene .gpff")
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="hierarchical per-scene finetuning")
    s.add_argument("--stage", default="all", choices=("all", "1", "2", "3"))
    s.add_argument("--sampler", choices=SAMPLERS)
    s.add_argument("--base", type=float, help="log-sampling base")
    s.add_argument("--scene", required=True)
    s.add_argument("--cams", required=True)
    s.add_argument("--images")
    s.add_argument("--params")
    s.add_argument("--params-out")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("edit", help="move, recolor or transfer features of selected points")
    s.add_argument("--scene", required=True)
    s.add_argument("--op", required=True, choices=("move", "recolor", "transfer"))
    s.add_argument("--region", help='"box:x0,y0,z0,x1,y1,z1" or "sphere:cx,cy,cz,r" (default: all points)')
    s.add_argument("--transform", help="JSON 4x4 matrix, or {rotation, translation}")
    s.add_argument("--source", help="source scene .gpff for recolor/transfer")
    s.add_argument("--which", default="all", choices=("color+low", "high", "all"))
    s.add_argument("--color", help="r,g,b in [0,1] for recolor without a source")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", help="PSNR/SSIM between two PNG images")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, TypeError) as e:
        print(f"error: bad config: {e}", file=sys.stderr)
        return 2
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args, cfg)
        else:
            args.func(args, cfg)
    except gio.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
