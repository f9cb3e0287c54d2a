"""Command line entry point: ``mv4d <subcommand> ...``.

Every subcommand writes under ``--out``. ``--config`` takes a JSON file
whose top-level keys set option defaults for all subcommands and whose
per-subcommand objects (``{"sample": {...}}``) override them.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys

import click
import numpy as np

from .core import Fill, View, load_grid, load_views, normalize_times, save_grid, save_views, \
    write_png16
from .curation import corner_motion, static_view_filter

COMMANDS = ("world", "plan", "filter", "sample", "dense", "recon", "render", "eval", "slice")


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _load_scene(path):
    from .toyworld import SceneSpec

    return SceneSpec.from_dict(_read_json(path))


def _load_plan(path):
    from .trajectory import TrajectoryPlan

    return TrajectoryPlan.from_dict(_read_json(path))


def _denoiser(scene_path, bias, jitter, seed):
    from .diffusion import CorruptionSpec, OracleDenoiser

    return OracleDenoiser(_load_scene(scene_path), CorruptionSpec(bias, jitter, seed))


def _sampler_config(ctx, k, k_prime, schedule, mode, s_image, s_time):
    from .diffusion import GuidanceConfig
    from .gridsampler import SamplerConfig, parse_schedule

    guidance = GuidanceConfig(s_image, s_time)
    if mode == "bullet":
        return SamplerConfig.bullet(K=k, K_prime=k_prime, guidance=guidance, seed=ctx.obj["seed"])
    return SamplerConfig(K=k, K_prime=k_prime, schedule=parse_schedule(schedule),
                         guidance=guidance, seed=ctx.obj["seed"])


def _read_frames(folder):
    from .core import read_png16

    import cv2

    names = sorted(n for n in os.listdir(folder) if n.lower().endswith(".png"))
    if not names:
        raise click.ClickException(f"no PNG frames in {folder}")
    frames = []
    for n in names:
        p = os.path.join(folder, n)
        img = cv2.imread(p, cv2.IMREAD_UNCHANGED)
        if img is None:
            raise click.ClickException(f"cannot read {p}")
        frames.append(read_png16(p) if img.dtype == np.uint16 else
                      img[..., ::-1].astype(np.float64) / 255.0)
    return frames


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Global random seed.")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
              help="Output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file of option defaults.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def main(ctx, seed, out, config_path, verbose):
    """Multi-view video sampling and 4D reconstruction on toy scenes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, out=out)
    os.makedirs(out, exist_ok=True)
    if config_path:
        conf = _read_json(config_path)
        flat = {k: v for k, v in conf.items() if k not in COMMANDS}
        ctx.default_map = {c: {**flat, **conf.get(c, {})} for c in COMMANDS}


@main.command()
@click.option("--n-primitives", type=int, default=3, show_default=True)
@click.option("--frames", type=int, default=8, show_default=True)
@click.option("--kind", type=click.Choice(["orbit", "inout_spiral", "static"]), default="orbit",
              show_default=True, help="Input camera trajectory.")
@click.option("--radius", type=float, default=3.5, show_default=True)
@click.option("--turns", type=float, default=0.35, show_default=True)
@click.option("--elevation", type=float, default=0.8, show_default=True)
@click.option("--size", type=int, default=64, show_default=True, help="Image width and height.")
@click.option("--render/--no-render", default=True, show_default=True,
              help="Also render the input video.")
@click.pass_context
def world(ctx, n_primitives, frames, kind, radius, turns, elevation, size, render):
    """Generate a toy scene (scene.json) and its input video (input/)."""
    from .toyworld import generate_scene, render_input_video
    from .trajectory import make_path

    out = ctx.obj["out"]
    scene = generate_scene(ctx.obj["seed"], n_primitives)
    _write_json(os.path.join(out, "scene.json"), scene.to_dict())
    if render:
        path_kind = "orbit" if kind == "static" else kind
        cams = make_path(path_kind, center=scene.center, radius=radius, count=frames,
                         turns=0.0 if kind == "static" else turns, elevation=elevation,
                         width=size, height=size, fx=70.0 * size / 64)
        video = render_input_video(scene, cams, normalize_times(range(frames)))
        save_views(video, os.path.join(out, "input"))
    click.echo(out)


@main.command()
@click.option("--input", "input_dir", type=click.Path(exists=True), required=True)
@click.option("--kind", type=click.Choice(["orbit", "inout_spiral", "forward_spiral",
                                           "reuse_input"]), default="orbit", show_default=True)
@click.option("--k", type=int, default=6, show_default=True, help="Anchor cameras (grid rows).")
@click.option("--k-prime", type=int, default=16, show_default=True, help="Dense novel cameras.")
@click.option("--radius", type=float, default=3.5, show_default=True)
@click.option("--turns", type=float, default=1.0, show_default=True)
@click.option("--elevation", type=float, default=0.8, show_default=True)
@click.option("--spiral-amp", type=float, default=0.3, show_default=True)
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None,
              help="Scene JSON; its centre is used as the path centre.")
@click.pass_context
def plan(ctx, input_dir, kind, k, k_prime, radius, turns, elevation, spiral_amp, scene_path):
    """Choose anchor cameras and a novel-view path (plan.json)."""
    from .trajectory import plan_trajectory

    views = load_views(input_dir)
    cams = [v.camera for v in views]
    center = _load_scene(scene_path).center if scene_path else np.mean([c.center for c in cams], 0)
    cam0 = cams[0]
    p = plan_trajectory(cams, k, kind, center=center, radius=radius, turns=turns,
                        count=k_prime, elevation=elevation, spiral_amp=spiral_amp,
                        fx=cam0.fx, width=cam0.width, height=cam0.height)
    _write_json(os.path.join(ctx.obj["out"], "plan.json"), p.to_dict())
    click.echo(json.dumps({"anchors": list(p.anchor_indices), "novel": len(p.novel_cameras)}))


@main.command("filter")
@click.argument("videos", type=click.Path(exists=True, file_okay=False))
@click.option("--threshold", type=float, default=0.05, show_default=True)
@click.pass_context
def filter_cmd(ctx, videos, threshold):
    """Flag fixed-viewpoint videos among frame-folder subdirectories of VIDEOS."""
    verdicts = []
    for name in sorted(os.listdir(videos)):
        folder = os.path.join(videos, name)
        if not os.path.isdir(folder):
            continue
        frames = _read_frames(folder)
        verdicts.append({"video": name, "static_view": static_view_filter(frames, threshold),
                         "corner_motion": corner_motion(frames).tolist()})
    _write_json(os.path.join(ctx.obj["out"], "filter.json"), verdicts)
    click.echo(json.dumps(verdicts))


def _sampling_options(f):
    opts = [
        click.option("--input", "input_dir", type=click.Path(exists=True), required=True),
        click.option("--scene", "scene_path", type=click.Path(exists=True), required=True,
                     help="Scene JSON backing the oracle denoiser."),
        click.option("--plan", "plan_path", type=click.Path(exists=True), required=True),
        click.option("--k", type=int, default=6, show_default=True),
        click.option("--k-prime", type=int, default=16, show_default=True),
        click.option("--schedule", default="mv:25,t:16,mv:8", show_default=True),
        click.option("--mode", type=click.Choice(["grid", "bullet"]), default="grid",
                     show_default=True),
        click.option("--s-image", type=float, default=3.0, show_default=True),
        click.option("--s-time", type=float, default=4.5, show_default=True),
        click.option("--corrupt-bias", type=float, default=0.0, show_default=True),
        click.option("--corrupt-jitter", type=float, default=0.0, show_default=True),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@main.command()
@_sampling_options
@click.option("--target-index", type=int, default=0, show_default=True,
              help="Bullet mode: input frame whose time is reconstructed.")
@click.pass_context
def sample(ctx, input_dir, scene_path, plan_path, k, k_prime, schedule, mode, s_image, s_time,
           corrupt_bias, corrupt_jitter, target_index):
    """Sample the K x L multi-view video grid (grid/), or a bullet-time set (bullet/)."""
    from .gridsampler import alternate_sample, bootstrap_plan, bullet_time, stationary_bootstrap
    from .trajectory import is_stationary

    video = load_views(input_dir)
    p = _load_plan(plan_path)
    den = _denoiser(scene_path, corrupt_bias, corrupt_jitter, ctx.obj["seed"])
    cfg = _sampler_config(ctx, k, k_prime, schedule, mode, s_image, s_time)
    out = ctx.obj["out"]
    if mode == "bullet":
        cams = [video[i].camera for i in p.anchor_indices] + list(p.novel_cameras)
        imgs = bullet_time(video, target_index, cams, den, cfg)
        t = video[target_index].time
        save_views([View(np.clip(im, 0, 1), c, t, "generated") for im, c in zip(imgs, cams)],
                   os.path.join(out, "bullet"))
        click.echo(os.path.join(out, "bullet"))
        return
    cams = [v.camera for v in video]
    if len(video) > 1 and is_stationary(cams, _load_scene(scene_path).diagonal):
        # fixed viewpoint: bootstrap K generated t=0 views along the plan's path
        path = list(p.novel_cameras)[:k]
        if len(path) < k:
            raise click.ClickException(f"stationary input needs >= {k} novel cameras in the plan")
        video = stationary_bootstrap(video, path, den, cfg)
        p = bootstrap_plan(len(cams), path, p.kind)
    grid = alternate_sample(video, p, den, cfg)
    save_grid(grid, os.path.join(out, "grid"))
    click.echo(os.path.join(out, "grid"))


@main.command()
@_sampling_options
@click.option("--grid", "grid_dir", type=click.Path(exists=True), required=True)
@click.pass_context
def dense(ctx, input_dir, scene_path, plan_path, k, k_prime, schedule, mode, s_image, s_time,
          corrupt_bias, corrupt_jitter, grid_dir):
    """Generate the plan's novel cameras at every timestamp (dense/)."""
    from .gridsampler import dense_views

    p = _load_plan(plan_path)
    grid = load_grid(grid_dir)
    den = _denoiser(scene_path, corrupt_bias, corrupt_jitter, ctx.obj["seed"])
    cfg = _sampler_config(ctx, k, k_prime, schedule, "grid", s_image, s_time)
    views = [v for col in dense_views(grid, p, den, cfg) for v in col]
    save_views(views, os.path.join(ctx.obj["out"], "dense"))
    click.echo(os.path.join(ctx.obj["out"], "dense"))


def grid_views(grid) -> list[View]:
    return [View(grid.images[k, j], grid.cameras[k], float(grid.times[j]),
                 "input" if grid.fill[k, j] == Fill.INPUT else "generated")
            for k in range(grid.K) for j in range(grid.L)]


@main.command()
@click.option("--grid", "grid_dir", type=click.Path(exists=True), required=True)
@click.option("--dense", "dense_dir", type=click.Path(exists=True), default=None)
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None,
              help="Scene JSON; its bounds seed the initial cloud.")
@click.option("--phase1", type=int, default=500, show_default=True)
@click.option("--phase2", type=int, default=2500, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.pass_context
def recon(ctx, grid_dir, dense_dir, scene_path, phase1, phase2, batch_size):
    """Fit the deformable Gaussian model (model.npz, curve.csv)."""
    from .recon import ReconConfig, optimize, save_checkpoint
    from .recon.optimize import write_curve

    views = grid_views(load_grid(grid_dir))
    if dense_dir:
        views += load_views(dense_dir)
    cfg = ReconConfig(phase1_iters=phase1, phase2_iters=phase2, batch_size=batch_size)
    bounds = _load_scene(scene_path).bounds if scene_path else None
    res = optimize(views, cfg, ctx.obj["seed"], bounds=bounds)
    out = ctx.obj["out"]
    save_checkpoint(os.path.join(out, "model.npz"), res.cloud, res.field,
                    {"config": cfg.to_dict(), "bounds": res.bounds, "seed": ctx.obj["seed"]})
    write_curve(os.path.join(out, "curve.csv"), res.curve)
    click.echo(os.path.join(out, "model.npz"))


@main.command("render")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--plan", "plan_path", type=click.Path(exists=True), default=None,
              help="Render the plan's novel cameras (default: an orbit).")
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None)
@click.option("--frames", type=int, default=24, show_default=True)
@click.option("--time", "fixed_time", type=float, default=None,
              help="Freeze time (bullet-time sweep); otherwise time runs 0 to 1.")
@click.option("--size", type=int, default=64, show_default=True)
@click.pass_context
def render_cmd(ctx, model_path, plan_path, scene_path, frames, fixed_time, size):
    """Render a camera trajectory from a checkpoint to PNG frames (render/)."""
    from .recon import load_checkpoint, render_model
    from .trajectory import make_path

    cloud, field, meta = load_checkpoint(model_path)
    if plan_path:
        cams = list(_load_plan(plan_path).novel_cameras)
    else:
        if scene_path:
            center = _load_scene(scene_path).center
        else:
            lo, hi = meta.get("bounds", ((-1, -1, -1), (1, 1, 1)))
            center = 0.5 * (np.asarray(lo) + np.asarray(hi))
        cams = make_path("orbit", center=center, radius=3.5, count=frames, elevation=0.8,
                         width=size, height=size, fx=70.0 * size / 64)
    n = len(cams)
    times = [fixed_time] * n if fixed_time is not None else list(np.linspace(0, 1, n))
    folder = os.path.join(ctx.obj["out"], "render")
    os.makedirs(folder, exist_ok=True)
    alpha_min = meta.get("config", {}).get("alpha_min", 0.0)
    for i, (c, t) in enumerate(zip(cams, times)):
        img = np.clip(render_model(cloud, field, c, float(t), alpha_min=alpha_min), 0, 1)
        write_png16(os.path.join(folder, f"frame{i:04d}.png"), img)
    click.echo(folder)


@main.command("eval")
@click.option("--grid", "grid_dir", type=click.Path(exists=True), required=True)
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="Also score a checkpoint against scene renders at held-out cameras.")
@click.option("--plan", "plan_path", type=click.Path(exists=True), default=None)
@click.pass_context
def eval_cmd(ctx, grid_dir, scene_path, model_path, plan_path):
    """Score a grid (and optionally a model): report.json and report.csv."""
    from .metrics import consistency_report, psnr, ssim

    grid = load_grid(grid_dir)
    scene = _load_scene(scene_path) if scene_path else None
    report = consistency_report(grid, scene).to_dict()
    rows = [{"metric": k, "value": v} for k, v in report.items() if not isinstance(v, list)]
    if model_path:
        if scene is None or plan_path is None:
            raise click.UsageError("--model needs --scene and --plan")
        from .recon import load_checkpoint, render_model
        from .toyworld import render

        cloud, field, meta = load_checkpoint(model_path)
        alpha_min = meta.get("config", {}).get("alpha_min", 0.0)
        cams = list(_load_plan(plan_path).novel_cameras)
        scores = []
        for i, c in enumerate(cams):
            t = float(grid.times[i % grid.L])
            img = np.clip(render_model(cloud, field, c, t, alpha_min=alpha_min), 0, 1)
            gt = render(scene, c, t)
            scores.append({"camera": i, "time": t, "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
        report["model"] = scores
        rows.append({"metric": "model_psnr_mean", "value": float(np.mean([s["psnr"] for s in scores]))})
        rows.append({"metric": "model_ssim_mean", "value": float(np.mean([s["ssim"] for s in scores]))})
    out = ctx.obj["out"]
    _write_json(os.path.join(out, "report.json"), report)
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "value"])
        w.writeheader()
        w.writerows(rows)
    click.echo(json.dumps({r["metric"]: r["value"] for r in rows}))


@main.command("slice")
@click.option("--frames", "frames_dir", type=click.Path(exists=True), default=None,
              help="Folder of PNG frames in time order.")
@click.option("--grid", "grid_dir", type=click.Path(exists=True), default=None)
@click.option("--camera", type=int, default=0, show_default=True, help="Grid row to slice.")
@click.option("--row", type=int, default=None, help="Pixel row (default: middle).")
@click.pass_context
def slice_cmd(ctx, frames_dir, grid_dir, camera, row):
    """Space-time slice (time down, image x across) as slice.png."""
    from .metrics import spacetime_slice

    if (frames_dir is None) == (grid_dir is None):
        raise click.UsageError("give exactly one of --frames or --grid")
    frames = np.asarray(_read_frames(frames_dir) if frames_dir else load_grid(grid_dir).images[camera])
    r = frames.shape[1] // 2 if row is None else row
    path = os.path.join(ctx.obj["out"], "slice.png")
    write_png16(path, spacetime_slice(frames, r))
    click.echo(path)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
