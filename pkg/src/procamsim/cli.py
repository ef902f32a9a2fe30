"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
failure. The thread count comes from ``--threads`` or the
``PROCAMSIM_THREADS`` environment variable; results are bitwise identical
across thread counts for a fixed seed. Report-producing subcommands write
matplotlib figures next to their CSV output.
"""

from __future__ import annotations

import glob
import json
import os
import sys

import click
import numpy as np
import torch

from . import imgio, report
from .denoise import DenoiseSettings, denoise
from .errors import NumericalError, ProcamsimError, ValidationError
from .fixtures import FIXTURE_NAMES, FixtureSpec, make_fixture
from .metrics import MetricsReport
from .render import RenderSettings, render, render_aux
from .scene import load_scene, save_scene
from .tape import fd_check

# usage errors exit 1 (click's default is 2, which this tool reserves for
# validation failures)
click.UsageError.exit_code = 1


def _apply_threads(threads: int | None) -> None:
    env = os.environ.get("PROCAMSIM_THREADS")
    if threads is None and env:
        threads = int(env)
    if threads is not None and threads > 0:
        torch.set_num_threads(threads)
        try:
            import numba

            numba.set_num_threads(threads)
        except (ImportError, ValueError):
            pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _parse_res(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as e:
        raise click.UsageError(f"resolution must look like 800x600, got '{text}'") from e


def _read_image(path: str) -> np.ndarray:
    return imgio.read_pfm(path) if path.lower().endswith(".pfm") \
        else imgio.read_png(path)


def _settings_from(cfg: dict, spp: int, depth: int, seed: int,
                   no_clip: bool = False) -> RenderSettings:
    return RenderSettings(
        spp=cfg.get("spp", spp), max_depth=cfg.get("max_depth", depth),
        clipping_enabled=not no_clip and cfg.get("clipping_enabled", True),
        seed=seed, tile_size=cfg.get("tile_size", 16384))


@click.group()
@click.option("--threads", type=int, default=None, help="worker thread count")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="JSON file with default settings")
@click.pass_context
def main(ctx, threads, seed, config_path):
    """Differentiable projector-camera simulator."""
    _apply_threads(threads)
    ctx.obj = {"seed": seed, "config": _load_config(config_path)}


@main.command("make-fixture")
@click.option("--name", type=click.Choice(FIXTURE_NAMES), default="flat-plane",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--k", type=int, default=15, show_default=True)
@click.option("--test-size", type=int, default=20, show_default=True)
@click.option("--gt-spp", type=int, default=256, show_default=True)
@click.option("--proj-res", default="800x600", show_default=True)
@click.option("--cam-res", default="640x360", show_default=True)
@click.option("--texture-res", type=int, default=64, show_default=True)
@click.pass_context
def cmd_make_fixture(ctx, name, out_dir, k, test_size, gt_spp, proj_res,
                     cam_res, texture_res):
    """Build a synthetic fixture scene and render its image pairs."""
    spec = FixtureSpec(name=name, K=k, test_size=test_size,
                       seed=ctx.obj["seed"], gt_spp=gt_spp,
                       projector_resolution=_parse_res(proj_res),
                       camera_resolution=_parse_res(cam_res),
                       texture_resolution=texture_res)
    make_fixture(spec, out_dir)
    click.echo(f"fixture '{name}' written to {out_dir}")


@main.command("sl-generate")
@click.option("--proj-res", default="800x600", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_sl_generate(proj_res, out_dir):
    """Write the Gray-code pattern sequence as PNGs."""
    from .structured_light import generate_patterns

    w, h = _parse_res(proj_res)
    code = generate_patterns(w, h)
    os.makedirs(out_dir, exist_ok=True)
    for i, p in enumerate(code.patterns):
        imgio.write_png(os.path.join(out_dir, f"pattern_{i:03d}.png"), p)
    click.echo(f"{len(code.patterns)} patterns written to {out_dir}")


def _load_captures(captures_dir: str) -> list[np.ndarray]:
    files = sorted(glob.glob(os.path.join(captures_dir, "*.png")))
    if not files:
        raise ValidationError(f"no PNG captures found in {captures_dir}")
    return [imgio.read_png(f) for f in files]


def _render_captures(scene, code, spp: int, seed: int) -> list[np.ndarray]:
    caps = []
    for i, img in enumerate(code.as_inputs()):
        st = RenderSettings(spp=spp, max_depth=2, seed=seed + i)
        caps.append(render(scene, torch.as_tensor(img), st).numpy())
    return caps


@main.command("sl-decode")
@click.option("--captures", "captures_dir", type=click.Path(exists=True),
              required=True)
@click.option("--proj-res", default="800x600", show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="correspondence map (PFM: x_p, y_p, valid)")
def cmd_sl_decode(captures_dir, proj_res, out_path):
    """Decode Gray-code captures into a correspondence map."""
    from .structured_light import decode, generate_patterns

    w, h = _parse_res(proj_res)
    code = generate_patterns(w, h)
    cmap = decode(_load_captures(captures_dir), code)
    out = np.concatenate([cmap.coords,
                          cmap.valid[:, :, None].astype(np.float64)], axis=2)
    imgio.write_pfm(out_path, out.astype(np.float32))
    click.echo(f"decoded {int(cmap.valid.sum())} valid pixels -> {out_path}")


@main.command("reconstruct")
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--captures", "captures_dir", type=click.Path(exists=True),
              default=None, help="pattern captures; rendered if omitted")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--spp", type=int, default=16, show_default=True)
@click.pass_context
def cmd_reconstruct(ctx, scene_path, captures_dir, out_dir, spp):
    """Structured-light geometry: decode, triangulate, mesh."""
    from .structured_light import decode, generate_patterns, mesh_from_depth, \
        triangulate

    scene = load_scene(scene_path)
    code = generate_patterns(*scene.projector.resolution)
    caps = _load_captures(captures_dir) if captures_dir else \
        _render_captures(scene, code, spp, ctx.obj["seed"])
    cmap = decode(caps, code)
    grid = triangulate(cmap, scene.camera.K, scene.projector.K,
                       scene.projector.R, scene.projector.t)
    mesh = mesh_from_depth(grid, scene.camera.K)
    os.makedirs(out_dir, exist_ok=True)
    imgio.write_pfm(os.path.join(out_dir, "depth.pfm"),
                    grid.depth.astype(np.float32))
    imgio.write_ply_ascii(os.path.join(out_dir, "cloud.ply"), grid.points)
    imgio.write_obj(os.path.join(out_dir, "mesh.obj"), mesh.vertices,
                    mesh.faces, mesh.normals, mesh.uvs)
    report.image_figure({"depth": grid.depth, "valid": grid.mask.astype(float)},
                        os.path.join(out_dir, "depth.png"), ncols=2)
    click.echo(f"reconstructed {len(mesh.vertices)} vertices -> {out_dir}")


@main.command("render")
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--spp", type=int, default=64, show_default=True)
@click.option("--depth", type=int, default=4, show_default=True)
@click.option("--no-clipping", is_flag=True, default=False)
@click.option("--denoise/--no-denoise", "use_denoise", default=False)
@click.pass_context
def cmd_render(ctx, scene_path, input_path, out_path, spp, depth, no_clipping,
               use_denoise):
    """Render the camera image for a projector input."""
    scene = load_scene(scene_path)
    img = render(scene, torch.as_tensor(_read_image(input_path)),
                 _settings_from(ctx.obj["config"], spp, depth,
                                ctx.obj["seed"], no_clipping))
    if use_denoise:
        img = denoise(img, render_aux(scene), DenoiseSettings())
    imgio.write_png(out_path, img.numpy())
    click.echo(f"rendered {out_path}")


def _load_pairs(data_dir: str, sub: str):
    inputs = sorted(glob.glob(os.path.join(data_dir, sub, "input_*.png")))
    targets = sorted(glob.glob(os.path.join(data_dir, sub, "target_*.png")))
    if not inputs or len(inputs) != len(targets):
        raise ValidationError(f"no matching input/target pairs in "
                              f"{os.path.join(data_dir, sub)}")
    return ([imgio.read_png(p) for p in inputs],
            [imgio.read_png(p) for p in targets])


@main.command("train")
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="directory with train/ (and optionally test/) pairs")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--iterations", type=int, default=200, show_default=True)
@click.option("--spp", type=int, default=16, show_default=True)
@click.option("--depth", type=int, default=4, show_default=True)
@click.option("--lambda-reg", type=float, default=1e-2, show_default=True)
@click.option("--no-denoise", is_flag=True, default=False)
@click.pass_context
def cmd_train(ctx, scene_path, data_dir, out_dir, iterations, spp, depth,
              lambda_reg, no_denoise):
    """Fit scene parameters to projector-input/camera-capture pairs."""
    from .optimize import TrainConfig, relight, train

    scene = load_scene(scene_path)
    inputs, targets = _load_pairs(data_dir, "train")
    cfg = TrainConfig(iterations=iterations, spp=spp, max_depth=depth,
                      lambda_reg=lambda_reg, seed=ctx.obj["seed"],
                      denoise=DenoiseSettings(enabled=not no_denoise))
    _, history = train(scene, inputs, targets, cfg)
    os.makedirs(out_dir, exist_ok=True)
    save_scene(scene, os.path.join(out_dir, "scene.json"))
    with open(os.path.join(out_dir, "loss.csv"), "w") as f:
        f.write("iter,loss_pixel,loss_tv,loss_total\n")
        for row in history:
            f.write(f"{row['iter']},{row['loss_pixel']:.8g},"
                    f"{row['loss_tv']:.8g},{row['loss_total']:.8g}\n")
    report.loss_figure(history, os.path.join(out_dir, "loss.png"))

    test_dir = os.path.join(data_dir, "test")
    if os.path.isdir(test_dir):
        t_in, t_gt = _load_pairs(data_dir, "test")
        rep = MetricsReport()
        st = RenderSettings(spp=max(spp, 64), max_depth=depth,
                            seed=ctx.obj["seed"] + 1)
        for i, (ip, gt) in enumerate(zip(t_in, t_gt)):
            img = relight(scene, ip, st).numpy()
            rep.add(f"test_{i:03d}", img, gt)
        rep.write_csv(os.path.join(out_dir, "metrics.csv"))
        report.metrics_figure(rep, os.path.join(out_dir, "metrics.png"))
    click.echo(f"trained parameters written to {out_dir} "
               f"(final loss {history[-1]['loss_total']:.5g})")


@main.command("relight")
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--reference", type=click.Path(exists=True), default=None)
@click.option("--spp", type=int, default=64, show_default=True)
@click.option("--depth", type=int, default=4, show_default=True)
@click.option("--denoise/--no-denoise", "use_denoise", default=True)
@click.pass_context
def cmd_relight(ctx, scene_path, input_path, out_path, reference, spp, depth,
                use_denoise):
    """Render a novel projector input with trained parameters."""
    from .optimize import relight

    scene = load_scene(scene_path)
    st = _settings_from(ctx.obj["config"], spp, depth, ctx.obj["seed"])
    img = relight(scene, _read_image(input_path), st,
                  DenoiseSettings(enabled=use_denoise)).numpy()
    imgio.write_png(out_path, img)
    if reference:
        rep = MetricsReport()
        rep.add("relight", img, _read_image(reference))
        base = os.path.splitext(out_path)[0]
        rep.write_csv(base + "_metrics.csv")
        report.metrics_figure(rep, base + "_metrics.png")
    click.echo(f"relit {out_path}")


@main.command("compensate")
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--target", "target_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--iterations", type=int, default=100, show_default=True)
@click.option("--lr", type=float, default=5e-2, show_default=True)
@click.option("--spp", type=int, default=8, show_default=True)
@click.option("--depth", type=int, default=2, show_default=True)
@click.pass_context
def cmd_compensate(ctx, scene_path, target_path, out_dir, iterations, lr,
                   spp, depth):
    """Solve for the projector input whose render matches the target."""
    from .optimize import compensate

    scene = load_scene(scene_path)
    target = _read_image(target_path)
    st = _settings_from(ctx.obj["config"], spp, depth, ctx.obj["seed"])
    I_p, rendered, history = compensate(scene, target, iterations=iterations,
                                        lr=lr, settings=st)
    os.makedirs(out_dir, exist_ok=True)
    imgio.write_png(os.path.join(out_dir, "input.png"), I_p.numpy())
    imgio.write_png(os.path.join(out_dir, "render.png"), rendered.numpy())
    report.loss_figure(history, os.path.join(out_dir, "loss.png"))
    rep = MetricsReport()
    rep.add("compensation", rendered.numpy(), target)
    rep.write_csv(os.path.join(out_dir, "metrics.csv"))
    report.metrics_figure(rep, os.path.join(out_dir, "metrics.png"))
    click.echo(f"compensation written to {out_dir} "
               f"(PSNR {rep.rows[0].psnr:.2f} dB)")


@main.command("fd-check")
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--spp", type=int, default=256, show_default=True)
@click.option("--h", "step", type=float, default=1e-3, show_default=True)
@click.pass_context
def cmd_fd_check(ctx, scene_path, input_path, out_dir, spp, step):
    """AD-vs-finite-difference gradient report for the stock parameters."""
    scene = load_scene(scene_path)
    wp, hp = scene.projector.resolution
    I_p = torch.as_tensor(_read_image(input_path)) if input_path else \
        torch.full((hp, wp, 3), 0.7)
    st = RenderSettings(spp=spp, max_depth=2, seed=ctx.obj["seed"])
    res = scene.params.values()["base_color"].shape[0]
    selectors = [("gamma_p", 0), ("gamma_c", 1), ("white_balance", 2),
                 ("base_color", (res // 2, res // 2, 0)),
                 ("roughness", (res // 2, res // 2)),
                 ("input", (hp // 2, wp // 2, 0))]
    rows = fd_check(scene, I_p, st, selectors, h=step)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "fd_check.txt"), "w") as f:
        for r in rows:
            line = (f"{r['param']}{r['index']}: ad={r['ad']:.8g} "
                    f"fd={r['fd']:.8g} rel_err={r['rel_err']:.3e}")
            f.write(line + "\n")
            click.echo(line)
    report.fd_figure(rows, os.path.join(out_dir, "fd_check.png"))


@main.command("metrics")
@click.option("--pairs", nargs=2, multiple=True, required=True,
              metavar="IMG_A IMG_B")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_metrics(pairs, out_dir):
    """PSNR/SSIM/L1/RGB-distance for image pairs, as CSV plus a figure."""
    rep = MetricsReport()
    for a_path, b_path in pairs:
        rep.add(os.path.basename(a_path), _read_image(a_path),
                _read_image(b_path))
    rep.write_csv(os.path.join(out_dir, "metrics.csv"))
    report.metrics_figure(rep, os.path.join(out_dir, "metrics.png"))
    agg = rep.aggregate()
    click.echo(f"mean PSNR {agg.psnr:.2f} dB, SSIM {agg.ssim:.4f}, "
               f"L1 {agg.l1:.5f}")


def entry() -> None:
    """Console entry point with the documented exit-code mapping."""
    try:
        main(standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except NumericalError as e:
        click.echo(f"numerical failure: {e}", err=True)
        sys.exit(3)
    except ValidationError as e:
        click.echo(f"validation error: {e}", err=True)
        sys.exit(2)
    except ProcamsimError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    entry()
