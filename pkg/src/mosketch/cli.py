"""Command line interface.

Exit codes: 0 success, 2 validation problem, 3 client (planner, grounder
or sidecar) failure, 4 numerical failure.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import animator
from .animator import RunConfig, animate, fixture_clients, http_clients, sketch_png_bytes
from .errors import MosketchError, ValidationError
from .planning import plan_motion, save_plan
from .scene import assign_points, decompose_scene, ground_objects
from .sketch import Trajectory, export_animation, load_svg

PLANNER_URL_ENV = "MOSKETCH_PLANNER_URL"
GROUNDER_URL_ENV = "MOSKETCH_GROUNDER_URL"
SIDECAR_URL_ENV = "MOSKETCH_SIDECAR_URL"


def _exits(fn):
    """Map library errors onto the documented process exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MosketchError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def _clients(fixtures: str | None):
    if fixtures:
        return fixture_clients(fixtures)
    planner_url = os.environ.get(PLANNER_URL_ENV)
    grounder_url = os.environ.get(GROUNDER_URL_ENV)
    if not planner_url or not grounder_url:
        raise ValidationError(
            f"no clients configured: pass --fixtures or set "
            f"{PLANNER_URL_ENV} and {GROUNDER_URL_ENV}")
    return http_clients(planner_url, grounder_url)


def _ablation_options(fn):
    for name in ("no-coarse", "no-object-refine", "no-point-refine",
                 "not-object-aware", "no-csds"):
        fn = click.option(f"--{name}", is_flag=True, default=False)(fn)
    return fn


@click.group()
def cli():
    """Animate multi-object vector sketches from text instructions."""


@cli.command("animate")
@click.option("--sketch", "sketch_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--instruction", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--provider", type=click.Choice(animator.PROVIDERS))
@click.option("--fixtures", type=click.Path(exists=True, file_okay=False))
@_ablation_options
@click.option("--seed", type=int)
@click.option("--steps", type=int)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/latest")
@_exits
def animate_cmd(sketch_path, instruction, config_path, provider, fixtures,
                no_coarse, no_object_refine, no_point_refine,
                not_object_aware, no_csds, seed, steps, out_dir):
    """Full pipeline: decompose, ground, plan, optimize, export."""
    config = RunConfig.from_toml(config_path) if config_path else RunConfig()
    overrides = {}
    if provider:
        overrides["provider"] = provider
    if seed is not None:
        overrides["seed"] = seed
    if steps is not None:
        overrides["steps"] = steps
    for key, value in (("no_coarse", no_coarse),
                       ("no_object_refine", no_object_refine),
                       ("no_point_refine", no_point_refine),
                       ("not_object_aware", not_object_aware),
                       ("no_csds", no_csds)):
        if value:
            overrides[key] = True
    sidecar_url = os.environ.get(SIDECAR_URL_ENV)
    if sidecar_url:
        overrides["sidecar_url"] = sidecar_url
    config = replace(config, **overrides)

    planner, grounder = _clients(fixtures)
    record = animate(sketch_path, instruction, config, out_dir,
                     planner=planner, grounder=grounder)
    click.echo(f"run dir: {record.run_dir}")
    click.echo(f"steps: {record.completed_steps} "
               f"(skipped {len(record.skipped_steps)})")
    if record.initial_loss is not None:
        click.echo(f"loss: {record.initial_loss:.6g} -> {record.final_loss:.6g}")
    for p in record.export_paths[:1]:
        click.echo(f"export: {p}")


@cli.command()
@click.option("--sketch", "sketch_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--instruction", required=True)
@click.option("--fixtures", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@_exits
def decompose(sketch_path, instruction, fixtures, out_path):
    """Identify objects and split the instruction; print the result."""
    sketch = load_svg(sketch_path)
    planner, _ = _clients(fixtures)
    image_png = sketch_png_bytes(sketch)
    result, _ = decompose_scene(image_png, instruction, planner, sketch.canvas)
    payload = {
        "objects": list(result.objects),
        "sub_instructions": [
            {"text": s.text, "object_indices": list(s.object_indices)}
            for s in result.sub_instructions],
    }
    text = json.dumps(payload, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    click.echo(text)


@cli.command()
@click.option("--sketch", "sketch_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--instruction", required=True)
@click.option("--fixtures", type=click.Path(exists=True, file_okay=False))
@click.option("--frames", type=int, default=16, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@_exits
def plan(sketch_path, instruction, fixtures, frames, out_path):
    """Decompose, ground, and plan coarse box motion; print the plan."""
    sketch = load_svg(sketch_path)
    planner, grounder = _clients(fixtures)
    image_png = sketch_png_bytes(sketch)
    result, _ = decompose_scene(image_png, instruction, planner, sketch.canvas)
    b0 = ground_objects(sketch, image_png, result.objects, grounder)
    assign_points(sketch, b0)  # validates the sketch covers every object
    motion, _ = plan_motion(image_png, instruction, b0, result.objects,
                            planner, frames, sketch.canvas)
    if out_path:
        save_plan(motion, out_path)
    click.echo(json.dumps(motion.to_json(), indent=2))


@cli.command()
@click.option("--sketch", "sketch_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--trajectory", "traj_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", default="gif", show_default=True,
              type=click.Choice(["gif", "png-sequence", "svg-sequence"]))
@click.option("--fps", type=int, default=10, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_exits
def render(sketch_path, traj_path, fmt, fps, out_dir):
    """Export an animation from a saved trajectory (.npy, n x f x 2)."""
    sketch = load_svg(sketch_path)
    traj = Trajectory(np.load(traj_path))
    paths = export_animation(sketch, traj, fmt, out_dir, fps=fps)
    click.echo(f"wrote {len(paths)} file(s) to {out_dir}")


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@click.option("--steps", type=int)
@click.option("--lr", type=float)
@click.option("--weight-decay", type=float)
@click.option("--seed", type=int)
@_ablation_options
@_exits
def replay(run_dir, out_dir, steps, lr, weight_decay, seed,
           no_coarse, no_object_refine, no_point_refine,
           not_object_aware, no_csds):
    """Re-run the optimization of a persisted run, offline."""
    overrides = {}
    if steps is not None:
        overrides["steps"] = steps
    if lr is not None:
        overrides["lr"] = lr
    if weight_decay is not None:
        overrides["weight_decay"] = weight_decay
    if seed is not None:
        overrides["seed"] = seed
    for key, value in (("no_coarse", no_coarse),
                       ("no_object_refine", no_object_refine),
                       ("no_point_refine", no_point_refine),
                       ("not_object_aware", not_object_aware),
                       ("no_csds", no_csds)):
        if value:
            overrides[key] = True
    record = animator.replay(run_dir, overrides, out_dir)
    click.echo(f"run dir: {record.run_dir}")
    if record.initial_loss is not None:
        click.echo(f"loss: {record.initial_loss:.6g} -> {record.final_loss:.6g}")


def main():
    cli()


if __name__ == "__main__":
    main()
