"""Pipeline orchestration: decompose, ground, assign, plan, optimize, export.

A run is fully persisted into its output directory: client transcripts,
the validated decomposition/boxes/plan, a JSONL loss log, parameter
checkpoints every 50 steps, the final trajectory, and the exported
animation. replay() re-runs the optimization from those artifacts with
no network clients, optionally overriding optimizer or ablation fields.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import guidance as gd
from . import raster
from .autodiff import (
    Adam,
    clip_grad_norm,
    derive_seed,
    global_grad_norm,
    save_checkpoint,
)
from .clients import (
    FixtureGroundingClient,
    FixturePlannerClient,
    HttpGroundingClient,
    HttpPlannerClient,
)
from .errors import (
    PipelineStageError,
    ReplayError,
    StepError,
    ValidationError,
)
from .planning import MotionPlan, gather_coarse_motion, load_plan, plan_motion, save_plan
from .refine import RefineNet, RefineNetConfig
from .scene import (
    BoundingBox,
    DecompositionResult,
    PointAssignment,
    SubInstruction,
    assign_points,
    decompose_scene,
    ground_objects,
)
from .sketch import Trajectory, VectorSketch, export_animation, load_svg, write_svg

CHECKPOINT_EVERY = 50
PROVIDERS = ("analytic:target", "analytic:bbox", "sidecar")
# fields replay() may override: optimizer settings and ablation switches
REPLAY_OVERRIDES = frozenset({
    "steps", "lr", "weight_decay", "clip_norm", "seed",
    "no_coarse", "no_object_refine", "no_point_refine",
    "not_object_aware", "no_csds",
})


@dataclass
class RunConfig:
    steps: int = 500
    lr: float = 5e-3
    weight_decay: float = 1e-2
    f: int = 16
    d: int = 128
    layers: int = 2
    heads: int = 8
    canvas: tuple[float, float] = (256.0, 256.0)
    raster_hw: tuple[int, int] = (256, 256)
    sigma: float | None = None
    margin: float = 0.1
    provider: str = "analytic:target"
    sidecar_url: str = "http://127.0.0.1:8000"
    clip_norm: float | None = 1.0
    term_weights: list[float] | None = None
    no_coarse: bool = False
    no_object_refine: bool = False
    no_point_refine: bool = False
    not_object_aware: bool = False
    no_csds: bool = False
    seed: int = 0
    export_format: str = "gif"
    fps: int = 10

    def __post_init__(self):
        self.canvas = (float(self.canvas[0]), float(self.canvas[1]))
        self.raster_hw = (int(self.raster_hw[0]), int(self.raster_hw[1]))
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.provider not in PROVIDERS:
            raise ValidationError(
                f"unknown provider {self.provider!r}; choose from {PROVIDERS}")
        if self.f < 2:
            raise ValidationError(f"need at least 2 frames, got {self.f}")

    def to_json(self) -> dict:
        out = asdict(self)
        out["canvas"] = list(self.canvas)
        out["raster_hw"] = list(self.raster_hw)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path: str | Path) -> "RunConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_json(tomllib.load(fh))


@dataclass
class RunRecord:
    run_dir: Path
    config: RunConfig
    instruction: str
    completed_steps: int = 0
    skipped_steps: list[int] = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None
    wall_time_s: float = 0.0
    trajectory_path: Path | None = None
    checkpoint_paths: list[Path] = field(default_factory=list)
    export_paths: list[Path] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "instruction": self.instruction,
            "completed_steps": self.completed_steps,
            "skipped_steps": self.skipped_steps,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "wall_time_s": self.wall_time_s,
            "trajectory": _rel(self.trajectory_path, self.run_dir),
            "checkpoints": [_rel(p, self.run_dir) for p in self.checkpoint_paths],
            "exports": [_rel(p, self.run_dir) for p in self.export_paths],
        }


def _rel(p: Path | None, root: Path) -> str | None:
    return None if p is None else str(Path(p).relative_to(root))


def _write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")


def sketch_png_bytes(sketch: VectorSketch, hw: tuple[int, int] = (256, 256),
                     sigma: float | None = None) -> bytes:
    """The static sketch as an 8-bit grayscale PNG (ink on white)."""
    from PIL import Image

    H, W = hw
    if sigma is None:
        sigma = raster.default_sigma(H, W)
    ink = raster.rasterize_f64(sketch.points, sketch.canvas, H, W, sigma)
    gray = np.clip(np.round(255.0 * (1.0 - ink)), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return buf.getvalue()


class _RecordingPlanner:
    """Wraps a planner, keeping {template_id: {request, response}}."""

    def __init__(self, inner):
        self.inner = inner
        self.transcripts: dict[str, dict] = {}

    def complete(self, request: dict) -> dict:
        response = self.inner.complete(request)
        slim = dict(request)
        if "image" in slim:
            digest = hashlib.sha256(slim["image"].encode()).hexdigest()[:16]
            slim["image"] = f"<base64 png, sha256 {digest}>"
        self.transcripts[request["template_id"]] = {
            "request": slim, "response": response}
        return response


class _RecordingGrounder:
    def __init__(self, inner):
        self.inner = inner
        self.transcript: dict | None = None

    def detect(self, request: dict) -> dict:
        response = self.inner.detect(request)
        slim = dict(request)
        if "image" in slim:
            digest = hashlib.sha256(slim["image"].encode()).hexdigest()[:16]
            slim["image"] = f"<base64 png, sha256 {digest}>"
        self.transcript = {"request": slim, "response": response}
        return response


def fixture_clients(fixture_dir: str | Path):
    return FixturePlannerClient(fixture_dir), FixtureGroundingClient(fixture_dir)


def http_clients(planner_url: str, grounder_url: str,
                 api_key: str | None = None):
    return HttpPlannerClient(planner_url, api_key), HttpGroundingClient(grounder_url)


def build_provider(config: RunConfig, sketch: VectorSketch,
                   assignment: PointAssignment, plan: MotionPlan,
                   dz_coarse: np.ndarray) -> gd.GuidanceProvider:
    if config.provider == "analytic:target":
        return gd.TrajectoryTargetOracle(dz_coarse.astype(np.float64))
    if config.provider == "analytic:bbox":
        return gd.BboxFollowOracle(sketch, assignment, plan)
    provider = gd.SidecarProvider(config.sidecar_url)
    provider.health()
    return provider


def _fail(run_dir: Path, record: RunRecord, stage: str, exc: Exception):
    _write_json(run_dir / "record.json", {
        "status": "failed", "stage": stage,
        "error": f"{type(exc).__name__}: {exc}", **record.to_json()})
    raise PipelineStageError(stage, exc) from exc


def animate(sketch: VectorSketch | str | Path, instruction: str,
            config: RunConfig, out_dir: str | Path,
            planner=None, grounder=None) -> RunRecord:
    """Run the full pipeline and persist every artifact under out_dir."""
    if planner is None or grounder is None:
        raise ValidationError("animate needs both a planner and a grounding client")
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(sketch, VectorSketch):
        sketch = load_svg(sketch)
    if tuple(sketch.canvas) != tuple(config.canvas):
        config = replace(config, canvas=tuple(sketch.canvas))
    (run_dir / "sketch.svg").write_bytes(write_svg(sketch))
    _write_json(run_dir / "config.json", config.to_json())
    record = RunRecord(run_dir, config, instruction)
    started = time.perf_counter()

    planner = _RecordingPlanner(planner)
    grounder = _RecordingGrounder(grounder)
    image_png = sketch_png_bytes(sketch)

    try:
        decomp, _ = decompose_scene(image_png, instruction, planner, config.canvas)
    except Exception as e:
        _fail(run_dir, record, "decompose", e)
    for template_id, transcript in planner.transcripts.items():
        _write_json(run_dir / "transcripts" / f"{template_id}.json", transcript)
    _write_json(run_dir / "decomposition.json", {
        "instruction": instruction,
        "objects": list(decomp.objects),
        "sub_instructions": [
            {"text": s.text, "object_indices": list(s.object_indices)}
            for s in decomp.sub_instructions],
    })

    try:
        b0 = ground_objects(sketch, image_png, decomp.objects, grounder)
    except Exception as e:
        _fail(run_dir, record, "ground", e)
    if grounder.transcript is not None:
        _write_json(run_dir / "transcripts" / "grounding.json", grounder.transcript)
    _write_json(run_dir / "boxes.json",
                [[b.x, b.y, b.w, b.h] for b in b0])

    try:
        assignment = assign_points(sketch, b0)
    except Exception as e:
        _fail(run_dir, record, "assign", e)
    _write_json(run_dir / "assignment.json", assignment.owner.tolist())

    try:
        plan, _ = plan_motion(image_png, instruction, b0, decomp.objects,
                              planner, config.f, config.canvas)
    except Exception as e:
        _fail(run_dir, record, "plan", e)
    for template_id, transcript in planner.transcripts.items():
        _write_json(run_dir / "transcripts" / f"{template_id}.json", transcript)
    save_plan(plan, run_dir / "plan.json")

    return _optimize_and_export(sketch, instruction, decomp, assignment, plan,
                                config, record, started)


def replay(run_dir: str | Path, overrides: dict | None = None,
           out_dir: str | Path | None = None) -> RunRecord:
    """Re-run the optimization from persisted artifacts, clients not needed."""
    run_dir = Path(run_dir)
    needed = ["config.json", "sketch.svg", "decomposition.json",
              "boxes.json", "assignment.json", "plan.json"]
    missing = [name for name in needed if not (run_dir / name).exists()]
    if missing:
        raise ReplayError(f"run directory {run_dir} is missing: {missing}")
    overrides = dict(overrides or {})
    bad = set(overrides) - REPLAY_OVERRIDES
    if bad:
        raise ValidationError(
            f"replay can only override {sorted(REPLAY_OVERRIDES)}; got {sorted(bad)}")

    config = RunConfig.from_json(json.loads((run_dir / "config.json").read_text()))
    config = replace(config, **overrides)
    sketch = load_svg(run_dir / "sketch.svg")
    meta = json.loads((run_dir / "decomposition.json").read_text())
    decomp = DecompositionResult(
        tuple(meta["objects"]),
        tuple(SubInstruction(s["text"], tuple(s["object_indices"]))
              for s in meta["sub_instructions"]))
    owner = np.array(json.loads((run_dir / "assignment.json").read_text()),
                     dtype=np.intp)
    assignment = PointAssignment(owner)
    plan = load_plan(run_dir / "plan.json")

    out = Path(out_dir) if out_dir is not None else run_dir / "replay"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sketch.svg").write_bytes(write_svg(sketch))
    _write_json(out / "config.json", config.to_json())
    _write_json(out / "decomposition.json", meta)
    _write_json(out / "boxes.json", json.loads((run_dir / "boxes.json").read_text()))
    _write_json(out / "assignment.json", owner.tolist())
    save_plan(plan, out / "plan.json")
    record = RunRecord(out, config, meta["instruction"])
    return _optimize_and_export(sketch, meta["instruction"], decomp, assignment,
                                plan, config, record, time.perf_counter())


def _optimize_and_export(sketch: VectorSketch, instruction: str,
                         decomp: DecompositionResult,
                         assignment: PointAssignment, plan: MotionPlan,
                         config: RunConfig, record: RunRecord,
                         started: float) -> RunRecord:
    run_dir = record.run_dir
    if config.no_coarse and config.no_object_refine and config.no_point_refine:
        _fail(run_dir, record, "optimize",
              ValidationError("nothing to optimize: coarse motion and both "
                              "refinement terms are all disabled"))

    try:
        dz_c = gather_coarse_motion(assignment, sketch, plan)
    except Exception as e:
        _fail(run_dir, record, "gather", e)
    dz_c_arr = dz_c.displacements

    try:
        net_config = RefineNetConfig(d=config.d, f=config.f,
                                     layers=config.layers, heads=config.heads,
                                     seed=config.seed)
        model = RefineNet(net_config, decomp.m, config.canvas,
                          object_aware=not config.not_object_aware)
        params = model.parameters()
        opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
        provider = build_provider(config, sketch, assignment, plan, dz_c_arr)
        if config.no_csds:
            sub_prompts = []
        else:
            sub_prompts = [
                (s.text, gd.subset_for_instruction(assignment, s.object_indices))
                for s in decomp.sub_instructions]

        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        flags = dict(no_coarse=config.no_coarse,
                     no_object_refine=config.no_object_refine,
                     no_point_refine=config.no_point_refine)

        with open(run_dir / "losses.jsonl", "w") as log:
            for step in range(config.steps):
                for p in params:
                    p.grad = None
                out = model.forward(sketch, plan, assignment, dz_c_arr, **flags)
                entry = {
                    "step": step,
                    "dz_c_max": float(np.abs(out["dz_c"]).max(initial=0.0)),
                    "dz_o_max": float(np.abs(out["dz_o"].data).max(initial=0.0)),
                    "dz_p_max": float(np.abs(out["dz_p"].data).max(initial=0.0)),
                }
                try:
                    comp = gd.compositional_loss(
                        out["dz"], sketch, instruction, sub_prompts, provider,
                        hw=config.raster_hw, sigma=config.sigma,
                        margin=config.margin, seed=config.seed, step=step,
                        weights=config.term_weights)
                    comp.carrier.backward()
                except StepError as e:
                    record.skipped_steps.append(step)
                    entry.update(skipped=True, error=str(e))
                    log.write(json.dumps(entry) + "\n")
                    record.completed_steps = step + 1
                    continue
                norm = global_grad_norm(params)
                if config.clip_norm is not None:
                    clip_grad_norm(params, config.clip_norm)
                opt.step()
                entry.update(
                    total=comp.total_loss,
                    terms=[{"name": t.name, "loss": t.loss, "weight": t.weight,
                            "grad_max_abs": t.grad_max_abs} for t in comp.terms],
                    grad_norm=norm, skipped=False)
                log.write(json.dumps(entry) + "\n")
                if record.initial_loss is None:
                    record.initial_loss = comp.total_loss
                record.final_loss = comp.total_loss
                record.completed_steps = step + 1
                if (step + 1) % CHECKPOINT_EVERY == 0:
                    path = ckpt_dir / f"step_{step + 1:05d}.ckpt"
                    save_checkpoint(path, model.state_arrays())
                    record.checkpoint_paths.append(path)

        final_ckpt = ckpt_dir / "final.ckpt"
        save_checkpoint(final_ckpt, model.state_arrays())
        record.checkpoint_paths.append(final_ckpt)
        final = model.forward(sketch, plan, assignment, dz_c_arr, **flags)
        trajectory = Trajectory(final["dz"].data)
    except PipelineStageError:
        raise
    except Exception as e:
        _fail(run_dir, record, "optimize", e)

    try:
        traj_path = run_dir / "trajectory.npy"
        np.save(traj_path, trajectory.displacements)
        record.trajectory_path = traj_path
        record.export_paths = export_animation(
            sketch, trajectory, config.export_format, run_dir / "export",
            fps=config.fps, sigma=config.sigma)
    except Exception as e:
        _fail(run_dir, record, "export", e)

    record.wall_time_s = time.perf_counter() - started
    _write_json(run_dir / "record.json",
                {"status": "ok", "stage": "done", **record.to_json()})
    return record


def animate_batch(jobs: list[tuple[VectorSketch | str | Path, str]],
                  config: RunConfig, out_root: str | Path,
                  planner=None, grounder=None,
                  max_workers: int = 4) -> list[RunRecord]:
    """Run several sketches in worker threads, one derived seed per job."""
    out_root = Path(out_root)

    def one(index: int, job) -> RunRecord:
        sketch, instruction = job
        cfg = replace(config, seed=int(derive_seed(config.seed, index)))
        return animate(sketch, instruction, cfg, out_root / f"run_{index:03d}",
                       planner=planner, grounder=grounder)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(one, i, job) for i, job in enumerate(jobs)]
        return [f.result() for f in futures]
