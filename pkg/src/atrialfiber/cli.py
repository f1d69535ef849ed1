"""Command-line pipeline: genmesh -> eigenbasis -> simulate -> train -> select / eval, plus sweep and timing.

Every stage reads one JSON config (``--config``), applies flag overrides
(flags > file > defaults) and writes its artifacts with a ``stage.json``
manifest under ``<output_dir>/<stage>/``. A manifest can be passed back as
``--config`` to rerun that stage with the same settings.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .eikonal import EikonalError, GroundTruthField, generate_dataset, load_dataset, rule_based_fibers, save_dataset
from .evaluation import evaluate_ensemble, export_fields, run_sweep, timing_study, write_timing_csv
from .mesh import MeshError, TriangleSurfaceMesh, flat_sheet, holed_sphere, icosphere, load_mesh, write_off, write_vtk
from .nn import NumericalError
from .pinn import PinnProblem, TrainingConfig, init_ensemble, load_checkpoint, save_checkpoint, train
from .selection import select_field
from .spectral import EigenSolverError, compute_basis, load_basis, save_basis
from ._npz import write_npz

logger = logging.getLogger("atrialfiber")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SHAPES = ("flat_sheet", "icosphere", "holed_sphere")
FIBER_RULES = ("constant_angle", "circumferential")


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


@dataclass
class PipelineConfig:
    seed: int | None = None
    output_dir: str = "run"
    mesh_path: str | None = None
    mesh_format: str | None = None
    shape: str | None = None  # synthetic geometry when no mesh_path; flat_sheet if unset
    shape_size: float | None = None  # sheet side (cm) or sphere radius (cm)
    shape_resolution: int | None = None  # sheet cells per side or sphere subdivisions
    fiber_rule: str = "constant_angle"
    fiber_angle_deg: float = 30.0
    fiber_axis: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    v_l: float = 0.06
    v_t: float = 0.03
    n_maps: int = 3
    density: float = 16.0
    sigma: float = 0.0
    mode: str = "delta"
    training: dict = field(default_factory=dict)  # TrainingConfig overrides
    selection: str = "medoid"
    sweep_noise: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 4.0])
    sweep_density: list = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0])
    timing_sizes: list = field(default_factory=lambda: [1, 5, 10, 20])
    timing_iterations: int = 10_000

    def validate(self) -> None:
        if self.seed is None:
            raise UsageError("a seed is required: set \"seed\" in the config file or pass --seed")
        if self.mesh_path is not None and not Path(self.mesh_path).exists():
            raise UsageError(f"mesh_path {self.mesh_path!r} does not exist")
        if self.shape is not None and self.shape not in SHAPES:
            raise UsageError(f"shape must be one of {SHAPES}")
        if self.fiber_rule not in FIBER_RULES:
            raise UsageError(f"fiber_rule must be one of {FIBER_RULES}")
        if self.selection not in ("medoid", "mean_tensor"):
            raise UsageError("selection must be 'medoid' or 'mean_tensor'")
        if self.n_maps < 1 or self.density <= 0 or self.sigma < 0:
            raise UsageError("need n_maps >= 1, density > 0, sigma >= 0")
        if self.v_l <= 0 or self.v_t <= 0:
            raise UsageError("speeds must be positive")
        try:
            self.training_config()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid training settings: {exc}") from None

    def training_config(self) -> TrainingConfig:
        base = TrainingConfig.delta_fibernet if self.mode == "delta" else TrainingConfig.fibernet
        if self.mode not in ("delta", "fibernet"):
            raise ValueError(f"mode must be 'delta' or 'fibernet', got {self.mode!r}")
        extra = dict(self.training)
        for k in ("mode", "seed"):
            if k in extra:
                raise ValueError(f"set {k!r} at the top level, not under training")
        return base(seed=int(self.seed), **extra)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if isinstance(d, dict) and "stage" in d and "config" in d:  # a stage manifest
        d = d["config"]
    if not isinstance(d, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return d


# flag name -> config key
FLAG_KEYS = {
    "seed": "seed",
    "out": "output_dir",
    "mesh": "mesh_path",
    "mesh_format": "mesh_format",
    "shape": "shape",
    "shape_size": "shape_size",
    "resolution": "shape_resolution",
    "fiber_rule": "fiber_rule",
    "fiber_angle": "fiber_angle_deg",
    "n_maps": "n_maps",
    "density": "density",
    "sigma": "sigma",
    "mode": "mode",
    "selection": "selection",
    "iterations": "training.iterations",
    "ensemble_size": "training.ensemble_size",
}


def resolve_config(args) -> tuple[PipelineConfig, dict]:
    """Merge defaults, the config file and flags; returns the config and each key's source."""
    values: dict = {}
    sources: dict = {}

    def put(key, value, source):
        if key.startswith("training."):
            values.setdefault("training", {})[key.split(".", 1)[1]] = value
        else:
            values[key] = value
        sources[key] = source

    if args.config:
        for k, v in load_config_file(args.config).items():
            if k == "training" and isinstance(v, dict):
                for tk, tv in v.items():
                    put(f"training.{tk}", tv, f"config file {args.config}")
            else:
                put(k, v, f"config file {args.config}")

    flag_values = {}
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            flag_values[key] = (v, f"--{flag.replace('_', '-')}")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        v = _parse_value(raw)
        if key in flag_values and flag_values[key][0] != v:
            raise UsageError(f"conflicting values for {key!r}: {flag_values[key][0]!r} from "
                             f"{flag_values[key][1]} and {v!r} from --set {item}")
        flag_values[key] = (v, f"--set {item}")
    for key, (v, src) in flag_values.items():
        put(key, v, src)

    # an explicit mesh file and an explicit synthetic shape cannot both be requested
    if values.get("mesh_path") is not None and values.get("shape") is not None:
        raise UsageError(f"mesh_path (from {sources['mesh_path']}) conflicts with shape "
                         f"(from {sources['shape']}); give only one")

    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    try:
        cfg = PipelineConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    cfg.validate()
    return cfg, sources


# ----------------------------------------------------------------------------
# artifacts
# ----------------------------------------------------------------------------
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {"atrialfiber": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(stage_dir: Path, stage: str, cfg: PipelineConfig, inputs: list, outputs: list) -> None:
    root = Path(cfg.output_dir)

    def rel(p):
        p = Path(p)
        try:
            return str(p.relative_to(root))
        except ValueError:
            return str(p)

    manifest = {
        "stage": stage,
        "config": cfg.to_dict(),
        "inputs": {rel(p): sha256_file(p) for p in inputs},
        "outputs": {rel(p): sha256_file(p) for p in outputs},
        "versions": _versions(),
    }
    (stage_dir / "stage.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class Paths:
    def __init__(self, cfg: PipelineConfig):
        r = Path(cfg.output_dir)
        self.root = r
        self.mesh = r / "mesh" / "mesh.off"
        self.basis = r / "eigen" / "basis.npz"
        self.data = r / "data"
        self.checkpoint = r / "train" / "checkpoint.npz"
        self.eval = r / "eval"

    def stage(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d


def _require(path: Path, command: str, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what} ({path}): run `atrialfiber {command}` first")
    return path


def _load_mesh(paths: Paths) -> TriangleSurfaceMesh:
    return load_mesh(_require(paths.mesh, "genmesh", "mesh"), "off")


def _load_basis(paths: Paths, mesh, cfg) -> object:
    if cfg.mode != "delta":
        return None
    return load_basis(_require(paths.basis, "eigenbasis", "eigenbasis"), mesh)


def _load_data(paths: Paths, mesh):
    _require(paths.data / "manifest.json", "simulate", "activation data")
    ds, truth = load_dataset(paths.data)
    if ds.mesh_hash != mesh.content_hash:
        raise MeshError(f"{paths.data} was simulated on a different mesh; rerun `atrialfiber simulate`")
    gt = GroundTruthField(fibers=truth["fibers"], v_l=truth["v_l"], v_t=truth["v_t"],
                          normals=mesh.vertex_normals, flagged=truth["flagged"])
    return ds, gt


def _ground_truth(cfg: PipelineConfig, mesh) -> GroundTruthField:
    return rule_based_fibers(mesh, cfg.fiber_rule, theta=np.radians(cfg.fiber_angle_deg), axis=cfg.fiber_axis,
                             v_l=cfg.v_l, v_t=cfg.v_t)


def _progress(total):
    t0 = time.perf_counter()

    def report(rec):
        print(f"iter {rec['iteration']}/{total}  data={rec['data']:.3e} eiko={rec['eiko']:.3e} "
              f"cv={rec['cv']:.3e} ang={rec['ang']:.3e}  {time.perf_counter() - t0:.1f}s",
              file=sys.stderr, flush=True)
    return report


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------
def cmd_genmesh(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    if cfg.mesh_path is not None:
        mesh = load_mesh(cfg.mesh_path, cfg.mesh_format)
        inputs = [Path(cfg.mesh_path)]
    else:
        inputs = []
        if cfg.shape in (None, "flat_sheet"):
            mesh = flat_sheet(cfg.shape_size or 10.0, nx=cfg.shape_resolution or 50)
        elif cfg.shape == "icosphere":
            mesh = icosphere(cfg.shape_resolution if cfg.shape_resolution is not None else 4, cfg.shape_size or 1.0)
        else:
            mesh = holed_sphere(cfg.shape_resolution if cfg.shape_resolution is not None else 4, cfg.shape_size)
    d = paths.stage("mesh")
    write_off(paths.mesh, mesh)
    write_manifest(d, "genmesh", cfg, inputs, [paths.mesh])
    logger.info("mesh: %d vertices, %d triangles", mesh.n_vertices, mesh.n_triangles)


def cmd_eigenbasis(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    mesh = _load_mesh(paths)
    basis = compute_basis(mesh, cfg.training_config().n_eigen)
    d = paths.stage("eigen")
    save_basis(paths.basis, basis)
    write_manifest(d, "eigenbasis", cfg, [paths.mesh], [paths.basis])


def cmd_simulate(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    mesh = _load_mesh(paths)
    gt = _ground_truth(cfg, mesh)
    ds = generate_dataset(mesh, gt, n_maps=cfg.n_maps, density=cfg.density, sigma=cfg.sigma, seed=cfg.seed)
    d = paths.stage("data")
    save_dataset(d, ds, gt)
    outs = sorted(p for p in d.iterdir() if p.name != "stage.json")
    write_manifest(d, "simulate", cfg, [paths.mesh], outs)


def _problem(cfg, paths):
    mesh = _load_mesh(paths)
    basis = _load_basis(paths, mesh, cfg)
    ds, gt = _load_data(paths, mesh)
    return PinnProblem(mesh, ds, cfg.mode, basis), gt


def _upstream(cfg, paths) -> list:
    ins = [paths.mesh, paths.data / "manifest.json"]
    if cfg.mode == "delta":
        ins.append(paths.basis)
    return ins


def cmd_train(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    problem, _ = _problem(cfg, paths)
    tcfg = cfg.training_config()
    state = init_ensemble(problem, tcfg)
    d = paths.stage("train")
    t0 = time.perf_counter()
    train(state, problem, progress=_progress(tcfg.iterations), workers=args.workers)
    elapsed = time.perf_counter() - t0
    save_checkpoint(paths.checkpoint, state)
    history = d / "loss_history.csv"
    with open(history, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "data", "eiko", "cv", "ang", "total"])
        w.writeheader()
        for rec in state.history:
            w.writerow({k: repr(v) for k, v in rec.items()})
    (d / "timings.json").write_text(json.dumps({"train_seconds": elapsed}, indent=2) + "\n")
    write_manifest(d, "train", cfg, _upstream(cfg, paths), [paths.checkpoint, history])


def _trained(cfg, paths):
    _require(paths.checkpoint, "train", "checkpoint")
    problem, gt = _problem(cfg, paths)
    state = load_checkpoint(paths.checkpoint, problem)
    if state.config.digest() != cfg.training_config().digest():
        raise UsageError(f"{paths.checkpoint} was trained with different settings; rerun `atrialfiber train`")
    return problem, gt, state


def cmd_select(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    if not paths.checkpoint.exists():
        raise MissingArtifact(f"no checkpoint at {paths.checkpoint}: run train first")
    problem, _, state = _trained(cfg, paths)
    res = select_field(state, problem, cfg.selection)
    d = paths.stage("select")
    out = d / f"selection_{cfg.selection}.npz"
    write_npz(out, {"fibers": res.fibers, "speeds_sq": res.speeds_sq, "disparity": res.disparity,
                    "isotropic": res.isotropic})
    vtk = d / f"selection_{cfg.selection}.vtk"
    write_vtk(vtk, problem.mesh, scalars={"disparity_deg": np.degrees(res.disparity)},
              vectors={"fiber": res.fibers})
    write_manifest(d, "select", cfg, [paths.checkpoint, *_upstream(cfg, paths)], [out, vtk])


def cmd_eval(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    if not paths.checkpoint.exists():
        raise MissingArtifact(f"no checkpoint at {paths.checkpoint}: run train first")
    problem, gt, state = _trained(cfg, paths)
    result = evaluate_ensemble(state, problem, gt, config=cfg.to_dict())
    d = paths.stage("eval")
    report = d / "report.json"
    result.report.to_json(report)
    vtk = d / "fields.vtk"
    export_fields(vtk, problem.mesh, result, gt, include_members=args.members)
    # wall-clock numbers vary run to run, so they stay out of the hashed report
    tfile = paths.root / "train" / "timings.json"
    timings = json.loads(tfile.read_text()) if tfile.exists() else {}
    (d / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    write_manifest(d, "eval", cfg, [paths.checkpoint, *_upstream(cfg, paths)], [report, vtk])
    r = result.report
    print(f"FE medoid {r.fe_medoid:.2f} deg, mean tensor {r.fe_mean_tensor:.2f} deg, "
          f"ensemble mean {r.fe_ensemble_mean:.2f} deg (range {r.fe_range[0]:.2f}-{r.fe_range[1]:.2f})")


def cmd_sweep(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    mesh = _load_mesh(paths)
    basis = _load_basis(paths, mesh, cfg)
    gt = _ground_truth(cfg, mesh)
    d = paths.stage("sweep")

    def progress(i, j, rec):
        msg = f"cell sigma={rec['sigma']} density={rec['density']}: {rec['status']}"
        if rec["status"] == "ok":
            msg += f" FE medoid {rec['metrics']['fe_medoid']:.2f} deg"
        print(msg, file=sys.stderr, flush=True)

    run_sweep(mesh, gt, cfg.sweep_noise, cfg.sweep_density, cfg.training_config(), d, n_maps=cfg.n_maps,
              basis=basis, seed=cfg.seed, progress=progress)
    outs = sorted(d.glob("*.csv"))
    write_manifest(d, "sweep", cfg, [p for p in (paths.mesh, paths.basis) if p.exists()], outs)


def cmd_timing(cfg: PipelineConfig, args) -> None:
    paths = Paths(cfg)
    problem, _ = _problem(cfg, paths)
    rows = timing_study(problem, cfg.training_config(), cfg.timing_sizes, cfg.timing_iterations,
                        workers=args.workers)
    d = paths.stage("timing")
    write_timing_csv(d / "timing.csv", rows)
    write_manifest(d, "timing", cfg, _upstream(cfg, paths), [])


COMMANDS = {
    "genmesh": (cmd_genmesh, "build or import the surface mesh"),
    "eigenbasis": (cmd_eigenbasis, "Laplace-Beltrami eigenfunctions of the mesh"),
    "simulate": (cmd_simulate, "ground-truth fibers and sampled activation maps"),
    "train": (cmd_train, "train the network ensemble"),
    "select": (cmd_select, "collapse the ensemble to one fiber field"),
    "eval": (cmd_eval, "error report and VTK export"),
    "sweep": (cmd_sweep, "noise x density grid of train+eval runs"),
    "timing": (cmd_timing, "training time versus ensemble size"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atrialfiber", description="Fiber orientation from activation maps with PINN ensembles.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--config", help="JSON config file or a stage.json manifest")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--mesh", help="mesh file (.off or legacy ASCII .vtk) instead of a synthetic shape")
        s.add_argument("--mesh-format", choices=("off", "vtk"))
        s.add_argument("--shape", choices=SHAPES)
        s.add_argument("--shape-size", type=float)
        s.add_argument("--resolution", type=int)
        s.add_argument("--fiber-rule", choices=FIBER_RULES)
        s.add_argument("--fiber-angle", type=float, help="degrees from p1")
        s.add_argument("--n-maps", type=int)
        s.add_argument("--density", type=float, help="samples per cm^2")
        s.add_argument("--sigma", type=float, help="noise std in ms")
        s.add_argument("--mode", choices=("delta", "fibernet"))
        s.add_argument("--selection", choices=("medoid", "mean_tensor"))
        s.add_argument("--iterations", type=int)
        s.add_argument("--ensemble-size", type=int)
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (JSON value); training keys as training.NAME")
        s.add_argument("--workers", type=int, help="threads for ensemble members (does not change results)")
        s.add_argument("--members", action="store_true", help="eval: also export every member's fibers")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, _ = resolve_config(args)
        COMMANDS[args.command][0](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, MeshError, EikonalError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, EigenSolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
