"""Error metrics, reports, noise/density sweeps, ensemble-size timing and VTK export."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .eikonal import GroundTruthField, generate_dataset
from .mesh import TriangleSurfaceMesh, write_vtk
from .pinn import PinnProblem, TrainingConfig, init_ensemble, predict_vertex_maps, train
from .selection import FiberSelectionResult, select_field
from .spectral import SpectralBasis

__all__ = [
    "EvaluationReport",
    "EvaluationResult",
    "rmse_map",
    "angle_error",
    "fiber_error_median",
    "evaluate_ensemble",
    "cell_seed",
    "run_sweep",
    "timing_study",
    "write_timing_csv",
    "export_fields",
    "SWEEP_METRICS",
]

logger = logging.getLogger(__name__)


def rmse_map(predicted, truth) -> float:
    """Root-mean-square difference of two per-vertex time fields (ms)."""
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def angle_error(f_true, f_pred) -> np.ndarray:
    """Unoriented angle between unit vectors, in degrees within [0, 90]."""
    c = np.abs(np.sum(np.asarray(f_true, float) * np.asarray(f_pred, float), axis=-1))
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def fiber_error_median(errors) -> float:
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no errors to summarise")
    return float(np.median(e))


@dataclass
class EvaluationReport:
    rmse_mean: list  # per map, ms, mean over members
    rmse_std: list  # per map, ms, std over members
    fe_ensemble_mean: float  # mean of the member FEs (degrees)
    fe_range: tuple  # (min, max) member FE
    fe_members: list
    fe_mean_tensor: float
    fe_medoid: float
    disparity: dict  # summary of the medoid disparity field, degrees
    spearman_disparity_error: float
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fe_range"] = list(self.fe_range)
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


@dataclass
class EvaluationResult:
    report: EvaluationReport
    medoid: FiberSelectionResult
    mean_tensor: FiberSelectionResult
    beta_medoid: np.ndarray  # (V,) degrees
    beta_mean_tensor: np.ndarray
    beta_members: np.ndarray  # (V, S)
    maps: np.ndarray  # (S, N, V) predicted times, ms


def evaluate_ensemble(state, problem: PinnProblem, truth: GroundTruthField,
                      timings: dict | None = None, config: dict | None = None) -> EvaluationResult:
    """Score a trained ensemble against the ground truth fibers and full activation maps."""
    med = select_field(state, problem, "medoid")
    mt = select_field(state, problem, "mean_tensor")
    f_true = truth.fibers
    beta_med = angle_error(f_true, med.fibers)
    beta_mt = angle_error(f_true, mt.fibers)
    beta_mem = angle_error(f_true[:, None, :], med.member_fibers)
    fe_mem = np.median(beta_mem, axis=0)

    maps = predict_vertex_maps(state, problem)
    full = np.stack([m.full_solution for m in problem.dataset.maps])  # (N, V)
    rm = np.sqrt(np.mean((maps - full[None]) ** 2, axis=-1))  # (S, N)

    disp = np.degrees(med.disparity)
    rho = stats.spearmanr(disp, beta_med).statistic if np.ptp(disp) > 0 and np.ptp(beta_med) > 0 else float("nan")
    report = EvaluationReport(
        rmse_mean=rm.mean(axis=0).tolist(),
        rmse_std=rm.std(axis=0).tolist(),
        fe_ensemble_mean=float(fe_mem.mean()),
        fe_range=(float(fe_mem.min()), float(fe_mem.max())),
        fe_members=fe_mem.tolist(),
        fe_mean_tensor=fiber_error_median(beta_mt),
        fe_medoid=fiber_error_median(beta_med),
        disparity={"median": float(np.median(disp)), "mean": float(disp.mean()), "max": float(disp.max())},
        spearman_disparity_error=float(rho),
        timings=dict(timings or {}),
        config=dict(config or {}),
    )
    return EvaluationResult(report, med, mt, beta_med, beta_mt, beta_mem, maps)


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------
SWEEP_METRICS = ("fe_medoid", "fe_mean_tensor", "fe_ensemble_mean", "rmse")


def cell_seed(base_seed: int, sigma_index: int, density_index: int) -> int:
    """Independent, reproducible seed for one sweep cell."""
    ss = np.random.SeedSequence([int(base_seed), int(sigma_index), int(density_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _cell_metrics(report: EvaluationReport) -> dict:
    return {
        "fe_medoid": report.fe_medoid,
        "fe_mean_tensor": report.fe_mean_tensor,
        "fe_ensemble_mean": report.fe_ensemble_mean,
        "rmse": float(np.mean(report.rmse_mean)),
    }


def run_sweep(mesh: TriangleSurfaceMesh, truth: GroundTruthField, noise_levels, densities,
              config: TrainingConfig, out_dir, *, n_maps: int = 3, basis: SpectralBasis | None = None,
              seed: int = 0, progress=None) -> dict:
    """Train and score every (noise, density) cell; returns metric matrices.

    Each finished cell is stored as ``cells/cell_<i>_<j>.json``; rerunning
    skips those. A failing cell is recorded with its error and the sweep
    moves on (it is retried on the next run). One CSV per metric holds a
    noise-by-density matrix; failed cells are left empty.
    """
    noise_levels = [float(s) for s in noise_levels]
    densities = [float(r) for r in densities]
    if not noise_levels or not densities:
        raise ValueError("empty sweep grid")
    if any(s < 0 for s in noise_levels) or any(r <= 0 for r in densities):
        raise ValueError("noise levels must be >= 0 and densities > 0")
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    results = {m: np.full((len(noise_levels), len(densities)), np.nan) for m in SWEEP_METRICS}
    for i, sigma in enumerate(noise_levels):
        for j, rho in enumerate(densities):
            path = out / "cells" / f"cell_{i}_{j}.json"
            rec = json.loads(path.read_text()) if path.exists() else None
            if rec is None or rec.get("status") != "ok":
                rec = _run_cell(mesh, truth, sigma, rho, config, n_maps, basis, cell_seed(seed, i, j))
                path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
            if rec["status"] == "ok":
                for m in SWEEP_METRICS:
                    results[m][i, j] = rec["metrics"][m]
            if progress is not None:
                progress(i, j, rec)
    for m in SWEEP_METRICS:
        _write_matrix(out / f"{m}.csv", results[m], noise_levels, densities)
    return results


def _run_cell(mesh, truth, sigma, rho, config, n_maps, basis, seed) -> dict:
    rec = {"sigma": sigma, "density": rho, "seed": seed}
    try:
        t0 = time.perf_counter()
        ds = generate_dataset(mesh, truth, n_maps=n_maps, density=rho, sigma=sigma, seed=seed)
        problem = PinnProblem(mesh, ds, config.mode, basis)
        state = init_ensemble(problem, replace(config, seed=seed))
        train(state, problem)
        res = evaluate_ensemble(state, problem, truth)
        rec.update(status="ok", metrics=_cell_metrics(res.report), seconds=time.perf_counter() - t0)
    except Exception as exc:  # recorded, the sweep continues
        logger.warning("sweep cell sigma=%s density=%s failed: %s", sigma, rho, exc)
        rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return rec


def _write_matrix(path, values, noise_levels, densities) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma_ms\\density_per_cm2", *[repr(r) for r in densities]])
        for s, row in zip(noise_levels, values):
            w.writerow([repr(s), *["" if np.isnan(v) else repr(float(v)) for v in row]])


# ----------------------------------------------------------------------------
# timing
# ----------------------------------------------------------------------------
def timing_study(problem: PinnProblem, config: TrainingConfig, sizes=(1, 5, 10, 20),
                 iterations: int = 10_000, workers: int | None = None) -> list[dict]:
    """Wall-clock cost of the first iteration (with setup) and of the next ``iterations``.

    The losses reported are the ensemble-mean terms evaluated in iteration
    ``iterations + 1``.
    """
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("ensemble sizes must be >= 1")
    rows = []
    for size in sizes:
        cfg = replace(config, ensemble_size=size, log_every=iterations + 1)
        t0 = time.perf_counter()
        state = init_ensemble(problem, cfg)
        train(state, problem, iterations=1, workers=workers)
        t1 = time.perf_counter()
        train(state, problem, iterations=iterations, workers=workers)
        t2 = time.perf_counter()
        last = state.history[-1]
        if last["iteration"] != iterations + 1:
            raise RuntimeError("missing loss record for the final iteration")
        rows.append({"ensemble_size": size, "first_iteration_s": t1 - t0, "iterations": iterations,
                     "iterations_s": t2 - t1, **{k: last[k] for k in ("data", "eiko", "cv", "ang", "total")}})
        logger.info("timing S=%d: first %.2fs, %d iterations %.1fs", size, t1 - t0, iterations, t2 - t1)
    return rows


def write_timing_csv(path, rows: list[dict]) -> None:
    keys = ["ensemble_size", "first_iteration_s", "iterations", "iterations_s", "data", "eiko", "cv", "ang", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in keys})


# ----------------------------------------------------------------------------
# export
# ----------------------------------------------------------------------------
def export_fields(path, mesh: TriangleSurfaceMesh, result: EvaluationResult, truth: GroundTruthField | None = None,
                  include_members: bool = False) -> None:
    """Legacy VTK with selected/true fibers, errors, disparity and mean predicted maps."""
    vectors = {"fiber_medoid": result.medoid.fibers, "fiber_mean_tensor": result.mean_tensor.fibers}
    scalars = {
        "beta_medoid_deg": result.beta_medoid,
        "beta_mean_tensor_deg": result.beta_mean_tensor,
        "disparity_medoid_deg": np.degrees(result.medoid.disparity),
    }
    if truth is not None:
        vectors["fiber_true"] = truth.fibers
    for i, m in enumerate(result.maps.mean(axis=0)):
        scalars[f"activation_map_{i}_ms"] = m
    if include_members:
        for k in range(result.medoid.member_fibers.shape[1]):
            vectors[f"fiber_member_{k}"] = result.medoid.member_fibers[:, k]
    for name, arr in scalars.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in exported field {name!r}")
    write_vtk(path, mesh, scalars=scalars, vectors=vectors)
