"""Benchmark A (flat 10 x 10 cm sheet, 30 degree fibers, 3 paced maps) with a
checkpoint cache for the long acceptance runs.

Training a 20-member ensemble for 50k iterations takes hours on one core, so
trained checkpoints and timing tables are stored under ``.acceptance_cache``
keyed by the run parameters and a digest of every source file that can change
a trained checkpoint. Evaluation is always recomputed from the checkpoint.
Set ``ATRIALFIBER_ACCEPTANCE_FRESH=1`` to ignore the cache.

Run ``python tests/benchmark_a.py train SIGMA S ITERATIONS`` or
``python tests/benchmark_a.py timing`` to fill the cache ahead of pytest.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from atrialfiber.eikonal import generate_dataset, rule_based_fibers
from atrialfiber.evaluation import timing_study
from atrialfiber.mesh import flat_sheet
from atrialfiber.pinn import PinnProblem, TrainingConfig, init_ensemble, load_checkpoint, save_checkpoint, train
from atrialfiber.spectral import compute_basis

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src" / "atrialfiber"
CACHE = Path(os.environ.get("ATRIALFIBER_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
TRAINING_SOURCES = ("_npz.py", "eikonal.py", "mesh/core.py", "mesh/shapes.py", "nn.py", "pinn.py",
                    "spectral.py", "tensor.py")

SIDE, NX, ANGLE, N_MAPS, DENSITY, SEED = 10.0, 50, np.pi / 6, 3, 16.0, 0


def source_digest() -> str:
    h = hashlib.sha256()
    for name in TRAINING_SOURCES:
        h.update(name.encode())
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


def fresh() -> bool:
    return os.environ.get("ATRIALFIBER_ACCEPTANCE_FRESH", "") not in ("", "0")


_problems: dict = {}


def problem(sigma: float):
    """Mesh, ground truth and Delta-Fibernet problem for benchmark A at noise ``sigma``."""
    if sigma not in _problems:
        mesh = flat_sheet(SIDE, nx=NX)
        gt = rule_based_fibers(mesh, "constant_angle", theta=ANGLE)
        ds = generate_dataset(mesh, gt, n_maps=N_MAPS, density=DENSITY, sigma=sigma, seed=SEED)
        _problems[sigma] = (mesh, gt, PinnProblem(mesh, ds, "delta", compute_basis(mesh, 10)))
    return _problems[sigma]


def config(ensemble_size: int, iterations: int) -> TrainingConfig:
    # preset lambdas, lambda_p = 1e-3, batch 64; ensemble size and length vary per criterion
    return TrainingConfig.delta_fibernet(ensemble_size=ensemble_size, iterations=iterations, seed=SEED)


def _run_dir(kind: str, **params) -> Path:
    tag = "_".join(f"{k}{v}" for k, v in params.items())
    return CACHE / f"{kind}_{tag}_{source_digest()}"


def trained(sigma: float, ensemble_size: int, iterations: int, progress=None):
    """Returns ``(state, mesh, gt, problem, info)``; ``info`` holds the training wall time."""
    mesh, gt, prob = problem(sigma)
    d = _run_dir("train", sigma=sigma, S=ensemble_size, it=iterations)
    ck, meta = d / "checkpoint.npz", d / "info.json"
    if ck.exists() and meta.exists() and not fresh():
        info = json.loads(meta.read_text())
        info["cached"] = True
        return load_checkpoint(ck, prob), mesh, gt, prob, info
    state = init_ensemble(prob, config(ensemble_size, iterations))
    t0 = time.perf_counter()
    train(state, prob, progress=progress)
    elapsed = time.perf_counter() - t0
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, state)
    info = {"train_seconds": elapsed, "cpu_count": os.cpu_count(), "source_digest": source_digest(),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    meta.write_text(json.dumps(info, indent=2) + "\n")
    info["cached"] = False
    return state, mesh, gt, prob, info


def timing(sizes=(1, 5, 10, 20), iterations: int = 10_000):
    d = _run_dir("timing", it=iterations, sizes="-".join(map(str, sizes)))
    path = d / "timing.json"
    if path.exists() and not fresh():
        out = json.loads(path.read_text())
        out["cached"] = True
        return out
    _, _, prob = problem(0.0)
    rows = timing_study(prob, config(1, iterations), sizes=sizes, iterations=iterations, workers=1)
    out = {"rows": rows, "cpu_count": os.cpu_count(), "source_digest": source_digest(),
           "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    d.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2) + "\n")
    out["cached"] = False
    return out


if __name__ == "__main__":
    what = sys.argv[1]
    if what == "train":
        sigma, size, iters = float(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4])
        t0 = time.perf_counter()

        def show(rec):
            if rec["iteration"] % 1000 == 0:
                print(rec, f"{time.perf_counter() - t0:.0f}s", flush=True)

        *_, info = trained(sigma, size, iters, progress=show)
        print(info, flush=True)
    elif what == "timing":
        print(timing(), flush=True)
    else:
        raise SystemExit(f"unknown action {what!r}")
