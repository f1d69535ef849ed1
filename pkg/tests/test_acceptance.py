"""Acceptance criteria 1-11. Each check prints one PASS/FAIL line (also
collected in the "acceptance criteria" section of the pytest summary).

The benchmark-A training runs are shared through ``benchmark_a``, which caches
trained checkpoints; see that module for how to force fresh runs.
"""

import hashlib
import json
import os
import shutil
import time

import numpy as np
import pytest

import benchmark_a
from atrialfiber.cli import EXIT_OK, main
from atrialfiber.eikonal import fim_solve, isotropic_field, rule_based_fibers
from atrialfiber.evaluation import evaluate_ensemble
from atrialfiber.mesh import flat_sheet, icosphere
from atrialfiber.pinn import PinnProblem, TrainingConfig, evaluate_losses, init_ensemble
from atrialfiber.eikonal import generate_dataset
from atrialfiber.selection import mean_tensor, medoid_index
from atrialfiber.spectral import compute_basis
from atrialfiber.tensor import TensorHead, assemble_local, head_from_fiber

_evaluated: dict = {}


def benchmark(sigma, size, iterations):
    key = (sigma, size, iterations)
    if key not in _evaluated:
        state, mesh, gt, prob, info = benchmark_a.trained(sigma, size, iterations)
        _evaluated[key] = (evaluate_ensemble(state, prob, gt), info)
    return _evaluated[key]


def _provenance(info) -> str:
    return f"cached run from {info['created']}" if info.get("cached") else "fresh run"


# ---------------------------------------------------------------- 1
def test_criterion_1_eikonal_oracle(verdict):
    m = flat_sheet(10.0, nx=50)
    v = 0.06
    src = int(np.argmin(np.linalg.norm(m.vertices, axis=1)))
    iso = isotropic_field(m, v)
    t0 = time.perf_counter()
    T = fim_solve(m, iso, [src])
    elapsed = time.perf_counter() - t0
    exact = np.linalg.norm(m.vertices - m.vertices[src], axis=1) / v
    scale = 10.0 * np.sqrt(2.0) / v
    err = np.max(np.abs(T - exact)) / scale
    verdict(1, err < 0.02 and elapsed < 30.0,
            f"L-inf error {100 * err:.3f}% of diameter travel time (bound 2%), solve {elapsed:.2f} s (bound 30 s)")


# ---------------------------------------------------------------- 2
def test_criterion_2_anisotropy_oracle(verdict):
    m = flat_sheet(10.0, nx=50)
    gt = rule_based_fibers(m, "constant_angle", theta=0.0, v_l=0.06, v_t=0.03)
    src = int(np.argmin(np.linalg.norm(m.vertices - [5.0, 5.0, 0.0], axis=1)))
    T = fim_solve(m, gt, [src])
    d = m.vertices - m.vertices[src]
    on_x = (np.abs(d[:, 1]) < 1e-9) & (np.abs(d[:, 0]) > 0)
    on_y = (np.abs(d[:, 0]) < 1e-9) & (np.abs(d[:, 1]) > 0)
    ex = np.abs(d[on_x, 0]) / 0.06
    ey = np.abs(d[on_y, 1]) / 0.03
    rel_x = np.max(np.abs(T[on_x] - ex) / ex)
    rel_y = np.max(np.abs(T[on_y] - ey) / ey)
    verdict(2, rel_x < 0.03 and rel_y < 0.03,
            f"max relative error along fibers {100 * rel_x:.3f}%, across fibers {100 * rel_y:.3f}% (bound 3%)")


# ---------------------------------------------------------------- 3
def test_criterion_3_spectral_oracle(verdict):
    b = compute_basis(icosphere(4), 10)
    analytic = np.array([2.0] * 3 + [6.0] * 5 + [12.0])
    rel = np.abs(b.eigenvalues[1:10] - analytic) / analytic
    verdict(3, bool(np.all(rel < 0.03)),
            f"first 9 nonzero eigenvalues {np.round(b.eigenvalues[1:10], 4).tolist()}, "
            f"max relative error {100 * rel.max():.3f}% (bound 3%)")


# ---------------------------------------------------------------- 4
def _fd_problem(mode):
    m = flat_sheet(10.0, nx=10)
    gt = rule_based_fibers(m, "constant_angle", theta=np.pi / 6)
    ds = generate_dataset(m, gt, n_maps=3, density=0.5, sigma=1.0, seed=1)
    return PinnProblem(m, ds, mode, compute_basis(m, 10) if mode == "delta" else None)


@pytest.mark.parametrize("mode", ["delta", "fibernet"])
@pytest.mark.parametrize("huber", ["default", "both_branches"])
def test_criterion_4_gradient_exactness(mode, huber, verdict):
    prob = _fd_problem(mode)
    preset = TrainingConfig.delta_fibernet if mode == "delta" else TrainingConfig.fibernet
    extra = {} if huber == "default" else {"delta_e": 1e-3, "delta_a": 0.05}
    st = init_ensemble(prob, preset(ensemble_size=2, **extra))
    rng = np.random.default_rng(11)
    for a in st.trainable_arrays():
        a += rng.normal(scale=0.2, size=a.shape)
    coll = rng.choice(prob.mesh.n_triangles, 64, replace=False)
    arrays = st.trainable_arrays()
    sizes = np.cumsum([0] + [a.size for a in arrays])
    h = 1e-6
    worst = {}
    for t, name in enumerate(("data", "eiko", "cv", "ang")):
        w = np.eye(4)[t]
        g = evaluate_losses(st, prob, coll, w, workers=1)
        grads = np.concatenate([x.ravel() for x in g.grad_tensor.arrays() + g.grad_maps.arrays()])
        coords = rng.choice(sizes[-1], 64, replace=False)
        bad = 0
        wr = 0.0
        for c in coords:
            k = int(np.searchsorted(sizes, c, side="right") - 1)
            flat = arrays[k].reshape(-1)
            j = c - sizes[k]
            old = flat[j]
            flat[j] = old + h
            fp = evaluate_losses(st, prob, coll, w, need_grad=False, workers=1).total(w).sum()
            flat[j] = old - h
            fm = evaluate_losses(st, prob, coll, w, need_grad=False, workers=1).total(w).sum()
            flat[j] = old
            fd = (fp - fm) / (2 * h)
            err = abs(fd - grads[c])
            if err > max(1e-5 * abs(fd), 1e-7):
                bad += 1
            wr = max(wr, err / max(abs(fd), 1e-7 / 1e-5))
        worst[name] = (bad, wr)
    ok = all(b == 0 for b, _ in worst.values())
    detail = ", ".join(f"{n}: {b}/64 off, worst rel {r:.1e}" for n, (b, r) in worst.items())
    verdict(4, ok, f"{mode} mode, {huber} Huber thresholds, 64 coordinates per term: {detail} "
                   f"(bound rel 1e-5, abs floor 1e-7)")


# ---------------------------------------------------------------- 5
def _brute_medoid(f):
    best, best_k = np.inf, -1
    for k in range(len(f)):
        d = sorted((1.0 - min(abs(float(f[k] @ g)), 1.0)) ** 2 for g in f)
        n = len(d)
        med = d[n // 2] if n % 2 else 0.5 * (d[n // 2 - 1] + d[n // 2])
        if med < best:
            best, best_k = med, k
    return best_k


def test_criterion_5_selection_oracles(verdict):
    rng = np.random.default_rng(5)
    sets = rng.normal(size=(1000, 20, 3))
    sets /= np.linalg.norm(sets, axis=-1, keepdims=True)
    got = medoid_index(sets)
    ref = np.array([_brute_medoid(f) for f in sets])
    mismatches = int(np.sum(got != ref))

    worst_identical = 0.0
    for _ in range(200):
        alpha = rng.uniform(0, np.pi)
        e1, e2 = rng.uniform(1e-4, 0.04, size=2)
        h = head_from_fiber(np.full(20, alpha), np.sqrt(e1), np.sqrt(e2))
        M = mean_tensor(h)[0]
        worst_identical = max(worst_identical,
                              np.max(np.abs(M - assemble_local(head_from_fiber(alpha, np.sqrt(e1), np.sqrt(e2))))))

    worst_commuting = 0.0
    for _ in range(200):
        p, q, r, s = rng.uniform(np.log(1e-4), np.log(0.04), size=4)
        M = mean_tensor(TensorHead(np.ones(2), np.exp([p, r]), np.exp([q, s])))[0]
        ref_m = np.diag([np.exp((p + r) / 2), np.exp((q + s) / 2)])
        worst_commuting = max(worst_commuting, np.max(np.abs(M - ref_m)))

    ok = mismatches == 0 and worst_identical <= 1e-12 and worst_commuting <= 1e-12
    verdict(5, ok, f"medoid vs brute force: {mismatches}/1000 mismatches (bound 0); identical members "
                   f"max |dM| {worst_identical:.1e}; commuting closed form max |dM| {worst_commuting:.1e} (bound 1e-12)")


# ---------------------------------------------------------------- 6
def test_criterion_6_ci_variant(verdict):
    res, info = benchmark(0.0, 8, 5000)
    fe, secs = res.report.fe_medoid, info["train_seconds"]
    verdict("6 CI", fe < 20.0 and secs < 480.0,
            f"S_e=8, 5k iterations, sigma=0: Medoid FE {fe:.2f} deg (bound 20), training {secs:.0f} s "
            f"(bound 480 s) on {info['cpu_count']} core(s), {_provenance(info)}")


@pytest.mark.parametrize("sigma,bound", [(0.0, 10.0), (1.0, 15.0)])
def test_criterion_6_full_scale_accuracy(sigma, bound, verdict):
    res, info = benchmark(sigma, 20, 50_000)
    r = res.report
    verdict("6", r.fe_medoid < bound,
            f"S_e=20, 50k iterations, sigma={sigma:g} ms: Medoid FE {r.fe_medoid:.2f} deg (bound {bound:g}); "
            f"MeanTensor {r.fe_mean_tensor:.2f}, ensemble mean {r.fe_ensemble_mean:.2f}, "
            f"range {r.fe_range[0]:.2f}-{r.fe_range[1]:.2f}; training {info['train_seconds'] / 60:.1f} min, "
            f"{_provenance(info)}")


def test_criterion_6_full_scale_runtime(verdict):
    _, info = benchmark(0.0, 20, 50_000)
    minutes = info["train_seconds"] / 60.0
    cores = info["cpu_count"] or 1
    if cores < 8:
        line = (f"[criterion 6 runtime] NOT EVALUATED: target is < 60 min on 8 cores; this host has {cores} "
                f"core(s), measured {minutes:.1f} min single-core")
        print(line)
        from conftest import VERDICTS
        VERDICTS.append(line)
        pytest.skip(line)
    verdict("6 runtime", minutes < 60.0, f"full-scale training {minutes:.1f} min on {cores} cores (bound 60)")


# ---------------------------------------------------------------- 7-9 (sigma = 1 ms)
def test_criterion_7_ordering(verdict):
    res, info = benchmark(1.0, 20, 50_000)
    r = res.report
    ok = r.fe_medoid <= r.fe_mean_tensor + 1.0 and r.fe_medoid <= r.fe_ensemble_mean + 1.0
    verdict(7, ok, f"sigma=1 ms: Medoid {r.fe_medoid:.2f} <= MeanTensor {r.fe_mean_tensor:.2f} + 1 and "
                   f"<= ensemble mean {r.fe_ensemble_mean:.2f} + 1")


def test_criterion_8_denoising(verdict):
    res, info = benchmark(1.0, 20, 50_000)
    rmse = float(np.mean(res.report.rmse_mean))
    verdict(8, rmse <= 1.5, f"sigma=1 ms, rho=16: mean per-member RMSE {rmse:.3f} ms "
                            f"(per map {np.round(res.report.rmse_mean, 3).tolist()}), bound 1.5 ms")


def test_criterion_9_disparity_error_association(verdict):
    res, info = benchmark(1.0, 20, 50_000)
    rho = res.report.spearman_disparity_error
    verdict(9, rho > 0, f"sigma=1 ms: Spearman rho(disparity, beta) = {rho:.3f} (bound > 0)")


# ---------------------------------------------------------------- 10
def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_10_determinism(tmp_path, verdict):
    # benchmark A geometry and data through every CLI stage, shortened training
    cfg = {"seed": 0, "output_dir": str(tmp_path / "run"), "shape": "flat_sheet", "shape_size": 10.0,
           "shape_resolution": 50, "fiber_angle_deg": 30.0, "n_maps": 3, "density": 16.0, "sigma": 1.0,
           "training": {"iterations": 200, "ensemble_size": 4}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    files = ("train/checkpoint.npz", "eval/report.json", "eval/fields.vtk")
    digests = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        for stage in ("genmesh", "eigenbasis", "simulate", "train", "eval"):
            assert main([stage, "--config", str(path)]) == EXIT_OK
        digests.append({f: _sha(tmp_path / "run" / f) for f in files})
    same = digests[0] == digests[1]
    verdict(10, same, "two pipeline runs with seed 0: " + ", ".join(
        f"{f} {'identical' if digests[0][f] == digests[1][f] else 'DIFFERENT'} ({digests[0][f][:12]})" for f in files))


# ---------------------------------------------------------------- 11
def test_criterion_11_timing_shape(verdict):
    out = benchmark_a.timing()
    rows = out["rows"]
    times = [r["iterations_s"] for r in rows]
    sizes = [r["ensemble_size"] for r in rows]
    base = rows[0]
    nondecreasing = all(b >= a for a, b in zip(times, times[1:]))
    finite = all(np.isfinite(r[k]) for r in rows for k in ("data", "eiko", "cv", "ang"))
    ratios = {k: max(r[k] / base[k] for r in rows) for k in ("data", "eiko")}
    lows = {k: min(r[k] / base[k] for r in rows) for k in ("data", "eiko")}
    within = all(0.5 <= lows[k] and ratios[k] <= 2.0 for k in ratios)
    # the two losses tracked against ensemble size are data and eikonal; the
    # smoothness terms are printed for reference only
    extra = ", ".join(f"{k} max ratio {max(r[k] / base[k] for r in rows):.2f}" for k in ("cv", "ang", "total"))
    prov = f"cached run from {out['created']}" if out.get("cached") else "fresh run"
    verdict(11, nondecreasing and finite and within,
            f"10k-iteration times {dict(zip(sizes, np.round(times, 1).tolist()))} s (non-decreasing: {nondecreasing}); "
            f"iteration 10001 losses finite: {finite}; L_data ratio to S_e=1 in [{lows['data']:.2f}, "
            f"{ratios['data']:.2f}], L_eiko in [{lows['eiko']:.2f}, {ratios['eiko']:.2f}] (bound within 2x); "
            f"reference: {extra}; {out['cpu_count']} core(s), {prov}")
