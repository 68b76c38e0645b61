"""Command line runner: ``smrlab <kind> --config <path> [--workers N] [--out DIR]``.

Writes ``<kind>.csv`` (header row, one record per result, every row tagged
with the run digest) and ``manifest.json`` into the output directory.

Exit status: 0 success, 1 failed invariant in a verification kind, 2 invalid
configuration, 3 numeric blow-up (the stage is named on stderr).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import (CoefficientFamily, GradientNoiseSpec, OperatorSpec,
                           ellipticity_margin_2m, stochastic_parabolicity_margin)
from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .evolution import BlowUpError, LinearProblem, continuity_sweep, realize, solve_linear
from .grid import TorusGrid, plane_wave
from .noise import coupled_refinements, generate_noise, uniform_times
from .normlab import empirical_order, mc_lp_omega, smr_norm

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3


# --- problem assembly -------------------------------------------------------------------------

def build_grid(cfg: ExperimentConfig) -> TorusGrid:
    return TorusGrid(cfg["problem.d"], cfg["problem.n"], cfg["problem.period"])


def build_problem(cfg: ExperimentConfig, grid: TorusGrid | None = None) -> LinearProblem:
    pr = cfg.problem
    grid = grid or build_grid(cfg)
    d, N, m = pr["d"], pr["N"], pr["m"]
    family = CoefficientFamily(time=pr["a_time"], space=pr["a_space"],
                               time_amplitude=pr["a_time_amplitude"],
                               space_amplitude=pr["a_space_amplitude"])
    A = OperatorSpec.laplacian(d, N, m, pr["a"], family=family, shift=pr["shift"], form=pr["form"])
    B = None
    if pr["sigma"] != 0:
        if N != 1 or m != 1:
            raise ConfigError("gradient noise needs N = 1 and m = 1", field="problem.sigma")
        B = GradientNoiseSpec.scalar(d, [pr["sigma"]] + [0.0] * (d - 1))
    k = (pr["mode"],) + (0,) * (d - 1)
    wave = plane_wave(grid, k, N).values
    g = None
    if pr["g_amplitude"] != 0:
        J = B.J if B is not None else pr["J"]
        g = np.zeros((J, N) + grid.shape, dtype=complex)
        g[0] = pr["g_amplitude"] * wave
    return LinearProblem(grid, A, B, None, g, pr["u0_amplitude"] * wave, cfg["numerics.T"],
                         cfg["norm.alpha"], cfg["numerics.base_seed"])


def noise_dimension(p: LinearProblem, cfg: ExperimentConfig) -> int:
    if p.B is not None:
        return p.B.J
    return cfg["problem.J"]


def seed_array(cfg: ExperimentConfig) -> np.ndarray:
    return cfg["numerics.base_seed"] + np.arange(cfg["numerics.seeds"])


def mode_coefficient(grid: TorusGrid, values: np.ndarray, mode: int) -> np.ndarray:
    """Fourier coefficient of the first component along ``exp(i mode x_1)``."""
    k = (mode,) + (0,) * (grid.d - 1)
    wave = plane_wave(grid, k, 1).values[0]
    axes = tuple(range(-grid.d, 0))
    first = values[(Ellipsis, 0) + (slice(None),) * grid.d]
    return np.mean(np.conj(wave) * first, axis=axes)


# --- parallel seed chunks -------------------------------------------------------------------------

def _chunks(seeds: np.ndarray, workers: int) -> list[np.ndarray]:
    parts = max(1, min(workers, len(seeds)))
    return [c for c in np.array_split(seeds, parts) if len(c)]


def map_seeds(fn, cfg: ExperimentConfig, seeds: np.ndarray, workers: int) -> list:
    """``fn(cfg, chunk)`` over contiguous seed chunks; results in seed order."""
    chunks = _chunks(seeds, workers)
    if workers <= 1 or len(chunks) == 1:
        return [fn(cfg, c) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(chunks), chunks))


def _simulate_chunk(cfg: ExperimentConfig, seeds: np.ndarray):
    p = build_problem(cfg)
    noise = generate_noise(noise_dimension(p, cfg), uniform_times(p.T, cfg["numerics.M"]), seeds)
    U = solve_linear(p, noise, cfg["numerics.stride"])
    return U.times, mode_coefficient(p.grid, U.values, cfg["problem.mode"])


def _smr_chunk(cfg: ExperimentConfig, seeds: np.ndarray):
    p = build_problem(cfg)
    J = noise_dimension(p, cfg)
    out = []
    for noise in coupled_refinements(J, p.T, cfg["numerics.M"], cfg["numerics.refinements"] - 1,
                                     seeds):
        U = solve_linear(p.replace(u0=None), noise)
        row = [smr_norm(U, th, cfg["norm.p"], cfg["norm.alpha"], p.A.m, cfg["norm.q"],
                        cfg["norm.beta_gap"]) for th in cfg["norm.theta"]]
        out.append((noise.M, np.array(row)))
    return out


# --- kinds ------------------------------------------------------------------------------------------

def run_simulate(cfg, workers, timings):
    parts = map_seeds(_simulate_chunk, cfg, seed_array(cfg), workers)
    times = parts[0][0]
    coef = np.concatenate([c for _, c in parts], axis=0)
    u0 = cfg["problem.u0_amplitude"]
    rows = []
    for i, t in enumerate(times):
        c = coef[:, i]
        rows.append({"t": t, "mode": cfg["problem.mode"],
                     "amplitude": float(np.mean(c.real)) / u0 if u0 else float("nan"),
                     "second_moment": float(np.mean(np.abs(c) ** 2))})
    return rows, True


def run_verify_transform(cfg, workers, timings):
    p = build_problem(cfg)
    if p.B is None:
        raise ConfigError("verify-transform needs gradient noise (problem.sigma != 0)",
                          field="problem.sigma")
    from .transform import equivalence_error

    noises = coupled_refinements(p.B.J, p.T, cfg["numerics.M"], cfg["numerics.refinements"] - 1,
                                 seed_array(cfg))
    errors = equivalence_error(p, noises)
    zero = equivalence_error(p.replace(B=GradientNoiseSpec.scalar(p.grid.d, [0.0] * p.grid.d)),
                             noises[:1])[0]
    steps = [n.T / n.M for n in noises]
    order = empirical_order(steps, errors) if len(errors) > 1 else float("nan")
    rows = [{"M": n.M, "error": e, "order": order, "sigma_zero_error": zero}
            for n, e in zip(noises, errors)]
    ok = (all(b < a for a, b in zip(errors, errors[1:])) and 0.4 <= order <= 0.6
          and zero < 1e-10)
    return rows, ok


def run_parabolicity(cfg, workers, timings):
    p = build_problem(cfg)
    noise = generate_noise(noise_dimension(p, cfg), uniform_times(p.T, cfg["numerics.M"]),
                           seed_array(cfg))
    a_path = realize(p.A, noise, p.seed, p.grid)
    ell = ellipticity_margin_2m(a_path, p.A.m, d=p.grid.d)
    if p.B is not None:
        stoch = stochastic_parabolicity_margin(a_path, realize(p.B, noise, p.seed, p.grid))
    else:
        stoch = ell
    return [{"ellipticity_margin": ell, "margin": stoch, "parabolic": stoch > 0}], True


def run_smr_norms(cfg, workers, timings):
    parts = map_seeds(_smr_chunk, cfg, seed_array(cfg), workers)
    rows = []
    for level in range(len(parts[0])):
        M = parts[0][level][0]
        vals = np.concatenate([part[level][1] for part in parts], axis=-1)
        for th, per_seed in zip(cfg["norm.theta"], vals):
            est = mc_lp_omega(per_seed, cfg["norm.p"], seed=cfg["numerics.base_seed"])
            rows.append({"theta": th, "M": M, "value": est.value, "ci": est.half_width,
                         "seeds": est.samples})
    return rows, True


def run_picard(cfg, workers, timings):
    from .semilinear import SemilinearProblem, make_nonlinearity, picard_solve

    p = build_problem(cfg)
    pr = cfg.problem
    grid = p.grid
    J = noise_dimension(p, cfg)
    F = make_nonlinearity(pr["F"], grid, p.A.m, lam=pr["F_lam"], mu=pr["F_mu"], c=pr["F_c"],
                          radius=pr["F_radius"])
    G = make_nonlinearity(pr["G"], grid, p.A.m, J=J, noise=True, lam=pr["G_lam"])
    sp = SemilinearProblem(p, F, G, cfg["norm.q"], cfg["norm.p"])
    noise = generate_noise(J, uniform_times(p.T, cfg["numerics.M"]), seed_array(cfg))
    _, diag = picard_solve(sp, noise, tol=cfg["numerics.tol"], max_iter=cfg["numerics.max_iter"],
                           probes=cfg["numerics.probes"])
    rows = []
    for w, res in enumerate(diag.residuals):
        for it, r in enumerate(res, 1):
            rows.append({"window": w, "iteration": it, "residual": r, "ratio": diag.ratio,
                         "window_ratio": diag.window_ratio, "target": diag.target,
                         "kappa": diag.kappa, "nu": diag.nu, "M_weight": diag.M,
                         "K_det": diag.K_det, "K_st": diag.K_st, "converged": diag.converged})
    if not diag.converged:
        print(diag.report, file=sys.stderr)
    return rows, True


def run_tent(cfg, workers, timings):
    from .coefficients import _trig_polynomial
    from .noise import stream
    from .tent import (TentField, log_time_grid, rough_coefficient, solver_times,
                       tent_maxreg_experiment, tent_stochastic_experiment)

    tc = cfg.tent
    pr = cfg.problem
    edges, _, _ = log_time_grid(tc["t_min"], tc["t_max"])
    rows = []
    divfree = pr["a_space"] == "divfree"
    for level in range(cfg["numerics.refinements"]):
        n = pr["n"] * 2**level
        sub = tc["substeps"] * 2**level
        grid = TorusGrid(pr["d"], n, pr["period"])
        times = solver_times(edges, sub)
        a = rough_coefficient(grid, times, edges, cfg["numerics.base_seed"], divfree,
                              time_amplitude=pr["a_time_amplitude"],
                              space_amplitude=pr["a_space_amplitude"])
        h = _trig_polynomial(grid, stream(cfg["numerics.base_seed"], 0x66), 2)
        label = f"{grid.describe()};substeps={sub}"
        for p_exp in tc["ps"]:
            for sig in tc["sigmas"]:
                f = TentField.from_function(grid, edges, lambda t: h[None], sigma=sig)
                ratio, est = tent_maxreg_experiment(a, f, p_exp, sig, label)
                rows.append({"experiment": "deterministic", "p": p_exp, "sigma": sig,
                             "alpha": 1.0, "grid": label, "ratio": ratio, "ci": est.half_width})
                if tc["stochastic"] == "yes":
                    ratio, est = tent_stochastic_experiment(a, f, seed_array(cfg), p_exp, sig,
                                                            grid_label=label)
                    rows.append({"experiment": "stochastic", "p": p_exp, "sigma": sig,
                                 "alpha": 1.0, "grid": label, "ratio": ratio,
                                 "ci": est.half_width})
    return rows, True


def run_sweep(cfg, workers, timings):
    p = build_problem(cfg)
    noise = generate_noise(noise_dimension(p, cfg), uniform_times(p.T, cfg["numerics.M"]),
                           seed_array(cfg))
    A_ref = OperatorSpec.laplacian(p.grid.d, p.N, p.A.m)
    rows = []
    for est in continuity_sweep(p, A_ref, cfg["norm.lambdas"], noise, cfg["norm.p"],
                                cfg["norm.q"], cfg["numerics.stride"]):
        rows.append({"lambda": est.extra["lambda"], "value": est.value, "ci": est.half_width,
                     "margin": est.extra["margin"], "flagged": est.extra["flagged"],
                     "ratio": est.extra["ratio"]})
    return rows, True


RUNNERS = {
    "simulate": run_simulate,
    "verify-transform": run_verify_transform,
    "parabolicity": run_parabolicity,
    "smr-norms": run_smr_norms,
    "picard": run_picard,
    "tent": run_tent,
    "sweep": run_sweep,
}


# --- output --------------------------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def render_csv(rows: list[dict], run_hash: str) -> str:
    buf = io.StringIO()
    header = ["run_hash"] + (list(rows[0]) if rows else [])
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([run_hash] + [_cell(row[k]) for k in header[1:]])
    return buf.getvalue()


def run_hash(cfg: ExperimentConfig) -> str:
    """Digest of the validated config and the code version (not of timings)."""
    return hashlib.sha256(f"{cfg.digest}:{__version__}".encode()).hexdigest()[:16]


def run(cfg: ExperimentConfig, workers: int = 1, out: Path | str = ".") -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    start = time.perf_counter()
    rows, ok = RUNNERS[cfg.kind](cfg, workers, timings)
    timings[cfg.kind] = time.perf_counter() - start
    h = run_hash(cfg)
    (out / f"{cfg.kind}.csv").write_text(render_csv(rows, h), encoding="utf-8", newline="")
    manifest = {"run_hash": h, "config_sha256": cfg.digest, "code_version": __version__,
                "kind": cfg.kind, "base_seed": cfg["numerics.base_seed"], "workers": workers,
                "wall_time": time.perf_counter() - start, "stage_timings": timings,
                "rows": len(rows), "invariants_ok": ok}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return EXIT_OK if ok else EXIT_INVARIANT


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="smrlab", description=__doc__.splitlines()[0])
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", required=True, help="INI experiment file")
    parser.add_argument("--workers", type=int, default=1, help="processes for seed chunks")
    parser.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.kind)
        return run(cfg, args.workers, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(f"blow-up in stage {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
