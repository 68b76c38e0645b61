"""Semilinear equations by Picard iteration with estimated constants.

Run with ``python3 demos/picard.py``.
"""
import numpy as np

from smrlab.coefficients import GradientNoiseSpec, OperatorSpec
from smrlab.evolution import LinearProblem
from smrlab.grid import TorusGrid, plane_wave
from smrlab.noise import generate_noise, uniform_times
from smrlab.semilinear import (ContractionError, SemilinearProblem, estimate_mr_constants,
                               make_nonlinearity, picard_solve)

grid = TorusGrid(1, 32)
lin = LinearProblem(grid, OperatorSpec.laplacian(1), GradientNoiseSpec.scalar(1, [0.5]),
                    u0=plane_wave(grid, [1]), T=1.0)
noise = generate_noise(1, uniform_times(1.0, 256), np.arange(8))

K = estimate_mr_constants(lin, noise, probes=4)
print("estimated constants (deterministic, stochastic):", K)

F = make_nonlinearity("sine", grid, c=0.5)
G = make_nonlinearity("linear", grid, noise=True, lam=0.3)
U, diag = picard_solve(SemilinearProblem(lin, F, G), noise, constants=K)
print(f"converged={diag.converged} windows={diag.windows} iterations={diag.iterations}")
print(f"observed ratio {diag.ratio:.3f}, target {diag.target:.3f}")

# a gradient Lipschitz constant above 1/K_det cannot be handled by windowing
try:
    picard_solve(SemilinearProblem(lin, make_nonlinearity("linear", grid, mu=1.5), G),
                 noise, constants=K)
except ContractionError as exc:
    print("refused:", exc)
