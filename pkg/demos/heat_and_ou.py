"""Linear SPDE walkthrough: heat decay, an Ornstein-Uhlenbeck mode, and the
parabolicity threshold for gradient noise.

Run with ``python3 demos/heat_and_ou.py``.
"""
import math

import numpy as np

from smrlab.coefficients import GradientNoiseSpec, OperatorSpec
from smrlab.evolution import LinearProblem, solve_linear
from smrlab.grid import TorusGrid, plane_wave
from smrlab.noise import generate_noise, uniform_times
from smrlab.normlab import mc_mean


def mode(grid, values, k):
    wave = plane_wave(grid, [k]).values[0]
    return np.mean(np.conj(wave) * values[..., 0, :], axis=-1)


grid = TorusGrid(1, 32)
heat = LinearProblem(grid, OperatorSpec.laplacian(1), u0=plane_wave(grid, [3]), T=1.0)
U = solve_linear(heat, generate_noise(1, uniform_times(1.0, 256), 0))
c = mode(grid, U.values, 3).reshape(-1)
print("heat: mode 3 at T =", c[-1].real, "exact", math.exp(-9))

# additive noise on mode 1 gives an OU coefficient with variance (1 - e^{-2}) / 2
grid = TorusGrid(1, 8)
g = np.zeros((1, 1, 8), dtype=complex)
g[0] = plane_wave(grid, [1]).values
ou = LinearProblem(grid, OperatorSpec.laplacian(1), g=g, T=1.0)
U = solve_linear(ou, generate_noise(1, uniform_times(1.0, 512), np.arange(2000)), stride=512)
est = mc_mean(np.abs(mode(grid, U.values[:, -1], 1)) ** 2)
print(f"OU: E|c(1)|^2 = {est.value:.4f} CI {est.interval}, exact {(1 - math.exp(-2)) / 2:.4f}")

# gradient noise sigma d/dx: second moment decays iff sigma^2 / 2 < 1
grid = TorusGrid(1, 8, period=math.pi)
noise = generate_noise(1, uniform_times(2.0, 512), np.arange(500))
for sigma in (1.0, 1.3, 1.6):
    p = LinearProblem(grid, OperatorSpec.laplacian(1), GradientNoiseSpec.scalar(1, [sigma]),
                      u0=plane_wave(grid, [1]), T=2.0)
    U = solve_linear(p, noise, stride=64)
    m2 = np.mean(np.abs(mode(grid, U.values, 1)) ** 2, axis=0)
    print(f"sigma = {sigma}: E|u(T)|^2 / E|u(0)|^2 = {m2[-1] / m2[0]:.3g}")
