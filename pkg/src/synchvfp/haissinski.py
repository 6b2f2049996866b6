"""Haissinski equilibria and the stability constants around them."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .model import GridSpec, ModelParams, PhaseGrid, Profile1D, trapezoid_1d, trapezoid_weights
from .wakefield import Kernel, displacement_samples, lattice_convolve

logger = logging.getLogger(__name__)


def lambert_w(z: float, w0: float = 0.7, tol: float = 1e-15, max_iter: int = 100) -> float:
    """Principal branch of the Lambert W function for ``z >= 0``, by Newton."""
    if z < 0:
        raise ValueError("lambert_w implemented for z >= 0 only")
    w = w0
    for _ in range(max_iter):
        ew = math.exp(w)
        step = (w * ew - z) / (ew * (w + 1))
        w -= step
        if abs(step) <= tol * max(1.0, abs(w)):
            return w
    raise RuntimeError(f"lambert_w did not converge for z={z}")


#: universal constant of the low-current uniqueness condition, W(3/2) / 3
UNIQUENESS_CONSTANT = lambert_w(1.5) / 3


class HaissinskiNotConverged(RuntimeError):
    """Fixed-point iteration hit ``max_iter``; carries the last residual."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(f"Haissinski iteration not converged after {iterations} "
                         f"iterations, residual {residual:.3e}")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class HaissinskiSolution:
    sigma: Profile1D
    residual_l1: float
    iterations: int
    contraction_estimate: float
    params: ModelParams
    kernel: Kernel
    centroid: float


@dataclass(frozen=True)
class StabilityConstants:
    lambda_m: float
    lambda_M: float
    C_M: float
    C_inf: float
    I_thres: float


def default_lattice(params: ModelParams, n: int = 512, box: float = 8.0) -> Profile1D:
    """Symmetric node lattice of ``±box`` thermal widths (zeros)."""
    half = box * params.thermal_x
    return Profile1D(-half, half, np.zeros(n))


class _TMap:
    """The Haissinski map on a fixed lattice with cached kernel samples."""

    def __init__(self, lattice: Profile1D, params: ModelParams, kernel: Kernel):
        self.x = lattice.x
        self.dx = lattice.dx
        self.w = trapezoid_weights(lattice.n)
        self.lattice = lattice
        self.params = params
        self.k_samples = displacement_samples(kernel, lattice.dx, lattice.n, "value")
        self.base = -params.alpha * self.x ** 2 / (2 * params.theta)
        self.coupling = params.current * params.mass / params.theta

    def __call__(self, sigma: np.ndarray) -> np.ndarray:
        expo = self.base
        if self.coupling != 0:
            expo = expo - self.coupling * lattice_convolve(self.k_samples, self.w * sigma, self.dx)
        # shifting by the max cancels in the normalisation
        num = np.exp(expo - np.max(expo))
        norm = self.dx * np.dot(self.w, num)
        if not (np.isfinite(norm) and norm > 0):
            raise FloatingPointError("Haissinski numerator underflowed on the whole box")
        return num / norm

    def l1(self, a: np.ndarray) -> float:
        return float(self.dx * np.dot(self.w, np.abs(a)))


def apply_T(sigma: Profile1D, params: ModelParams, kernel: Kernel) -> Profile1D:
    """One application of the normalised Haissinski map to a line density."""
    return sigma.with_values(_TMap(sigma, params, kernel)(sigma.values))


def solve_haissinski(params: ModelParams, kernel: Kernel, lattice: Profile1D | None = None,
                     tol: float = 1e-10, max_iter: int = 500, mixing: float | None = None,
                     start=None) -> HaissinskiSolution:
    """Damped fixed-point iteration ``sigma <- (1-m) sigma + m T(sigma)``.

    Starts from the ``I = 0`` Gaussian unless ``start`` (array or profile on
    the lattice) is given, and stops once ``||T(sigma) - sigma||_1 < tol``.
    ``contraction_estimate`` is the largest observed ratio
    ``||T(a) - T(b)||_1 / ||a - b||_1`` between consecutive iterates.

    Raises
    ------
    HaissinskiNotConverged
        When ``max_iter`` iterations do not reach ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol > 0 required")
    if lattice is None:
        lattice = default_lattice(params)
    if mixing is None:
        mixing = 1.0 if params.current < uniqueness_threshold(params, kernel) else 0.2
    if not 0 < mixing <= 1:
        raise ValueError("mixing must lie in (0, 1]")
    tmap = _TMap(lattice, params, kernel)
    if start is None:
        sigma = np.exp(tmap.base)
    else:
        sigma = np.asarray(getattr(start, "values", start), dtype=float).copy()
        if sigma.shape != (lattice.n,) or np.any(sigma < 0):
            raise ValueError("start must be a non-negative array on the lattice")
    sigma = sigma / (tmap.dx * np.dot(tmap.w, sigma))

    t_sigma = tmap(sigma)
    contraction = 0.0
    for it in range(1, max_iter + 1):
        residual = tmap.l1(t_sigma - sigma)
        if residual < tol:
            break
        new = (1 - mixing) * sigma + mixing * t_sigma
        t_new = tmap(new)
        step = tmap.l1(new - sigma)
        if step > 1e-12:
            contraction = max(contraction, tmap.l1(t_new - t_sigma) / step)
        sigma, t_sigma = new, t_new
    else:
        raise HaissinskiNotConverged(residual, max_iter)
    # report the map image: it integrates to one by construction
    out = lattice.with_values(t_sigma)
    centroid = trapezoid_1d(out.with_values(out.x * t_sigma))
    logger.info("Haissinski: %d iterations, residual %.3e, centroid %.6g",
                it, residual, centroid)
    return HaissinskiSolution(out, residual, it, contraction, params, kernel, centroid)


def uniqueness_threshold(params: ModelParams, kernel: Kernel) -> float:
    """Current below which the Haissinski map is an L1 contraction."""
    if not kernel.k_inf_norm > 0:
        raise ValueError("kernel sup norm must be positive")
    return UNIQUENESS_CONSTANT * params.theta / (params.mass * kernel.k_inf_norm)


def contraction_bound(params: ModelParams, kernel: Kernel) -> float:
    """Lipschitz bound ``e^{3 a} 2 a`` with ``a = I M ||K||_inf / theta``."""
    a = params.current * params.mass * kernel.k_inf_norm / params.theta
    return math.exp(3 * a) * 2 * a


def stability_constants(params: ModelParams, kernel: Kernel) -> StabilityConstants:
    al, nu, th = params.alpha, params.nu, params.theta
    im = params.current * params.mass
    return StabilityConstants(
        lambda_m=2 * nu,
        lambda_M=al / th * math.exp(-4 * im / th * kernel.k_inf_norm),
        C_M=nu + 4 * th ** 2 + 4 * al * th + 2 * (im * kernel.dk_inf_norm) ** 2,
        C_inf=2 * al / th + (im / th) ** 2 * kernel.dk_inf_norm ** 2,
        I_thres=uniqueness_threshold(params, kernel),
    )


def steady_state_2d(sol: HaissinskiSolution, spec: GridSpec) -> PhaseGrid:
    """``f(x, v) = M / sqrt(2 pi theta) exp(-v^2 / 2 theta) sigma(x)`` on a grid.

    ``sigma`` is copied when the grid's x nodes coincide with the solution
    lattice and cubic-spline interpolated otherwise (zero outside).
    """
    p = sol.params
    sig = sol.sigma
    xs = spec.x
    if xs[0] < sig.x_min - 1e-12 * abs(sig.x_min) - 0.5 * spec.dx or \
            xs[-1] > sig.x_max + 1e-12 * abs(sig.x_max) + 0.5 * spec.dx:
        raise ValueError("grid extends beyond the Haissinski lattice")
    if sig.n == spec.nx and np.allclose(sig.x, xs, rtol=0, atol=1e-12 * spec.dx):
        sx = sig.values
    else:
        sx = CubicSpline(sig.x, sig.values)(xs)
        sx[(xs < sig.x_min) | (xs > sig.x_max)] = 0.0
        sx = np.maximum(sx, 0.0)
    mv = p.mass / math.sqrt(2 * math.pi * p.theta) * np.exp(-spec.v ** 2 / (2 * p.theta))
    return PhaseGrid.from_spec(spec, sx[:, None] * mv[None, :])
