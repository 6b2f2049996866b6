"""Free energy, dissipation, weighted distances and decay fits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (DiagRecord, ModelParams, PhaseGrid, current_density, grid_integral,
                    marginal_density, trapezoid_weights)
from .wakefield import Kernel, displacement_samples

#: f below this fraction of max f is left out of the Fisher quotient
FISHER_FLOOR = 1e-15
#: mass fraction kept in the core region of the weighted distance
CORE_MASS = 1.0 - 1e-10
QUOTIENT_FLOOR = 1e-300


@dataclass(frozen=True)
class EntropyReport:
    entropy: float
    kinetic_entropy: float
    energy: float
    interaction: float
    fisher: float
    odd_flux: float


@dataclass(frozen=True)
class KernelSamples:
    """Displacement-lattice samples of ``K_e`` and ``dK_o/dx`` for one lattice."""

    even: np.ndarray
    odd_deriv: np.ndarray
    dx: float
    n: int


def kernel_samples(kernel: Kernel, dx: float, n: int) -> KernelSamples:
    val = displacement_samples(kernel, dx, n, "value")
    return KernelSamples(0.5 * (val + val[::-1]),
                         displacement_samples(kernel, dx, n, "odd_deriv"), dx, n)


def _pair_sum(samples: np.ndarray, a: np.ndarray, b: np.ndarray, dx: float) -> float:
    """``dx^2 sum_ij w_i w_j s(x_i - x_j) a_i b_j``."""
    n = a.size
    w = trapezoid_weights(n)
    idx = np.arange(n)[:, None] - np.arange(n)[None, :] + n - 1
    return float(dx * dx * ((w * a) @ (samples[idx] @ (w * b))))


def fisher_information(g: PhaseGrid, params: ModelParams) -> float:
    """``2 nu ∬ |v f + theta d_v f|^2 / f`` with centred differences in v."""
    f = g.values
    dfdv = np.gradient(f, g.dv, axis=1, edge_order=2)
    flux = g.v[None, :] * f + params.theta * dfdv
    mask = f > FISHER_FLOOR * float(np.max(np.abs(f)))
    q = np.zeros_like(f)
    q[mask] = flux[mask] ** 2 / f[mask]
    return 2 * params.nu * grid_integral(g, q)


def free_energy(g: PhaseGrid, params: ModelParams, kernel: Kernel,
                samples: KernelSamples | None = None) -> EntropyReport:
    """Free energy, its components, the Fisher term and the odd-kernel flux.

    The mechanical energy is ``∬ (v^2 + alpha x^2)/2 f`` (no extra factor
    one half), the normalisation under which the dissipation identity
    ``dE/dt + fisher = odd_flux`` holds.
    """
    f = g.values
    fp = np.maximum(f, 0.0)
    flogf = np.zeros_like(fp)
    pos = fp > 0
    flogf[pos] = fp[pos] * np.log(fp[pos])
    kin = params.theta * grid_integral(g, flogf)
    X, V = g.x[:, None], g.v[None, :]
    energy = grid_integral(g, 0.5 * (V ** 2 + params.alpha * X ** 2) * f)
    if params.current == 0:
        inter = odd = 0.0
    else:
        if samples is None:
            samples = kernel_samples(kernel, g.dx, g.nx)
        rho = marginal_density(g).values
        inter = 0.5 * params.current * _pair_sum(samples.even, rho, rho, g.dx)
        if kernel.is_even:
            odd = 0.0
        else:
            j = current_density(g).values
            odd = -params.current * _pair_sum(samples.odd_deriv, j, rho, g.dx)
    return EntropyReport(kin + energy + inter, kin, energy, inter,
                         fisher_information(g, params), odd)


def _core_mask(f_inf: PhaseGrid) -> np.ndarray:
    vals = f_inf.values
    flat = vals.ravel()
    order = np.argsort(flat, kind="stable")[::-1]
    csum = np.cumsum(np.maximum(flat[order], 0.0))
    total = csum[-1]
    if not total > 0:
        raise ValueError("reference density has no positive mass")
    k = int(np.searchsorted(csum, CORE_MASS * total)) + 1
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    mask = mask.reshape(vals.shape)
    if np.any(vals[mask] <= QUOTIENT_FLOOR):
        raise ValueError("reference density must be positive on its core region")
    return mask


def _weights2d(g: PhaseGrid) -> np.ndarray:
    return np.outer(trapezoid_weights(g.nx), trapezoid_weights(g.nv)) * g.dx * g.dv


def l2mu_distance(f: PhaseGrid, f_inf: PhaseGrid) -> float:
    """``sqrt(∬ (f - f_inf)^2 / f_inf)`` over the core region of ``f_inf``."""
    if f.values.shape != f_inf.values.shape:
        raise ValueError("grids must share their shape")
    mask = _core_mask(f_inf)
    d = f.values[mask] - f_inf.values[mask]
    return math.sqrt(float(np.sum(_weights2d(f)[mask] * d * d / f_inf.values[mask])))


def hydro_projection(f: PhaseGrid, f_inf: PhaseGrid, params: ModelParams | None = None):
    """Norms of ``Pi g`` and ``(1 - Pi) g`` for ``g = f / f_inf - 1``.

    ``Pi`` averages over v against ``f_inf`` using the same quadrature weights
    as the norm, so it is an exact orthogonal projection of the discrete
    inner product and the two squared norms add up to ``l2mu_distance^2``.
    """
    mask = _core_mask(f_inf)
    wt = np.where(mask, _weights2d(f) * f_inf.values, 0.0)
    g = np.zeros_like(f.values)
    g[mask] = f.values[mask] / f_inf.values[mask] - 1.0
    col = wt.sum(axis=1)
    safe = np.where(col > 0, col, 1.0)
    pi_g = np.where(col > 0, (wt * g).sum(axis=1) / safe, 0.0)[:, None] * np.ones_like(g)
    rest = g - pi_g
    return (math.sqrt(float(np.sum(wt * pi_g ** 2))),
            math.sqrt(float(np.sum(wt * rest ** 2))))


def fit_decay_rate(series) -> tuple[float, float]:
    """Rate ``-slope`` of ``log(value)`` against ``t`` over the tail half.

    Returns ``(lambda, r_squared)``; ``r_squared`` is 1 for an exact fit.
    """
    arr = np.asarray(list(series), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 10:
        raise ValueError("need at least 10 (t, value) samples")
    if np.any(~(arr[:, 1] > 0)):
        raise ValueError("decay fit needs strictly positive values")
    tail = arr[arr.shape[0] // 2:]
    t, y = tail[:, 0], np.log(tail[:, 1])
    tc = t - t.mean()
    slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
    resid = y - (y.mean() + slope * tc)
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(np.dot(y, y))) else 1.0 - ss_res / ss_tot
    return -slope, r2


def moments(g: PhaseGrid) -> dict:
    """Mass, means, variances and covariance by trapezoid quadrature."""
    X, V = g.x[:, None], g.v[None, :]
    f = g.values
    m = grid_integral(g)
    mx = grid_integral(g, X * f) / m
    mv = grid_integral(g, V * f) / m
    vx = grid_integral(g, (X - mx) ** 2 * f) / m
    vv = grid_integral(g, (V - mv) ** 2 * f) / m
    cxv = grid_integral(g, (X - mx) * (V - mv) * f) / m
    return {"mass": m, "mean_x": mx, "mean_v": mv, "var_x": max(vx, 0.0),
            "var_v": max(vv, 0.0), "cov_xv": cxv}


def lp_norms(g: PhaseGrid) -> dict:
    f = g.values
    return {1: grid_integral(g, np.abs(f)), 2: math.sqrt(grid_integral(g, f * f)),
            math.inf: float(np.max(np.abs(f)))}


def diag_record(g: PhaseGrid, t: float, report: EntropyReport, de_dt: float,
                f_inf: PhaseGrid | None = None) -> DiagRecord:
    """Assemble a :class:`DiagRecord`; ``de_dt`` is the caller's time derivative."""
    mom = moments(g)
    cov = mom["cov_xv"]
    lim = math.sqrt(mom["var_x"] * mom["var_v"])
    cov = min(max(cov, -lim), lim)
    return DiagRecord(t=t, mass=mom["mass"], entropy=report.entropy,
                      dissipation_lhs=de_dt + report.fisher,
                      dissipation_rhs=report.odd_flux,
                      mean_x=mom["mean_x"], mean_v=mom["mean_v"], var_x=mom["var_x"],
                      var_v=mom["var_v"], cov_xv=cov,
                      l2mu_dist=math.nan if f_inf is None else l2mu_distance(g, f_inf),
                      lp_norms=lp_norms(g))


def time_derivative(ts, ys) -> np.ndarray:
    """Second-order finite differences on a possibly non-uniform time grid."""
    ts, ys = np.asarray(ts, float), np.asarray(ys, float)
    if ts.size < 2:
        return np.full(ts.size, math.nan)
    if ts.size == 2:
        d = (ys[1] - ys[0]) / (ts[1] - ts[0])
        return np.array([d, d])
    return np.gradient(ys, ts, edge_order=2)


def continuity_residual(rho_prev, rho_next, j_mid, dt: float) -> float:
    """Sup norm of ``d_t rho + d_x j`` from centred differences.

    ``rho_prev``/``rho_next`` are profiles at ``t -/+ dt`` and ``j_mid`` the
    current at ``t``.
    """
    drho = (rho_next.values - rho_prev.values) / (2 * dt)
    dj = np.gradient(j_mid.values, j_mid.dx, edge_order=2)
    return float(np.max(np.abs(drho + dj)))
