"""Exact transition of the linear (I = 0) kinetic Fokker-Planck flow.

For a lag ``tau`` the linear flow maps a point mass at ``z0 = (y, w)`` to the
Gaussian with mean ``B(tau) z0`` and covariance ``Sigma(tau)``. On grids the
transition is applied as a mass-preserving pushforward by ``B`` followed by
a Gaussian blur; on particles it is sampled directly.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .model import ModelParams, PhaseGrid, SolverFault, GridSpec, boundary_mass, grid_mass

import logging

logger = logging.getLogger(__name__)

# |omega^2| below this switches s(tau), c(tau) to their Taylor expansions
CRITICAL_EPS = 1e-12
# tau * (nu + sqrt(alpha)) below this evaluates Sigma by quadrature (no cancellation)
_SIGMA_QUAD_LIMIT = 1.0
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def fft_workers() -> int:
    """Worker count for spectral transforms, capped by ``VFP_THREADS``."""
    try:
        return max(1, int(os.environ.get("VFP_THREADS", "1")))
    except ValueError:
        return 1


def damped_sc(params: ModelParams, tau):
    """Return ``exp(-nu tau) s(tau)`` and ``exp(-nu tau) c(tau)``.

    ``s = sin(omega tau)/omega`` and ``c = cos(omega tau)`` with
    ``omega^2 = alpha - nu^2``; the overdamped case uses hyperbolic functions
    of ``|omega|`` and the critical case a Taylor expansion.
    """
    tau = np.asarray(tau, dtype=float)
    nu = params.nu
    w2 = params.alpha - nu * nu
    decay = np.exp(-nu * tau)
    if abs(w2) < CRITICAL_EPS:
        z = w2 * tau * tau
        s = tau * (1 - z / 6 + z * z / 120)
        c = 1 - z / 2 + z * z / 24
        return decay * s, decay * c
    if w2 > 0:
        om = math.sqrt(w2)
        return decay * np.sin(om * tau) / om, decay * np.cos(om * tau)
    kap = math.sqrt(-w2)
    # e^{-nu t} sinh(k t) = (e^{(k-nu)t} - e^{-(k+nu)t}) / 2, no overflow
    up = np.exp((kap - nu) * tau)
    down = np.exp(-(kap + nu) * tau)
    return (up - down) / (2 * kap), (up + down) / 2


def eval_B(params: ModelParams, tau: float) -> np.ndarray:
    """Mean-transport matrix ``B(tau) = exp(A tau)``, ``A = [[0, 1], [-alpha, -2 nu]]``."""
    if tau < 0:
        raise ValueError("tau >= 0 required")
    es, ec = damped_sc(params, tau)
    es, ec = float(es), float(ec)
    nu, al = params.nu, params.alpha
    return np.array([[ec + nu * es, es], [-al * es, ec - nu * es]])


def _sigma_closed_form(params: ModelParams, tau: float) -> np.ndarray:
    al, nu, th = params.alpha, params.nu, params.theta
    es, ec = (float(a) for a in damped_sc(params, tau))
    m = np.array([[es * es + (nu * es + ec) ** 2 / al, -2 * nu * es * es],
                  [-2 * nu * es * es, al * es * es + (nu * es - ec) ** 2]])
    return np.diag([th / al, th]) - th * m


def _sigma_quadrature(params: ModelParams, tau: float) -> np.ndarray:
    # Sigma = 4 nu theta ∫_0^tau B2(s) B2(s)^T ds with B2 the second column of B(s)
    s = 0.5 * tau * (_GL_NODES + 1)
    es, ec = damped_sc(params, s)
    b2 = np.stack([es, ec - params.nu * es])
    return 4 * params.nu * params.theta * 0.5 * tau * (b2 * _GL_WEIGHTS) @ b2.T


def eval_Sigma(params: ModelParams, tau: float) -> np.ndarray:
    """Covariance ``Sigma(tau)`` of the linear transition density.

    Evaluated from the closed form, except at short lags where the closed
    form cancels catastrophically and the defining integral is used.
    """
    if tau < 0:
        raise ValueError("tau >= 0 required")
    if tau == 0:
        return np.zeros((2, 2))
    if tau * (params.nu + math.sqrt(params.alpha)) <= _SIGMA_QUAD_LIMIT:
        sig = _sigma_quadrature(params, tau)
    else:
        sig = _sigma_closed_form(params, tau)
    sym = 0.5 * (sig[0, 1] + sig[1, 0])
    sig[0, 1] = sig[1, 0] = sym
    return sig


def det_sigma_closed_form(params: ModelParams, tau: float) -> float:
    """``(4 theta^2/alpha) e^{-2 nu tau} (sinh^2(nu tau) - nu^2 s^2(tau))``."""
    nu = params.nu
    es, _ = damped_sc(params, tau)
    esinh = -0.5 * math.expm1(-2 * nu * tau)  # e^{-nu tau} sinh(nu tau)
    return 4 * params.theta ** 2 / params.alpha * (esinh ** 2 - nu * nu * float(es) ** 2)


@dataclass
class Propagator:
    """Exact linear transition for lag ``tau``."""

    params: ModelParams
    tau: float
    b_matrix: np.ndarray
    sigma: np.ndarray
    det_sigma: float
    multiplier_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def cholesky(self) -> np.ndarray:
        """Lower-triangular ``L`` with ``L L^T = Sigma``."""
        return sigma_factor(self.sigma)


def make_propagator(params: ModelParams, tau: float) -> Propagator:
    if not tau > 0:
        raise ValueError("propagator lag tau must be > 0")
    sig = eval_Sigma(params, tau)
    det = float(sig[0, 0] * sig[1, 1] - sig[0, 1] * sig[1, 0])
    return Propagator(params, float(tau), eval_B(params, tau), sig, det)


def sigma_factor(sigma: np.ndarray) -> np.ndarray:
    a = sigma[0, 0]
    if not a > 0:
        raise ValueError("covariance is not positive definite")
    l11 = math.sqrt(a)
    l21 = sigma[1, 0] / l11
    rest = sigma[1, 1] - l21 * l21
    if rest < 0:
        if rest < -1e-14 * sigma[1, 1]:
            raise ValueError("covariance is not positive definite")
        rest = 0.0
    return np.array([[l11, 0.0], [l21, math.sqrt(rest)]])


def eval_G(prop: Propagator, x, y, v, w):
    """Transition density ``G(tau, x, y, v, w)`` from ``(y, w)`` to ``(x, v)``."""
    det = prop.det_sigma
    if not det > 0:
        raise ValueError("det Sigma <= 0; tau must be positive")
    b, s = prop.b_matrix, prop.sigma
    x, y, v, w = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, v, w)))
    m1 = x - (b[0, 0] * y + b[0, 1] * w)
    m2 = v - (b[1, 0] * y + b[1, 1] * w)
    # explicit 2x2 inverse
    q = (s[1, 1] * m1 * m1 - 2 * s[0, 1] * m1 * m2 + s[0, 0] * m2 * m2) / det
    return np.exp(-0.5 * q) / (2 * math.pi * math.sqrt(det))


# --- grids -----------------------------------------------------------------

def _wavenumbers(n: int, length: float) -> np.ndarray:
    return 2 * math.pi * sfft.fftfreq(n, d=length / n)


def dilation_matrix(nodes: np.ndarray, length: float, factor: float) -> np.ndarray:
    """Matrix of the mass-preserving dilation ``h(x) = g(x/d)/d`` about 0.

    Acts on periodic samples at ``nodes``: the Fourier transform of ``g`` is
    evaluated exactly at ``d k`` by trigonometric summation and synthesised
    back, so column sums equal one to rounding.
    """
    n = nodes.size
    k = _wavenumbers(n, length)
    phase = np.exp(1j * np.outer(k, nodes[0] - factor * nodes))
    return sfft.ifft(phase, axis=0, workers=fft_workers()).real


def _ldu(b: np.ndarray):
    a = b[0, 0]
    det = b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0]
    return b[1, 0] / a, (a, det / a), b[0, 1] / a


@dataclass
class _LinearPlan:
    n_sub: int
    shear_x: np.ndarray
    dil_x: np.ndarray
    dil_v: np.ndarray
    shear_v: np.ndarray
    blur: np.ndarray


def _linear_plan(prop: Propagator, spec: GridSpec) -> _LinearPlan:
    key = ("linear", spec)
    plan = prop.multiplier_cache.get(key)
    if plan is not None:
        return plan
    p = prop.params
    rate = math.sqrt(p.alpha) + 2 * p.nu + 1.0
    n_sub = max(1, math.ceil(prop.tau * rate / 0.25))
    b1 = eval_B(p, prop.tau / n_sub)
    low, (d1, d2), up = _ldu(b1)
    lx = spec.x_max - spec.x_min
    lv = spec.v_max - spec.v_min
    kx = _wavenumbers(spec.nx, lx)
    kv = _wavenumbers(spec.nv, lv)
    x, v = spec.x, spec.v
    s = prop.sigma
    blur = np.exp(-0.5 * (s[0, 0] * kx[:, None] ** 2 + 2 * s[0, 1] * kx[:, None] * kv[None, :]
                          + s[1, 1] * kv[None, :] ** 2))
    plan = _LinearPlan(
        n_sub=n_sub,
        shear_x=np.exp(-1j * kx[:, None] * (up * v)[None, :]),
        dil_x=dilation_matrix(x, lx, d1),
        dil_v=dilation_matrix(v, lv, d2),
        shear_v=np.exp(-1j * (low * x)[:, None] * kv[None, :]),
        blur=blur,
    )
    prop.multiplier_cache[key] = plan
    return plan


def _apply_linear(values: np.ndarray, plan: _LinearPlan) -> np.ndarray:
    wk = fft_workers()
    g = values
    for _ in range(plan.n_sub):
        # B = L D U with unit shears L, U; push through U, then D, then L
        g = sfft.ifft(sfft.fft(g, axis=0, workers=wk) * plan.shear_x, axis=0, workers=wk).real
        g = plan.dil_x @ g @ plan.dil_v.T
        g = sfft.ifft(sfft.fft(g, axis=1, workers=wk) * plan.shear_v, axis=1, workers=wk).real
    return sfft.ifft2(sfft.fft2(g, workers=wk) * plan.blur, workers=wk).real


def _padded_spec(spec: GridSpec) -> GridSpec:
    hx = 0.5 * (spec.x_max - spec.x_min)
    hv = 0.5 * (spec.v_max - spec.v_min)
    return GridSpec(spec.x_min - hx, spec.x_max + hx, spec.v_min - hv, spec.v_max + hv,
                    2 * spec.nx, 2 * spec.nv)


def linear_step_grid(g: PhaseGrid, prop: Propagator, pad: bool = False,
                     check_boundary: bool = True) -> PhaseGrid:
    """Advance a grid by the exact linear flow over ``prop.tau``.

    Computes ``e^{2 nu tau} g(B^{-1} z)`` and convolves with the centred
    Gaussian of covariance ``Sigma(tau)`` on the periodic box. With
    ``pad=True`` the work is done on a doubled box (linear convolution).
    """
    spec = g.spec
    if pad:
        big = _padded_spec(spec)
        work = np.zeros(big.shape)
        ox, ov = spec.nx // 2, spec.nv // 2
        work[ox:ox + spec.nx, ov:ov + spec.nv] = g.values
        out = _apply_linear(work, _linear_plan(prop, big))[ox:ox + spec.nx, ov:ov + spec.nv]
    else:
        out = _apply_linear(g.values, _linear_plan(prop, spec))
    if not np.all(np.isfinite(out)):
        raise SolverFault("non-finite values after linear step")
    res = g.with_values(out)
    if check_boundary:
        bm = boundary_mass(res)
        total = abs(grid_mass(res))
        if total > 0 and bm > 1e-10 * total:
            logger.warning("boundary mass %.3e exceeds 1e-10 of total %.6g", bm, total)
    return res


# --- particles -------------------------------------------------------------

def linear_step_particles(ens, prop: Propagator, rng: np.random.Generator | None = None,
                          noise: bool = True):
    """Exact transition sampling ``z <- B z + L xi`` for every particle.

    ``ens`` is any dataclass with ``xs``/``vs`` arrays (see
    :class:`synchvfp.dynamics.Ensemble`). Particle ``i`` consumes the
    ``i``-th pair of normals of ``rng``.
    """
    b = prop.b_matrix
    xs = b[0, 0] * ens.xs + b[0, 1] * ens.vs
    vs = b[1, 0] * ens.xs + b[1, 1] * ens.vs
    if noise:
        if rng is None:
            raise ValueError("rng required when noise is enabled")
        lo = prop.cholesky()
        z = rng.standard_normal((2, ens.xs.size))
        xs = xs + lo[0, 0] * z[0]
        vs = vs + lo[1, 0] * z[0] + lo[1, 1] * z[1]
    return dataclasses.replace(ens, xs=xs, vs=vs)
