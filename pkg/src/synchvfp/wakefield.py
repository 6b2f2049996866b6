"""Interaction kernels and the mean-field force.

Includes the exact on-orbit potential of a charge on a circular orbit, its
ultra-relativistic free-space limit ``K_fs`` (supported on ``mu > 0``), and
generic even or tabulated kernels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import fftconvolve

from .model import Profile1D, trapezoid_weights

logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-4
# beyond this asinh(mu) the cosh/sinh ratios are replaced by their exponential form
_LARGE_U = 20.0


def _kfs_positive(mu: np.ndarray) -> np.ndarray:
    u = np.arcsinh(mu)
    small = mu < SERIES_THRESHOLD
    big = u > _LARGE_U
    mid = ~(small | big)
    out = np.empty_like(mu)
    m = mu[small]
    out[small] = m * (8 / 9 - 112 / 243 * m * m + 2240 / 6561 * m ** 4)
    um = u[mid]
    # cosh(5u/3) - cosh(u) = 2 sinh(4u/3) sinh(u/3)
    out[mid] = 4 * np.sinh(4 * um / 3) * np.sinh(um / 3) / np.sinh(2 * um)
    ub = u[big]
    out[big] = 2 * (np.exp(-ub / 3) - np.exp(-ub))
    return out


def kfs_eval(mu):
    """Free-space kernel ``K_fs(mu)``; zero for ``mu <= 0``."""
    mu = np.asarray(mu, dtype=float)
    out = np.zeros_like(mu)
    pos = mu > 0
    out[pos] = _kfs_positive(mu[pos])
    return out[()] if out.ndim == 0 else out


def _dkfs_positive(mu: np.ndarray) -> np.ndarray:
    u = np.arcsinh(mu)
    small = mu < SERIES_THRESHOLD
    big = u > _LARGE_U
    mid = ~(small | big)
    out = np.empty_like(mu)
    m2 = mu[small] ** 2
    out[small] = 8 / 9 - 112 / 81 * m2 + 11200 / 6561 * m2 * m2
    um = u[mid]
    a, b, s2 = np.sinh(4 * um / 3), np.sinh(um / 3), np.sinh(2 * um)
    dnum = 4 * (4 / 3 * np.cosh(4 * um / 3) * b + a * np.cosh(um / 3) / 3)
    dk_du = dnum / s2 - 8 * a * b * np.cosh(2 * um) / (s2 * s2)
    out[mid] = dk_du / np.cosh(um)  # d mu / du = cosh u
    ub = u[big]
    out[big] = 2 * (np.exp(-ub) - np.exp(-ub / 3) / 3) / np.cosh(ub)
    return out


def kfs_deriv(mu):
    """``d K_fs / d mu``; right limit ``8/9`` at ``mu = 0``, zero for ``mu < 0``."""
    mu = np.asarray(mu, dtype=float)
    out = np.zeros_like(mu)
    pos = mu >= 0
    out[pos] = _dkfs_positive(mu[pos])
    return out[()] if out.ndim == 0 else out


def _kfs_sup() -> float:
    res = minimize_scalar(lambda m: -float(kfs_eval(m)), bounds=(0.5, 6.0), method="bounded",
                          options={"xatol": 1e-10})
    return -res.fun


#: sup of K_fs over the real line, attained near mu = 2.706
KFS_MAX = _kfs_sup()
#: sup of |dK_fs/dmu|, the right limit at 0
DKFS_MAX = 8.0 / 9.0


# --- exact orbit potential ---------------------------------------------------

@dataclass(frozen=True)
class ExactOrbitPotential:
    """On-orbit potential of a charge moving at speed ``beta`` on a circle."""

    beta: float
    gamma: float

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        # beta is a rounded double: near beta = 1 it fixes gamma only to ~gamma^2 eps
        tol = 1e-14 + 4 * np.finfo(float).eps * self.gamma ** 2
        if abs(self.gamma * math.sqrt((1 - self.beta) * (1 + self.beta)) - 1) > tol:
            raise ValueError("gamma inconsistent with beta")

    @classmethod
    def from_gamma(cls, gamma: float) -> "ExactOrbitPotential":
        if not gamma >= 1:
            raise ValueError("gamma >= 1 required")
        beta = math.sqrt(-math.expm1(-2 * math.log(gamma)))  # sqrt(1 - 1/gamma^2)
        return cls(beta, float(gamma))

    @classmethod
    def from_beta(cls, beta: float) -> "ExactOrbitPotential":
        return cls(beta, 1 / math.sqrt((1 - beta) * (1 + beta)))

    @property
    def one_minus_beta(self) -> float:
        # 1 - beta = 1 / (gamma^2 (1 + beta)); avoids cancellation near beta = 1
        return 1.0 / (self.gamma ** 2 * (1 + self.beta))

    @property
    def one_minus_beta2(self) -> float:
        return 1.0 / self.gamma ** 2


def _a_minus_sin(a: float) -> float:
    """``a - sin(a)`` without cancellation for small ``a``."""
    if abs(a) < 0.1:
        a2 = a * a
        return a * a2 * (1 / 6 - a2 * (1 / 120 - a2 * (1 / 5040 - a2 / 362880)))
    return a - math.sin(a)


def _xi_of_alpha(a: float, beta: float, omb: float) -> float:
    # xi = a - beta |sin a|, evaluated as (1 -/+ beta) a +/- beta (a - sin a)
    if a >= 0:
        return omb * a + beta * _a_minus_sin(a)
    return (1 + beta) * a - beta * _a_minus_sin(a)


def retarded_angle(xi: float, beta: float, one_minus_beta: float | None = None,
                   max_iter: int = 200) -> float:
    """Solve ``xi = alpha - beta |sin alpha|`` for the retarded angle.

    Safeguarded Newton on the branch ``sign(alpha) = sign(xi)``, where the
    map is strictly increasing; bisection steps keep the iterate bracketed.
    """
    xi = float(xi)
    if not -math.pi < xi < math.pi:
        raise ValueError("xi must lie in (-pi, pi)")
    if xi == 0:
        return 0.0
    omb = 1 - beta if one_minus_beta is None else one_minus_beta
    sgn = 1.0 if xi > 0 else -1.0
    lo, hi = (0.0, math.pi) if xi > 0 else (-math.pi, 0.0)
    # starting guess: linear regime or cubic regime, whichever is smaller
    if xi > 0:
        a = min(xi / omb if omb > 0 else math.inf, (6 * xi) ** (1 / 3), 0.999 * math.pi)
    else:
        a = max(xi / (1 + beta), -0.999 * math.pi)
    for _ in range(max_iter):
        r = _xi_of_alpha(a, beta, omb) - xi
        if r == 0:
            return a
        if r > 0:
            hi = a
        else:
            lo = a
        d = 1 - sgn * beta * math.cos(a)
        if sgn > 0 and a < 0.5:
            d = omb + 2 * beta * math.sin(0.5 * a) ** 2
        step = r / d if d > 0 else math.inf
        nxt = a - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - a) <= 4e-16 * abs(a) or hi - lo <= 4e-16 * max(abs(lo), abs(hi)):
            return nxt
        a = nxt
    raise RuntimeError(f"retarded_angle did not converge for xi={xi}, beta={beta}")


def potential_exact(pot: ExactOrbitPotential, xi: float):
    """Return ``(V, V_C, V_S)`` at observation angle ``xi``.

    ``V_C`` is the singular Coulomb part and ``V_S`` the radiation-reaction
    part; both are evaluated in a cancellation-free arrangement so that the
    ultra-relativistic regime (``xi ~ gamma^-3``) keeps full precision.
    """
    xi = float(xi)
    if xi == 0:
        raise ValueError("on-particle singularity at xi = 0")
    if not abs(xi) < math.pi / 2:
        raise ValueError("|xi| < pi/2 required")
    beta, omb, omb2 = pot.beta, pot.one_minus_beta, pot.one_minus_beta2
    a = retarded_angle(xi, beta, omb)
    sx = abs(math.sin(xi))
    sa = math.sin(a)
    # |sin a| - beta sin a cos a = |sin a| (1 - beta sgn(a) cos a)
    if a > 0:
        fac = omb + 2 * beta * math.sin(0.5 * a) ** 2
    else:
        fac = 1 + beta * math.cos(a)
    den = abs(sa) * fac
    num = omb2 * (sx - den) + 2 * beta * beta * sa * sa * sx
    v_s = num / (2 * sx * den)
    v_c = omb2 / (2 * sx)
    return v_c + v_s, v_c, v_s


# --- kernels -----------------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    """Interaction potential ``K`` with sup-norm metadata.

    Build with :func:`free_space_kernel`, :func:`tabulated_kernel` or
    :func:`analytic_even_kernel`.
    """

    kind: str
    params: dict
    k_inf_norm: float
    dk_inf_norm: float
    is_even: bool
    table: Profile1D | None = field(default=None, repr=False)
    table_d: Profile1D | None = field(default=None, repr=False)


def free_space_kernel(scale_amp: float = 1.0, scale_len: float = 1.0) -> Kernel:
    """``K(x) = A K_fs(x / l)``."""
    if not (scale_amp > 0 and scale_len > 0):
        raise ValueError("free-space kernel needs scale_amp > 0 and scale_len > 0")
    # tiny margins keep the stored norms above any sampled value
    return Kernel("free_space", {"scale_amp": float(scale_amp), "scale_len": float(scale_len)},
                  k_inf_norm=scale_amp * KFS_MAX * (1 + 1e-12),
                  dk_inf_norm=scale_amp / scale_len * DKFS_MAX * (1 + 1e-12),
                  is_even=False)


_ANALYTIC = {
    # name: (K, dK, sup|K|, sup|dK|) for unit amplitude and length
    "gaussian_well": (lambda x: np.exp(-x * x), lambda x: -2 * x * np.exp(-x * x),
                      1.0, math.sqrt(2 / math.e)),
    "lorentzian": (lambda x: 1 / (1 + x * x), lambda x: -2 * x / (1 + x * x) ** 2,
                   1.0, 9 / (8 * math.sqrt(3))),
}


def analytic_even_kernel(name: str = "gaussian_well", scale_amp: float = 1.0,
                         scale_len: float = 1.0) -> Kernel:
    """Even test kernel ``A k(x / l)`` with ``k`` one of ``gaussian_well``, ``lorentzian``."""
    if name not in _ANALYTIC:
        raise ValueError(f"unknown analytic kernel {name!r}; choose from {sorted(_ANALYTIC)}")
    if not (scale_amp > 0 and scale_len > 0):
        raise ValueError("analytic kernel needs scale_amp > 0 and scale_len > 0")
    _, _, kmax, dkmax = _ANALYTIC[name]
    return Kernel("analytic_even", {"name": name, "scale_amp": float(scale_amp),
                                    "scale_len": float(scale_len)},
                  k_inf_norm=scale_amp * kmax * (1 + 1e-12),
                  dk_inf_norm=scale_amp / scale_len * dkmax * (1 + 1e-12),
                  is_even=True)


def tabulated_kernel(table: Profile1D, table_d: Profile1D) -> Kernel:
    """Kernel given by samples of ``K`` and ``dK/dx``, linearly interpolated."""
    for p in (table, table_d):
        if np.isnan(p.values).any():
            raise ValueError("NaN in kernel table")
    if (table.x_min, table.x_max) != (table_d.x_min, table_d.x_max):
        raise ValueError("kernel tables must share extents")
    sym = (np.isclose(table.x_min, -table.x_max, rtol=0, atol=1e-14)
           and np.allclose(table.values, table.values[::-1], rtol=0, atol=1e-14))
    return Kernel("tabulated", {}, k_inf_norm=float(np.max(np.abs(table.values))),
                  dk_inf_norm=float(np.max(np.abs(table_d.values))),
                  is_even=bool(sym), table=table, table_d=table_d)


def sample_kernel_table(k: Kernel, x_min: float, x_max: float, n: int) -> Kernel:
    """Tabulate any kernel on ``n`` nodes of ``[x_min, x_max]``."""
    xs = np.linspace(x_min, x_max, n)
    return tabulated_kernel(Profile1D(x_min, x_max, kernel_eval(k, xs)),
                            Profile1D(x_min, x_max, kernel_deriv(k, xs)))


def _table_eval(p: Profile1D, x):
    return np.interp(x, p.x, p.values, left=0.0, right=0.0)


def kernel_eval(k: Kernel, x):
    x = np.asarray(x, dtype=float)
    if k.kind == "free_space":
        return k.params["scale_amp"] * kfs_eval(x / k.params["scale_len"])
    if k.kind == "analytic_even":
        f = _ANALYTIC[k.params["name"]][0]
        return k.params["scale_amp"] * f(x / k.params["scale_len"])
    if k.kind == "tabulated":
        return _table_eval(k.table, x)
    raise ValueError(f"unknown kernel kind {k.kind!r}")


def kernel_deriv(k: Kernel, x):
    x = np.asarray(x, dtype=float)
    if k.kind == "free_space":
        a, ell = k.params["scale_amp"], k.params["scale_len"]
        return a / ell * kfs_deriv(x / ell)
    if k.kind == "analytic_even":
        f = _ANALYTIC[k.params["name"]][1]
        a, ell = k.params["scale_amp"], k.params["scale_len"]
        return a / ell * f(x / ell)
    if k.kind == "tabulated":
        return _table_eval(k.table_d, x)
    raise ValueError(f"unknown kernel kind {k.kind!r}")


def _deriv_limits_at_zero(k: Kernel) -> tuple[float, float]:
    """Left and right limits of ``dK/dx`` at the origin."""
    if k.kind == "free_space":
        return 0.0, float(kernel_deriv(k, 0.0))
    val = float(kernel_deriv(k, 0.0))
    return val, val


def even_odd_split(k: Kernel, x):
    """``(K_e(x), K_o(x))`` with ``K_e + K_o = K``."""
    kp, km = kernel_eval(k, x), kernel_eval(k, -np.asarray(x, dtype=float))
    return 0.5 * (kp + km), 0.5 * (kp - km)


def displacement_samples(k: Kernel, dx: float, n: int, which: str = "deriv") -> np.ndarray:
    """Samples at displacements ``m dx``, ``m = -(n-1) .. n-1``.

    ``which`` selects ``value``, ``deriv`` (dK/dx) or ``odd_deriv``
    (d K_o/dx). Derivative jumps at 0 take the mean of the one-sided limits,
    which keeps trapezoid convolutions second order.
    """
    d = dx * np.arange(-(n - 1), n)
    if which == "value":
        return kernel_eval(k, d)
    left, right = _deriv_limits_at_zero(k)
    if which == "deriv":
        out = kernel_deriv(k, d)
        out[n - 1] = 0.5 * (left + right)
    elif which == "odd_deriv":
        # K_o' (x) = (K'(x) + K'(-x)) / 2 is even
        out = 0.5 * (kernel_deriv(k, d) + kernel_deriv(k, -d))
        out[n - 1] = 0.5 * (left + right)
    else:
        raise ValueError(f"unknown sample kind {which!r}")
    if k.kind == "tabulated":
        outside = (d < k.table.x_min) | (d > k.table.x_max)
        if outside.any():
            logger.warning("%d displacement samples outside the kernel table treated as 0",
                           int(outside.sum()))
    return out


def lattice_convolve(samples: np.ndarray, weighted: np.ndarray, dx: float,
                     method: str = "direct") -> np.ndarray:
    """``out_i = dx * sum_j samples[i - j + n - 1] * weighted_j``."""
    n = weighted.size
    if method == "fft":
        return dx * fftconvolve(weighted, samples, mode="full")[n - 1:2 * n - 1]
    if method != "direct":
        raise ValueError(f"unknown convolution method {method!r}")
    idx = np.arange(n)[:, None] - np.arange(n)[None, :] + n - 1
    return dx * (samples[idx] @ weighted)


def force_field(rho: Profile1D, k: Kernel, current: float, method: str = "direct",
                dk_samples: np.ndarray | None = None) -> Profile1D:
    """Mean-field force ``F = -I dK/dx * rho`` by trapezoid quadrature.

    ``method='fft'`` evaluates the same lattice sum as a discrete linear
    convolution. ``dk_samples`` may carry precomputed displacement samples.
    """
    if current == 0:
        return rho.with_values(np.zeros(rho.n))
    if dk_samples is None:
        dk_samples = displacement_samples(k, rho.dx, rho.n, "deriv")
    w = trapezoid_weights(rho.n) * rho.values
    return rho.with_values(-current * lattice_convolve(dk_samples, w, rho.dx, method))
