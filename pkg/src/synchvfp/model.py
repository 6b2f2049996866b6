"""Parameter records, phase-space containers and quadrature.

All grids are uniform. A :class:`PhaseGrid` stores cell-centred samples
``x_i = x_min + (i + 1/2) dx`` with ``dx = (x_max - x_min) / nx`` (same for
``v``), so that a symmetric box gives a symmetric node set. A
:class:`Profile1D` stores node-inclusive samples on ``[x_min, x_max]`` with
spacing ``(x_max - x_min) / (n - 1)``; the x-lattice of a grid is therefore
the profile ``[x_min + dx/2, x_max - dx/2]`` with ``nx`` points.

Every integral is a composite trapezoid over the sample nodes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

#: relative negativity tolerance; ``f >= -NEG_TOL * max|f|`` is required
NEG_TOL = 1e-12


class SolverFault(RuntimeError):
    """Numerical fault inside a solver (NaN, negativity, blow-up)."""


@dataclass(frozen=True)
class ModelParams:
    """The five dimensionless constants of the model.

    Parameters
    ----------
    alpha : float
        Confinement strength, > 0.
    nu : float
        Damping rate, > 0.
    theta : float
        Temperature / diffusion level, > 0.
    current : float
        Beam current ``I``, >= 0.
    mass : float
        Total mass of the initial datum, > 0.
    """

    alpha: float = 1.0
    nu: float = 1.0
    theta: float = 1.0
    current: float = 0.0
    mass: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "nu", "theta", "mass"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} > 0 required, got {val!r}")
        if not (math.isfinite(self.current) and self.current >= 0):
            raise ValueError(f"current >= 0 required, got {self.current!r}")

    @property
    def thermal_x(self) -> float:
        """Equilibrium width in x, ``sqrt(theta/alpha)``."""
        return math.sqrt(self.theta / self.alpha)

    @property
    def thermal_v(self) -> float:
        return math.sqrt(self.theta)


def _freeze(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def _check_finite(values: np.ndarray, what: str):
    bad = ~np.isfinite(values)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        if len(idx) == 1:
            idx = idx[0]
        raise ValueError(f"non-finite {what} sample at index {idx}")


@dataclass(frozen=True)
class Profile1D:
    """Node-inclusive samples of a line density on ``[x_min, x_max]``."""

    x_min: float
    x_max: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.ndim != 1:
            raise ValueError("Profile1D values must be one-dimensional")
        if self.n < 2:
            raise ValueError("Profile1D needs n >= 2 samples")
        if not self.x_max > self.x_min:
            raise ValueError("x_max > x_min required")
        _check_finite(self.values, "profile")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n)

    def with_values(self, values) -> "Profile1D":
        return Profile1D(self.x_min, self.x_max, values)


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a phase-space grid (no samples)."""

    x_min: float
    x_max: float
    v_min: float
    v_max: float
    nx: int
    nv: int

    def __post_init__(self):
        if self.nx < 2 or self.nv < 2:
            raise ValueError("nx, nv >= 2 required")
        if not (self.x_max > self.x_min and self.v_max > self.v_min):
            raise ValueError("grid extents must be increasing")

    @classmethod
    def centered(cls, params: ModelParams, nx: int = 256, nv: int = 256,
                 box_x: float = 8.0, box_v: float = 8.0) -> "GridSpec":
        """Box of ``±box_x`` / ``±box_v`` thermal widths around the origin."""
        lx = box_x * params.thermal_x
        lv = box_v * params.thermal_v
        return cls(-lx, lx, -lv, lv, int(nx), int(nv))

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.nv

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * (np.arange(self.nx) + 0.5)

    @property
    def v(self) -> np.ndarray:
        return self.v_min + self.dv * (np.arange(self.nv) + 0.5)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nv)

    def x_lattice(self, values=None) -> Profile1D:
        """Profile on the grid's x nodes (zeros unless values given)."""
        vals = np.zeros(self.nx) if values is None else values
        return Profile1D(self.x_min + 0.5 * self.dx, self.x_max - 0.5 * self.dx, vals)

    def sample(self, func) -> "PhaseGrid":
        """Grid of ``func(X, V)`` evaluated on the mesh (x slow)."""
        X, V = np.meshgrid(self.x, self.v, indexing="ij")
        return PhaseGrid.from_spec(self, func(X, V))


@dataclass(frozen=True)
class PhaseGrid:
    """Samples of ``f(t, x, v)``; ``values[i, j] = f(x_i, v_j)``."""

    x_min: float
    x_max: float
    v_min: float
    v_max: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.ndim != 2:
            raise ValueError("PhaseGrid values must be two-dimensional")
        # validates extents and counts
        self.spec
        _check_finite(self.values, "grid")

    @classmethod
    def from_spec(cls, spec: GridSpec, values) -> "PhaseGrid":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != spec.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {spec.shape}")
        return cls(spec.x_min, spec.x_max, spec.v_min, spec.v_max, values)

    @property
    def spec(self) -> GridSpec:
        nx, nv = self.values.shape
        return GridSpec(self.x_min, self.x_max, self.v_min, self.v_max, nx, nv)

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def nv(self) -> int:
        return self.values.shape[1]

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.nv

    @property
    def x(self) -> np.ndarray:
        return self.spec.x

    @property
    def v(self) -> np.ndarray:
        return self.spec.v

    def with_values(self, values) -> "PhaseGrid":
        return PhaseGrid(self.x_min, self.x_max, self.v_min, self.v_max, values)

    def negativity_tolerance(self) -> float:
        return NEG_TOL * float(np.max(np.abs(self.values)))


def trapezoid_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def trapezoid_1d(p: Profile1D) -> float:
    """Composite trapezoid integral of a profile over ``[x_min, x_max]``."""
    vals = p.values
    return float(p.dx * (np.sum(vals[1:-1]) + 0.5 * (vals[0] + vals[-1])))


def _integrate_v(values: np.ndarray, dv: float) -> np.ndarray:
    return dv * (values[:, 1:-1].sum(axis=1) + 0.5 * (values[:, 0] + values[:, -1]))


def grid_integral(g: PhaseGrid, values: np.ndarray | None = None) -> float:
    """2D trapezoid integral of ``values`` (default: the grid samples)."""
    vals = g.values if values is None else values
    col = _integrate_v(vals, g.dv)
    return float(g.dx * (np.sum(col[1:-1]) + 0.5 * (col[0] + col[-1])))


def grid_mass(g: PhaseGrid) -> float:
    """Total mass ``∬ f dx dv``."""
    return grid_integral(g)


def marginal_density(g: PhaseGrid) -> Profile1D:
    """Line density ``rho(x) = ∫ f dv`` on the grid's x-lattice."""
    return g.spec.x_lattice(_integrate_v(g.values, g.dv))


def current_density(g: PhaseGrid) -> Profile1D:
    """Current ``j(x) = ∫ v f dv`` on the grid's x-lattice."""
    return g.spec.x_lattice(_integrate_v(g.values * g.v[None, :], g.dv))


def boundary_mass(g: PhaseGrid, frac: float = 1.0 / 32) -> float:
    """Mass carried by the outer ``frac`` band of the box on every side."""
    bx = max(2, int(round(frac * g.nx)))
    bv = max(2, int(round(frac * g.nv)))
    mask = np.zeros(g.values.shape, dtype=bool)
    mask[:bx, :] = mask[-bx:, :] = True
    mask[:, :bv] = mask[:, -bv:] = True
    return float(np.sum(np.abs(g.values[mask])) * g.dx * g.dv)


def gaussian_grid(spec: GridSpec, params: ModelParams, x0: float = 0.0, v0: float = 0.0,
                  var_x: float | None = None, var_v: float | None = None) -> PhaseGrid:
    """Product Gaussian of mass ``params.mass`` centred at ``(x0, v0)``.

    Defaults to the equilibrium variances ``theta/alpha`` and ``theta``.
    """
    sx2 = params.theta / params.alpha if var_x is None else var_x
    sv2 = params.theta if var_v is None else var_v
    norm = params.mass / (2 * math.pi * math.sqrt(sx2 * sv2))
    return spec.sample(lambda X, V: norm * np.exp(-(X - x0) ** 2 / (2 * sx2)
                                                  - (V - v0) ** 2 / (2 * sv2)))


@dataclass
class DiagRecord:
    """One row of the diagnostics time series."""

    t: float
    mass: float
    entropy: float
    dissipation_lhs: float
    dissipation_rhs: float
    mean_x: float
    mean_v: float
    var_x: float
    var_v: float
    cov_xv: float
    l2mu_dist: float = math.nan
    lp_norms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("DiagRecord mass must be positive")
        if self.var_x < 0 or self.var_v < 0:
            raise ValueError("negative variance in DiagRecord")
        if self.cov_xv ** 2 > self.var_x * self.var_v * (1 + 1e-9) + 1e-300:
            raise ValueError("cov_xv^2 exceeds var_x * var_v in DiagRecord")
