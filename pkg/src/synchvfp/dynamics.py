"""Strang-split grid solver and the Langevin particle twin."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from . import diagnostics as dg
from .model import (GridSpec, ModelParams, PhaseGrid, Profile1D, SolverFault, boundary_mass,
                    grid_mass, marginal_density)
from .propagator import Propagator, fft_workers, linear_step_grid, linear_step_particles, \
    make_propagator
from .wakefield import Kernel, displacement_samples, force_field

logger = logging.getLogger(__name__)

#: escape box for particles, in units of the configured domain
SENTINEL_FACTOR = 10.0


def default_dt(params: ModelParams) -> float:
    return min(0.01 / params.nu, 0.1 / math.sqrt(params.alpha))


# --- grid solver -----------------------------------------------------------

@dataclass(frozen=True)
class GridSolverState:
    grid: PhaseGrid
    t: float
    params: ModelParams
    kernel: Kernel
    dt: float
    prop_half: Propagator
    step_count: int = 0
    force_samples: np.ndarray | None = field(default=None, repr=False)


def make_state(grid: PhaseGrid, params: ModelParams, kernel: Kernel, dt: float | None = None,
               t: float = 0.0) -> GridSolverState:
    """Fresh solver state; ``dt`` defaults to :func:`default_dt`."""
    dt = default_dt(params) if dt is None else float(dt)
    if not dt > 0:
        raise ValueError("dt > 0 required")
    samples = displacement_samples(kernel, grid.dx, grid.nx, "deriv")
    return GridSolverState(grid, t, params, kernel, dt, make_propagator(params, 0.5 * dt),
                           0, samples)


def vlasov_kick(grid: PhaseGrid, F: Profile1D, dt: float) -> PhaseGrid:
    """Solve ``d_t f + F(x) d_v f = 0`` exactly over ``dt``.

    Each x row is translated by ``F(x) dt`` in v with a Fourier phase
    shift, which conserves every row's mass and reproduces integer-cell
    shifts exactly.
    """
    if F.n != grid.nx:
        raise ValueError("force must live on the grid's x-lattice")
    shift = F.values * dt
    if np.all(shift == 0):
        return grid
    if np.max(np.abs(shift)) > 0.25 * (grid.v_max - grid.v_min):
        raise SolverFault("kick CFL violated")
    k = 2 * np.pi * sfft.fftfreq(grid.nv, d=grid.dv)
    phase = np.exp(-1j * shift[:, None] * k[None, :])
    if grid.nv % 2 == 0:
        # Nyquist mode: keep the result real
        phase[:, grid.nv // 2] = np.cos(shift * k[grid.nv // 2])
    wk = fft_workers()
    out = sfft.ifft(sfft.fft(grid.values, axis=1, workers=wk) * phase, axis=1, workers=wk).real
    return grid.with_values(out)


def _positivity(values: np.ndarray, where: str) -> np.ndarray:
    vmax = float(np.max(np.abs(values)))
    vmin = float(np.min(values))
    if vmin >= 0:
        return values
    tol = 1e-12 * vmax
    if vmin < -tol:
        raise SolverFault(f"negativity {vmin:.3e} below -1e-12*max f after {where}")
    count = int(np.sum(values < 0))
    logger.debug("zeroed %d negative samples (min %.3e) after %s", count, vmin, where)
    return np.maximum(values, 0.0)


def _force(state: GridSolverState, grid: PhaseGrid) -> Profile1D:
    return force_field(marginal_density(grid), state.kernel, state.params.current,
                       dk_samples=state.force_samples)


def _kick(state: GridSolverState, grid: PhaseGrid) -> PhaseGrid:
    if state.params.current == 0:
        return grid
    return vlasov_kick(grid, _force(state, grid), state.dt)


def strang_step(state: GridSolverState) -> GridSolverState:
    """Half linear step, mean-field kick over ``dt``, half linear step."""
    g = linear_step_grid(state.grid, state.prop_half)
    g = _kick(state, g)
    g = linear_step_grid(g, state.prop_half)
    g = g.with_values(_positivity(g.values, f"step {state.step_count + 1}"))
    return dataclasses.replace(state, grid=g, t=state.t + state.dt,
                               step_count=state.step_count + 1)


def _fused_block(state: GridSolverState, nsteps: int, prop_full: Propagator) -> GridSolverState:
    """``nsteps`` Strang steps with interior half steps merged into full ones."""
    g = linear_step_grid(state.grid, state.prop_half)
    for i in range(nsteps):
        g = _kick(state, g)
        last = i == nsteps - 1
        g = linear_step_grid(g, state.prop_half if last else prop_full)
        g = g.with_values(_positivity(g.values, f"step {state.step_count + i + 1}"))
    return dataclasses.replace(state, grid=g, t=state.t + nsteps * state.dt,
                               step_count=state.step_count + nsteps)


class RunAborted(SolverFault):
    """Solver fault during :func:`run_grid`; keeps the records made so far."""

    def __init__(self, msg: str, records: list):
        super().__init__(msg)
        self.records = records


def run_grid(state: GridSolverState, t_end: float, diag_every: int = 1,
             reference: PhaseGrid | None = None, observer=None, fuse: bool = True):
    """Advance to ``t_end`` and sample diagnostics every ``diag_every`` steps.

    The number of steps is ``round((t_end - t) / dt)``. With ``fuse`` the
    two half steps between kicks are merged into one full linear step
    unless a diagnostic falls in between (the flow is a semigroup, so the
    result is unchanged up to rounding). ``observer(state)`` is called at
    every diagnostic time. Returns the final state and the records.
    """
    if not t_end > state.t:
        raise ValueError("t_end > t required")
    if diag_every < 1:
        raise ValueError("diag_every >= 1 required")
    nsteps = int(round((t_end - state.t) / state.dt))
    if nsteps < 1:
        raise ValueError("t_end - t shorter than one step")
    samples = dg.kernel_samples(state.kernel, state.grid.dx, state.grid.nx)
    prop_full = make_propagator(state.params, state.dt) if fuse else None
    snaps = []

    def sample(st):
        rep = dg.free_energy(st.grid, st.params, st.kernel, samples)
        snaps.append((st.t, st.grid, rep))
        if observer is not None:
            observer(st)
        total = abs(grid_mass(st.grid))
        bm = boundary_mass(st.grid)
        if total > 0 and bm > 1e-10 * total:
            logger.warning("t=%.6g: boundary mass %.3e of total %.6g", st.t, bm, total)

    sample(state)
    done = 0
    try:
        while done < nsteps:
            block = min(diag_every, nsteps - done)
            if fuse and block > 1:
                state = _fused_block(state, block, prop_full)
            else:
                for _ in range(block):
                    state = strang_step(state)
            done += block
            sample(state)
    except SolverFault as exc:
        raise RunAborted(str(exc), _records(snaps, reference)) from exc
    return state, _records(snaps, reference)


def _records(snaps, reference):
    if not snaps:
        return []
    ts = [s[0] for s in snaps]
    de = dg.time_derivative(ts, [s[2].entropy for s in snaps])
    return [dg.diag_record(g, t, rep, float(d), reference)
            for (t, g, rep), d in zip(snaps, de)]


# --- particles -------------------------------------------------------------

@dataclass(frozen=True)
class Ensemble:
    """Particle coordinates with per-particle weight ``mass / N``."""

    xs: np.ndarray
    vs: np.ndarray
    seed: int
    weight: float
    step: int = 0

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        vs = np.asarray(self.vs, dtype=float)
        if xs.shape != vs.shape or xs.ndim != 1:
            raise ValueError("xs and vs must be 1D arrays of equal length")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(vs))):
            raise ValueError("particle coordinates must be finite")
        if not self.weight > 0:
            raise ValueError("particle weight > 0 required")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "vs", vs)

    @property
    def n(self) -> int:
        return self.xs.size

    @property
    def mass(self) -> float:
        return self.weight * self.n


def step_rng(seed: int, step: int, substep: int) -> np.random.Generator:
    """Counter-based stream for one sub-step; independent of thread count."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, substep])))


def sample_ensemble(n: int, params: ModelParams, seed: int, x0: float = 0.0, v0: float = 0.0,
                    var_x: float | None = None, var_v: float | None = None) -> Ensemble:
    """Independent Gaussian particles; defaults to the ``I = 0`` equilibrium."""
    rng = step_rng(seed, -1 % 2 ** 32, 0)
    sx = math.sqrt(params.theta / params.alpha if var_x is None else var_x)
    sv = math.sqrt(params.theta if var_v is None else var_v)
    z = rng.standard_normal((2, n))
    return Ensemble(x0 + sx * z[0], v0 + sv * z[1], seed, params.mass / n)


def sample_from_grid(g: PhaseGrid, n: int, seed: int, mass: float | None = None) -> Ensemble:
    """Draw particles from a non-negative grid density.

    A cell is picked with probability proportional to its value and the
    particle is placed uniformly inside it.
    """
    rng = step_rng(seed, -1 % 2 ** 32, 1)
    p = np.maximum(g.values, 0.0).ravel()
    p = p / p.sum()
    cells = rng.choice(p.size, size=n, p=p)
    ix, iv = np.divmod(cells, g.nv)
    u = rng.random((2, n)) - 0.5
    xs = g.x[ix] + u[0] * g.dx
    vs = g.v[iv] + u[1] * g.dv
    m = grid_mass(g) if mass is None else mass
    return Ensemble(xs, vs, seed, m / n)


def deposit_density(ens: Ensemble, spec: GridSpec) -> Profile1D:
    """Cloud-in-cell deposit of particle weights onto the grid's x nodes.

    Returns a density per unit length; particles whose shape function
    leaves the node range go to an overflow tally (warned above
    ``1e-6 * mass``).
    """
    lat = spec.x_lattice()
    n = lat.n
    s = (ens.xs - lat.x_min) / lat.dx
    i0 = np.floor(s).astype(np.int64)
    frac = s - i0
    inside = (i0 >= 0) & (i0 < n - 1)
    inside |= (i0 == n - 1) & (frac == 0)
    i0c, fr = i0[inside], frac[inside]
    dens = np.bincount(i0c, weights=1.0 - fr, minlength=n + 1)
    dens += np.bincount(i0c + 1, weights=fr, minlength=n + 1)
    dens = dens[:n] * ens.weight
    overflow = ens.weight * int(np.count_nonzero(~inside))
    if overflow > 1e-6 * ens.mass:
        logger.warning("deposit overflow %.3e exceeds 1e-6 of mass %.6g", overflow, ens.mass)
    # trapezoid weight of an end node is half a cell
    w = np.full(n, lat.dx)
    w[0] = w[-1] = 0.5 * lat.dx
    return lat.with_values(dens / w)


def langevin_step(ens: Ensemble, params: ModelParams, kernel: Kernel, dt: float,
                  spec: GridSpec, prop_half: Propagator | None = None,
                  dk_samples: np.ndarray | None = None, noise: bool = True) -> Ensemble:
    """One Strang step of the mean-field Langevin dynamics.

    Exact Gaussian transition over ``dt/2``, cloud-in-cell density, kick
    ``v += F(x) dt``, exact transition over ``dt/2``. Random numbers come
    from :func:`step_rng` keyed on ``(seed, step, substep)``.
    """
    if not dt > 0:
        raise ValueError("dt > 0 required")
    if prop_half is None:
        prop_half = make_propagator(params, 0.5 * dt)
    e = linear_step_particles(ens, prop_half, step_rng(ens.seed, ens.step, 0), noise)
    if params.current != 0:
        rho = deposit_density(e, spec)
        F = force_field(rho, kernel, params.current, dk_samples=dk_samples)
        kick = np.interp(e.xs, F.x, F.values, left=0.0, right=0.0) * dt
        e = dataclasses.replace(e, vs=e.vs + kick)
    e = linear_step_particles(e, prop_half, step_rng(ens.seed, ens.step, 1), noise)
    hx = 0.5 * (spec.x_max - spec.x_min) * SENTINEL_FACTOR
    hv = 0.5 * (spec.v_max - spec.v_min) * SENTINEL_FACTOR
    cx = 0.5 * (spec.x_max + spec.x_min)
    cv = 0.5 * (spec.v_max + spec.v_min)
    if np.any(np.abs(e.xs - cx) > hx) or np.any(np.abs(e.vs - cv) > hv):
        raise SolverFault("particle escaped the 10x simulation box")
    return dataclasses.replace(e, step=ens.step + 1)


def run_particles(ens: Ensemble, params: ModelParams, kernel: Kernel, dt: float, t_end: float,
                  spec: GridSpec, observer=None, observe_every: int = 1) -> Ensemble:
    """``round(t_end / dt)`` Langevin steps; ``observer(ens, t)`` on a stride."""
    nsteps = int(round(t_end / dt))
    prop_half = make_propagator(params, 0.5 * dt)
    lat = spec.x_lattice()
    dk = displacement_samples(kernel, lat.dx, lat.n, "deriv")
    if observer is not None:
        observer(ens, 0.0)
    for k in range(nsteps):
        ens = langevin_step(ens, params, kernel, dt, spec, prop_half, dk)
        if observer is not None and (k + 1) % observe_every == 0:
            observer(ens, (k + 1) * dt)
    return ens


def particle_moments(ens: Ensemble) -> dict:
    xs, vs = ens.xs, ens.vs
    mx, mv = float(xs.mean()), float(vs.mean())
    dxs, dvs = xs - mx, vs - mv
    return {"mass": ens.mass, "mean_x": mx, "mean_v": mv, "var_x": float(np.mean(dxs ** 2)),
            "var_v": float(np.mean(dvs ** 2)), "cov_xv": float(np.mean(dxs * dvs))}
