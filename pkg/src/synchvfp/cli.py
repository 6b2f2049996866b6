"""Command-line front end: ``synchvfp <subcommand> [--config FILE] [--key value ...]``.

Configuration is a flat ``key = value`` file; nested keys use dots
(``kernel.kind``). Command-line flags override file values, which override
defaults. Exit status: 0 success, 1 solver fault, 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import logging
import math
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .model import GridSpec, ModelParams, PhaseGrid, Profile1D, SolverFault, gaussian_grid, \
    grid_mass, marginal_density
from .diagnostics import fit_decay_rate
from .haissinski import (UNIQUENESS_CONSTANT, HaissinskiNotConverged, contraction_bound,
                         solve_haissinski, stability_constants, steady_state_2d)
from .wakefield import (ExactOrbitPotential, analytic_even_kernel, free_space_kernel, kfs_deriv,
                        kfs_eval, potential_exact, tabulated_kernel)

logger = logging.getLogger("synchvfp")

SUBCOMMANDS = ("wake", "haissinski", "evolve", "particles", "stability")


class ConfigError(ValueError):
    """Invalid configuration (exit status 2)."""


def _pos(name):
    def check(v):
        if not v > 0:
            raise ConfigError(f"{name} > 0 required, got {v}")
    return check


def _nonneg(name):
    def check(v):
        if not v >= 0:
            raise ConfigError(f"{name} >= 0 required, got {v}")
    return check


def _atleast(name, lo):
    def check(v):
        if v < lo:
            raise ConfigError(f"{name} >= {lo} required, got {v}")
    return check


def _mixing(v):
    if not 0 < v <= 1:
        raise ConfigError(f"mixing must lie in (0, 1], got {v}")


def _choice(name, options):
    def check(v):
        if v not in options:
            raise ConfigError(f"{name} must be one of {', '.join(options)}, got {v!r}")
    return check


# key: (type, default, validator). A default of None means "unset".
KEYS = {
    "subcommand": (str, "evolve", _choice("subcommand", SUBCOMMANDS)),
    "alpha": (float, 1.0, _pos("alpha")),
    "nu": (float, 1.0, _pos("nu")),
    "theta": (float, 1.0, _pos("theta")),
    "current": (float, 0.0, _nonneg("current")),
    "mass": (float, 1.0, _pos("mass")),
    "kernel.kind": (str, "free_space", _choice("kernel.kind",
                                                ("free_space", "analytic_even", "tabulated"))),
    "kernel.name": (str, "gaussian_well", _choice("kernel.name", ("gaussian_well", "lorentzian"))),
    "kernel.scale_amp": (float, 1.0, _pos("kernel.scale_amp")),
    "kernel.scale_len": (float, 1.0, _pos("kernel.scale_len")),
    "kernel.table": (str, "", None),
    "dt": (float, 0.0, _nonneg("dt")),
    "t_end": (float, 5.0, _pos("t_end")),
    "nx": (int, 128, _atleast("nx", 4)),
    "nv": (int, 128, _atleast("nv", 4)),
    "box_x": (float, 8.0, _pos("box_x")),
    "box_v": (float, 8.0, _pos("box_v")),
    "n_particles": (int, 100000, _atleast("n_particles", 1)),
    "seed": (int, 0, _nonneg("seed")),
    "diag_every": (int, 10, _atleast("diag_every", 1)),
    "dump_every": (int, 0, _nonneg("dump_every")),
    "tol": (float, 1e-10, _pos("tol")),
    "max_iter": (int, 500, _atleast("max_iter", 1)),
    "mixing": (float, 0.0, None),
    "starts": (int, 1, _atleast("starts", 1)),
    "init.kind": (str, "gaussian", _choice("init.kind", ("gaussian", "haissinski"))),
    "init.x0": (float, 0.5, None),
    "init.v0": (float, 0.0, None),
    "init.var_x": (float, 0.0, _nonneg("init.var_x")),
    "init.var_v": (float, 0.0, _nonneg("init.var_v")),
    "wake.gamma": (float, 100.0, _atleast("wake.gamma", 1.0)),
    "wake.mu_min": (float, -2.0, None),
    "wake.mu_max": (float, 10.0, None),
    "wake.n": (int, 601, _atleast("wake.n", 2)),
    "run_dir": (str, "", None),
    "output_dir": (str, "out", None),
}
_NOTES = {
    "dt": "0 selects min(0.01/nu, 0.1/sqrt(alpha))",
    "mixing": "0 selects 1 below the uniqueness threshold and 0.2 above",
    "init.var_x": "0 selects theta/alpha",
    "init.var_v": "0 selects theta",
}


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully defaulted run configuration (flat dotted keys)."""

    values: tuple
    defaulted: tuple = dataclasses.field(default=(), compare=False)

    def __getitem__(self, key):
        return dict(self.values)[key]

    @property
    def subcommand(self) -> str:
        return self["subcommand"]

    @property
    def params(self) -> ModelParams:
        return ModelParams(self["alpha"], self["nu"], self["theta"], self["current"], self["mass"])

    @property
    def output_dir(self) -> Path:
        return Path(self["output_dir"])

    def text(self) -> str:
        """Effective configuration in the input file format."""
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.values)

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()


def _render(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, raw) -> object:
    typ = KEYS[key][0]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    try:
        if typ is int:
            f = float(raw)
            if not f.is_integer():
                raise ValueError
            return int(f)
        return typ(str(raw).strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file (``#`` comments allowed)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["run"])


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the optional file and the overrides, then validate.

    Raises
    ------
    ConfigError
        On unknown keys, unparsable values, out-of-range values or missing
        referenced paths.
    """
    given = {}
    if path is not None:
        given.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            given[k] = v
    unknown = sorted(set(given) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    out, defaulted = [], []
    for key, (typ, default, check) in KEYS.items():
        if key in given:
            val = _convert(key, given[key])
        else:
            val = default
            note = f" ({_NOTES[key]})" if key in _NOTES else ""
            defaulted.append(f"default {key} = {_render(val)}{note}")
        if check is not None:
            check(val)
        out.append((key, val))
    cfg = RunConfig(tuple(out), tuple(defaulted))
    if cfg["mixing"] != 0:
        _mixing(cfg["mixing"])
    if cfg["wake.mu_max"] <= cfg["wake.mu_min"]:
        raise ConfigError("wake.mu_max > wake.mu_min required")
    if cfg["kernel.kind"] == "tabulated":
        if not cfg["kernel.table"] or not Path(cfg["kernel.table"]).is_file():
            raise ConfigError(f"kernel.table file not found: {cfg['kernel.table']!r}")
    if cfg["run_dir"] and not (Path(cfg["run_dir"]) / "diagnostics.csv").is_file():
        raise ConfigError(f"run_dir has no diagnostics.csv: {cfg['run_dir']!r}")
    if cfg["dump_every"] and cfg["dump_every"] % cfg["diag_every"]:
        raise ConfigError("dump_every must be a multiple of diag_every")
    return cfg


# --- pipeline pieces --------------------------------------------------------

def _load_table(path):
    """Kernel table CSV with columns ``x,K,dK`` on a uniform x grid."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 3 or data.shape[0] < 2:
        raise ConfigError(f"{path}: expected columns x,K,dK")
    x = data[:, 0]
    if not np.allclose(np.diff(x), x[1] - x[0], rtol=1e-9, atol=0):
        raise ConfigError(f"{path}: kernel table x must be uniform")
    return tabulated_kernel(Profile1D(x[0], x[-1], data[:, 1]), Profile1D(x[0], x[-1], data[:, 2]))


def build_kernel(cfg: RunConfig):
    kind = cfg["kernel.kind"]
    if kind == "free_space":
        return free_space_kernel(cfg["kernel.scale_amp"], cfg["kernel.scale_len"])
    if kind == "analytic_even":
        return analytic_even_kernel(cfg["kernel.name"], cfg["kernel.scale_amp"],
                                    cfg["kernel.scale_len"])
    return _load_table(cfg["kernel.table"])


def _spec(cfg: RunConfig) -> GridSpec:
    return GridSpec.centered(cfg.params, cfg["nx"], cfg["nv"], cfg["box_x"], cfg["box_v"])


def _dt(cfg: RunConfig) -> float:
    from .dynamics import default_dt
    return cfg["dt"] if cfg["dt"] > 0 else default_dt(cfg.params)


def _mixing_value(cfg):
    return None if cfg["mixing"] == 0 else cfg["mixing"]


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])


def _init_var(cfg, key, fallback):
    return cfg[key] if cfg[key] > 0 else fallback


def run_wake(cfg: RunConfig, out: Path) -> None:
    mu = np.linspace(cfg["wake.mu_min"], cfg["wake.mu_max"], cfg["wake.n"])
    _write_csv(out / "kfs.csv", ("mu", "kfs", "dkfs"),
               zip(mu.tolist(), kfs_eval(mu).tolist(), kfs_deriv(mu).tolist()))
    pot = ExactOrbitPotential.from_gamma(cfg["wake.gamma"])
    rows = []
    for m in mu:
        xi = float(m) / (3 * pot.gamma ** 3)
        if xi == 0:
            continue
        V, VC, VS = potential_exact(pot, xi)
        rows.append((xi, V, VC, VS))
    _write_csv(out / "potential.csv", ("xi", "V", "VC", "VS"), rows)


def run_haissinski(cfg: RunConfig, out: Path) -> None:
    p, k = cfg.params, build_kernel(cfg)
    lattice = _spec(cfg).x_lattice()
    sol = solve_haissinski(p, k, lattice, cfg["tol"], cfg["max_iter"], _mixing_value(cfg))
    io.write_profile(out / "sigma.vfpp", sol.sigma)
    rows = [("C", UNIQUENESS_CONSTANT)]
    rows += list(dataclasses.asdict(stability_constants(p, k)).items())
    rows += [("iterations", sol.iterations), ("residual_l1", sol.residual_l1),
             ("contraction_estimate", sol.contraction_estimate),
             ("contraction_bound", contraction_bound(p, k)), ("centroid", sol.centroid)]
    rng = np.random.default_rng(cfg["seed"])
    for i in range(1, cfg["starts"]):
        start = rng.random(lattice.n) + 1e-3
        try:
            other = solve_haissinski(p, k, lattice, cfg["tol"], cfg["max_iter"],
                                     _mixing_value(cfg), start=start)
            d = float(lattice.dx * np.sum(np.abs(other.sigma.values - sol.sigma.values)))
        except HaissinskiNotConverged as exc:
            logger.warning("start %d did not converge: %s", i, exc)
            d = math.nan
        rows.append((f"start_{i}_l1_distance", d))
    _write_csv(out / "constants.csv", ("name", "value"), rows)
    for name, val in rows:
        print(f"{name},{format(val, '.17g') if isinstance(val, float) else val}")


def _reference(cfg, p, k, spec):
    try:
        sol = solve_haissinski(p, k, spec.x_lattice(), cfg["tol"], cfg["max_iter"],
                               _mixing_value(cfg))
    except HaissinskiNotConverged as exc:
        logger.warning("no reference equilibrium: %s", exc)
        return None, None
    return sol, steady_state_2d(sol, spec)


def _initial_grid(cfg, p, spec, sol) -> PhaseGrid:
    if cfg["init.kind"] == "haissinski":
        if sol is None:
            raise SolverFault("init.kind = haissinski but the equilibrium did not converge")
        # equilibrium shifted by (x0, v0)
        sig = np.interp(spec.x - cfg["init.x0"], sol.sigma.x, sol.sigma.values, left=0, right=0)
        v = spec.v - cfg["init.v0"]
        mv = np.exp(-v ** 2 / (2 * p.theta))
        vals = sig[:, None] * mv[None, :]
        g = PhaseGrid.from_spec(spec, vals)
        return g.with_values(vals * p.mass / grid_mass(g))
    return gaussian_grid(spec, p, cfg["init.x0"], cfg["init.v0"],
                         _init_var(cfg, "init.var_x", p.theta / p.alpha),
                         _init_var(cfg, "init.var_v", p.theta))


def run_evolve(cfg: RunConfig, out: Path) -> None:
    from .dynamics import make_state, run_grid
    p, k, spec = cfg.params, build_kernel(cfg), _spec(cfg)
    sol, ref = _reference(cfg, p, k, spec)
    g0 = _initial_grid(cfg, p, spec, sol)
    dump = cfg["dump_every"]

    def observer(st):
        if dump and st.step_count % dump == 0:
            io.write_grid(out / f"frame_{st.step_count:06d}.vfpg", st.grid)

    state = make_state(g0, p, k, _dt(cfg))
    try:
        state, recs = run_grid(state, cfg["t_end"], cfg["diag_every"], ref, observer)
    except SolverFault as exc:
        io.write_diag_csv(out / "diagnostics.csv", getattr(exc, "records", []))
        raise
    io.write_diag_csv(out / "diagnostics.csv", recs)
    series = [(r.t, r.l2mu_dist) for r in recs if r.l2mu_dist > 0]
    if len(series) >= 10:
        lam, r2 = fit_decay_rate(series)
        print(f"fitted_lambda,{lam:.17g}\nr_squared,{r2:.17g}")


def run_particles_cmd(cfg: RunConfig, out: Path) -> None:
    from .dynamics import particle_moments, run_particles, sample_ensemble, sample_from_grid
    p, k, spec = cfg.params, build_kernel(cfg), _spec(cfg)
    n = cfg["n_particles"]
    if cfg["init.kind"] == "haissinski":
        sol, _ = _reference(cfg, p, k, spec)
        ens = sample_from_grid(_initial_grid(cfg, p, spec, sol), n, cfg["seed"], p.mass)
    else:
        ens = sample_ensemble(n, p, cfg["seed"], cfg["init.x0"], cfg["init.v0"],
                              _init_var(cfg, "init.var_x", p.theta / p.alpha),
                              _init_var(cfg, "init.var_v", p.theta))
    dt = _dt(cfg)
    keys = ("mass", "mean_x", "mean_v", "var_x", "var_v", "cov_xv")
    rows = []
    ens = run_particles(ens, p, k, dt, cfg["t_end"], spec,
                        lambda e, t: rows.append((t,) + tuple(particle_moments(e)[q] for q in keys)),
                        cfg["diag_every"])
    _write_csv(out / "moments.csv", ("t",) + keys, rows)
    lat = spec.x_lattice()
    edges = np.concatenate(([lat.x_min - 0.5 * lat.dx], lat.x + 0.5 * lat.dx))
    hist = np.histogram(ens.xs, edges)[0] * ens.weight / lat.dx
    _write_csv(out / "rho.csv", ("x", "rho"), zip(lat.x.tolist(), hist.tolist()))


def run_stability(cfg: RunConfig, out: Path) -> None:
    p, k = cfg.params, build_kernel(cfg)
    rows = [("C", UNIQUENESS_CONSTANT)]
    rows += list(dataclasses.asdict(stability_constants(p, k)).items())
    if cfg["run_dir"]:
        recs = io.read_diag_csv(Path(cfg["run_dir"]) / "diagnostics.csv")
        series = [(r.t, r.l2mu_dist) for r in recs if r.l2mu_dist > 0]
        lam, r2 = fit_decay_rate(series)
        rows += [("fitted_lambda", lam), ("r_squared", r2)]
    _write_csv(out / "stability.csv", ("name", "value"), rows)
    for name, val in rows:
        print(f"{name},{val:.17g}")


_RUNNERS = {"wake": run_wake, "haissinski": run_haissinski, "evolve": run_evolve,
            "particles": run_particles_cmd, "stability": run_stability}


def _library_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def run(cfg: RunConfig) -> int:
    """Execute a validated configuration; returns the exit status."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.text())
    root = logging.getLogger()
    old_level = root.level
    root.setLevel(logging.INFO)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    for line in cfg.defaulted:
        logger.info(line)
    t0 = time.perf_counter()
    status = 0
    try:
        _RUNNERS[cfg.subcommand](cfg, out)
    except (SolverFault, HaissinskiNotConverged, FloatingPointError) as exc:
        logger.error("solver fault: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        status = 1
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    finally:
        wall = time.perf_counter() - t0
        _write_csv(out / "manifest.csv", ("key", "value"),
                   [("config_hash", cfg.digest()), ("version", _library_version()),
                    ("seed", cfg["seed"]), ("wall_time_s", wall),
                    ("subcommand", cfg.subcommand), ("exit_status", status)])
        root.removeHandler(handler)
        root.setLevel(old_level)
        handler.close()
    return status


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="synchvfp", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS,
                    help="pipeline to run (may also come from the config file)")
    ap.add_argument("--config", help="flat key = value configuration file")
    ap.add_argument("-v", "--verbose", action="store_true")
    for key, (typ, default, _) in KEYS.items():
        if key == "subcommand":
            continue
        ap.add_argument(_flag(key), dest=key, default=None, metavar=typ.__name__.upper(),
                        help=f"default {_render(default)}")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(console)
    overrides = {k: v for k, v in vars(args).items() if k in KEYS}
    try:
        cfg = parse_config(args.config, overrides)
        return run(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        root.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
