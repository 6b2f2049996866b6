"""On-disk formats: VFPG grids, VFPP profiles and the diagnostics CSV.

Binary layout (little endian)::

    VFPG: b"VFPG" u32 version u64 nx u64 nv f64 x_min x_max v_min v_max f64[nx*nv]
    VFPP: b"VFPP" u32 version u64 n f64 x_min x_max f64[n]

Grid values are row-major with x as the slow axis.
"""
from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .model import DiagRecord, PhaseGrid, Profile1D

FORMAT_VERSION = 1

_GRID_HEADER = struct.Struct("<4sIQQdddd")
_PROFILE_HEADER = struct.Struct("<4sIQdd")

CSV_COLUMNS = ("t", "mass", "entropy", "diss_lhs", "diss_rhs", "mean_x", "mean_v",
               "var_x", "var_v", "cov_xv", "l2mu_dist", "l1", "l2", "linf")


def write_grid(path, g: PhaseGrid) -> None:
    header = _GRID_HEADER.pack(b"VFPG", FORMAT_VERSION, g.nx, g.nv,
                               g.x_min, g.x_max, g.v_min, g.v_max)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(g.values, dtype="<f8").tobytes())


def read_grid(path) -> PhaseGrid:
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise ValueError(f"{path}: truncated VFPG header")
    magic, version, nx, nv, x0, x1, v0, v1 = _GRID_HEADER.unpack_from(data)
    if magic != b"VFPG":
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported VFPG version {version}")
    body = data[_GRID_HEADER.size:]
    if len(body) != 8 * nx * nv:
        raise ValueError(f"{path}: expected {nx * nv} values, found {len(body) // 8}")
    vals = np.frombuffer(body, dtype="<f8").reshape(nx, nv)
    return PhaseGrid(x0, x1, v0, v1, vals)


def write_profile(path, p: Profile1D) -> None:
    header = _PROFILE_HEADER.pack(b"VFPP", FORMAT_VERSION, p.n, p.x_min, p.x_max)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def read_profile(path) -> Profile1D:
    data = Path(path).read_bytes()
    if len(data) < _PROFILE_HEADER.size:
        raise ValueError(f"{path}: truncated VFPP header")
    magic, version, n, x0, x1 = _PROFILE_HEADER.unpack_from(data)
    if magic != b"VFPP":
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported VFPP version {version}")
    body = data[_PROFILE_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {n} values, found {len(body) // 8}")
    return Profile1D(x0, x1, np.frombuffer(body, dtype="<f8"))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def record_row(rec: DiagRecord) -> list[str]:
    lp = rec.lp_norms
    vals = (rec.t, rec.mass, rec.entropy, rec.dissipation_lhs, rec.dissipation_rhs,
            rec.mean_x, rec.mean_v, rec.var_x, rec.var_v, rec.cov_xv, rec.l2mu_dist,
            lp.get(1, math.nan), lp.get(2, math.nan), lp.get(math.inf, math.nan))
    return [_fmt(v) for v in vals]


def write_diag_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(record_row(rec))


def read_diag_csv(path) -> list[DiagRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            v = {k: float(row[k]) for k in CSV_COLUMNS}
            out.append(DiagRecord(
                t=v["t"], mass=v["mass"], entropy=v["entropy"],
                dissipation_lhs=v["diss_lhs"], dissipation_rhs=v["diss_rhs"],
                mean_x=v["mean_x"], mean_v=v["mean_v"], var_x=v["var_x"],
                var_v=v["var_v"], cov_xv=v["cov_xv"], l2mu_dist=v["l2mu_dist"],
                lp_norms={1: v["l1"], 2: v["l2"], math.inf: v["linf"]}))
    return out
