"""CSV and manifest writers for run outputs.

Floats are written with shortest round-trip formatting so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import json
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .assembly import StateVector
from .evolution import KatoScan, Trajectory
from .geometry import Mesh

__all__ = [
    "fmt",
    "write_trajectory_csv",
    "write_snapshot_csv",
    "write_iterations_csv",
    "write_checks_csv",
    "write_kato_csv",
    "write_convergence_csv",
    "write_windows_csv",
    "write_matrix_dump",
    "write_certificate",
    "write_manifest",
]


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    v = float(x)
    return repr(v)


def _write(path, header: str, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [header]
    lines.extend(",".join(fmt(c) for c in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_trajectory_csv(path, traj: Trajectory) -> Path:
    return _write(path, "t,x_norm,energy,u_norm_V,w_norm_U,residual", traj.rows())


def write_snapshot_csv(path, mesh: Mesh, X: StateVector) -> Path:
    if mesh.kind == "interval":
        rows = ((mesh.node_x[i], np.real(X.u[i]), np.real(X.w[i])) for i in range(mesh.n_nodes))
        return _write(path, "x,u,w", rows)
    rows = (
        (mesh.node_x[i], mesh.node_theta[i], np.real(X.u[i]), np.real(X.w[i]))
        for i in range(mesh.n_nodes)
    )
    return _write(path, "x,theta,u,w", rows)


def write_iterations_csv(path, sup_diffs: Sequence[float], ratios: Sequence[float]) -> Path:
    rows = []
    for k, d in enumerate(sup_diffs, start=1):
        ratio = ratios[k - 2] if 2 <= k <= len(ratios) + 1 else ""
        rows.append((k, fmt(d), fmt(ratio) if ratio != "" else ""))
    # assemble manually to allow the empty ratio on the first row
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["iter,sup_diff,ratio"]
    for k, d, r in rows:
        lines.append(f"{k},{d},{r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_checks_csv(path, reports) -> Path:
    rows = ((r.name, r.passed, r.value, r.tolerance) for r in reports)
    return _write(path, "check,pass,value,tolerance", rows)


def write_kato_csv(path, scan: KatoScan) -> Path:
    return _write(path, "t,s,norm", scan.rows())


def write_convergence_csv(path, table, label: str = "h") -> Path:
    return _write(path, f"{label},error", table)


def write_windows_csv(path, windows) -> Path:
    return _write(path, "t_start,window,lipschitz,rho", windows)


def write_matrix_dump(path, matrix) -> Path:
    coo = matrix.tocoo()
    rows = zip(coo.row, coo.col, coo.data)
    return _write(path, "row,col,value", rows)


def write_certificate(path, cert) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}: {fmt(val)}" for key, val in cert.summary().items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_manifest(path, config_raw: dict, *, seed: int, mode: str, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "mode": mode,
        "seed": seed,
        "config": config_raw,
        "versions": {
            "wentzell-wave": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "platform": platform.platform(),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path
