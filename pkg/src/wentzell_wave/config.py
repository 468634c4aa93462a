"""Run configuration: YAML parsing, hypothesis gates, object building.

A run is described by one self-contained YAML file. Before anything is
solved, the configuration is validated against the structural hypotheses
of the model:

* ``metric-positivity``  -- metric coefficients stay strictly positive on
  a sampled (t, node) lattice.
* ``mass-sign``          -- the mass fields m and m_b are non-positive
  wherever sampled.
* ``growth-form``        -- nonlinearity exponents are >= 1 and the
  coefficient fields evaluate finitely.
* ``subcritical-growth`` -- the exponents respect the embedding bounds
  for the declared dimension.

Violations are collected (not short-circuited) so a config can be fixed
in one pass; ``--allow-unchecked`` downgrades them to warnings.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .assembly import StateVector, WaveOperators
from .evolution import FieldSource, SourceTerm, ZeroSource
from .fields import FieldError, make_field
from .geometry import GeometryError, Mesh, MetricError, MetricSpec, build_mesh, sample_metric
from .semilinear import NonlinearitySpec, validate_exponents

__all__ = ["ConfigError", "HypothesisViolation", "RunConfig", "load_config", "MODES"]

MODES = ("linear-auto", "linear-nonauto", "nonlinear", "verify", "sweep")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class HypothesisViolation(Exception):
    """One or more model hypotheses failed validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


_DEFAULTS = {
    "mode": "verify",
    "geometry": {"kind": "interval", "n_x": 32, "length": 1.0, "n_theta": 8},
    "metric": {"a": "1", "b": "1", "T": 1.0},
    "masses": {"m": "0", "m_b": "0"},
    "source": {"f": "0", "g": "0"},
    "initial": {"u": "0", "w": "0"},
    "solver": {
        "dt": 0.01,
        "t_end": None,  # defaults to metric horizon
        "dtype": "real",
        "lambdas": [0.1, 1.0, 10.0],
        "picard_tol": 1e-9,
        "picard_max_iter": 40,
        "norm_cap_factor": 1e6,
        "seed": 1234,
        "snapshot_times": [],
        "cache_size": 256,
        "m0": None,  # measured when absent
    },
    "m0": {"dt": 0.02, "n_probe_times": 5, "n_probes": 6, "power_iters": 30},
    "kato": {"n_grid": 10, "lam": 1.0, "cap": 400, "gram_time": 0.0},
    "continuation": {"lip_samples": 48, "safety": 1.5, "seed_offset": 0},
    "nonlinearity": None,
    "sweep": None,
    "output": {"dir": None},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            out[key] = copy.deepcopy(val)
        elif isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class RunConfig:
    """Validated run configuration plus builders for the solver objects."""

    raw: dict
    path: Optional[str] = None
    violations: list = field(default_factory=list)

    # -- builders ---------------------------------------------------------

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def kind(self) -> str:
        return self.raw["geometry"]["kind"]

    @property
    def horizon(self) -> float:
        return float(self.raw["metric"]["T"])

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def t_end(self) -> float:
        te = self.raw["solver"]["t_end"]
        return self.horizon if te is None else float(te)

    @property
    def seed(self) -> int:
        return int(self.raw["solver"]["seed"])

    def field_vars(self):
        return ("t", "x") if self.kind == "interval" else ("t", "x", "theta")

    def build_mesh(self) -> Mesh:
        g = self.raw["geometry"]
        return build_mesh(
            g["kind"],
            n_x=int(g["n_x"]),
            length=float(g.get("length", 1.0)),
            n_theta=int(g.get("n_theta", 0)),
        )

    def metric_spec(self) -> MetricSpec:
        m = self.raw["metric"]
        return MetricSpec.build(
            self.kind,
            a=m["a"],
            b=m.get("b", "1"),
            m=self.raw["masses"]["m"],
            m_b=self.raw["masses"]["m_b"],
            horizon=self.horizon,
        )

    def provider(self, mesh: Optional[Mesh] = None):
        """Operator provider; time-independent metrics are frozen at t=0
        so repeated stepping reuses one assembly and factorization."""
        mesh = mesh if mesh is not None else self.build_mesh()
        spec = self.metric_spec()
        wave = WaveOperators(mesh, spec, cache_size=int(self.solver["cache_size"]))
        if spec.is_autonomous_expr():
            return wave.frozen(0.0)
        return wave

    def source(self, mesh: Mesh) -> SourceTerm:
        s = self.raw["source"]
        if str(s.get("f", "0")).strip() == "0" and str(s.get("g", "0")).strip() == "0":
            return ZeroSource()
        v = self.field_vars()
        return FieldSource(mesh, make_field(s.get("f", "0"), v), make_field(s.get("g", "0"), v))

    def initial_state(self, mesh: Mesh) -> StateVector:
        ini = self.raw["initial"]
        v = ("x",) if self.kind == "interval" else ("x", "theta")
        fu = make_field(ini.get("u", "0"), v)
        fw = make_field(ini.get("w", "0"), v)
        if self.kind == "interval":
            u = fu(0.0, mesh.node_x)
            w = fw(0.0, mesh.node_x)
        else:
            u = fu(0.0, mesh.node_x, mesh.node_theta)
            w = fw(0.0, mesh.node_x, mesh.node_theta)
        # fields take t as first slot; initial data ignores it
        dtype = np.complex128 if self.solver["dtype"] == "complex" else np.float64
        return StateVector(
            np.broadcast_to(u, (mesh.n_nodes,)).astype(dtype),
            np.broadcast_to(w, (mesh.n_nodes,)).astype(dtype),
        )

    def nonlinearity(self) -> NonlinearitySpec:
        nl = self.raw.get("nonlinearity")
        if not nl:
            return NonlinearitySpec.zero()
        kw = {}
        for key in ("lip_K", "lip_K_b", "growth_C", "growth_C_b"):
            if nl.get(key) is not None:
                kw[key] = float(nl[key])
        return NonlinearitySpec.power(
            alpha=float(nl.get("alpha", 1.0)),
            beta=float(nl.get("beta", 1.0)),
            P=nl.get("P", "1"),
            P_b=nl.get("P_b", "1"),
            Q=nl.get("Q"),
            Q_b=nl.get("Q_b"),
            **kw,
        )

    def time_grid(self) -> np.ndarray:
        dt = float(self.solver["dt"])
        t_end = self.t_end
        steps = max(1, int(round(t_end / dt)))
        return np.linspace(0.0, t_end, steps + 1)

    # -- validation --------------------------------------------------------

    def validate(self, allow_unchecked: bool = False) -> list:
        """Run the hypothesis gates; raise HypothesisViolation unless
        downgraded. Returns the violation list either way."""
        violations = []
        try:
            mesh = self.build_mesh()
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc

        try:
            spec = self.metric_spec()
        except (FieldError, MetricError) as exc:
            raise ConfigError(str(exc)) from exc

        ts = np.linspace(0.0, self.horizon, 9)
        for t in ts:
            try:
                sample_metric(spec, mesh, float(t))
            except MetricError as exc:
                violations.append(f"[metric-positivity] {exc}")
                break

        coords = (mesh.node_x,) if self.kind == "interval" else (mesh.node_x, mesh.node_theta)
        bids = mesh.boundary_node_ids
        bcoords = tuple(c[bids] for c in coords)
        for t in ts:
            mv = spec.m(float(t), *coords)
            mbv = spec.m_b(float(t), *bcoords)
            if np.any(mv > 0):
                i = int(np.argmax(mv))
                violations.append(
                    f"[mass-sign] m = {mv[i]:.6g} > 0 at t={t:.6g}, node {i}; the mass fields must be non-positive"
                )
                break
            if np.any(mbv > 0):
                i = int(np.argmax(mbv))
                violations.append(
                    f"[mass-sign] m_b = {mbv[i]:.6g} > 0 at t={t:.6g}, boundary node {i}; the mass fields must be non-positive"
                )
                break

        nl = self.raw.get("nonlinearity")
        if nl:
            alpha = float(nl.get("alpha", 1.0))
            beta = float(nl.get("beta", 1.0))
            if alpha < 1 or beta < 1:
                violations.append(f"[growth-form] exponents must be >= 1, got alpha={alpha}, beta={beta}")
            else:
                n_decl = int(nl.get("n_declared", 2))
                try:
                    report = validate_exponents(alpha, beta, n_decl)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
                for v in report.violations:
                    violations.append(f"[subcritical-growth] {v} (declared dimension n={n_decl})")
                try:
                    X_probe = StateVector(np.full(mesh.n_nodes, 0.5), np.full(mesh.n_nodes, 0.5))
                    from .semilinear import eval_rhs

                    eval_rhs(self.nonlinearity(), 0.0, X_probe, mesh)
                except (FieldError, ArithmeticError) as exc:
                    violations.append(f"[growth-form] nonlinearity does not evaluate finitely: {exc}")

        self.violations = violations
        if violations and not allow_unchecked:
            raise HypothesisViolation(violations)
        return violations


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and structurally check a YAML run config (no hypothesis gates)."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    merged = _merge(_DEFAULTS, data)
    if overrides:
        merged = _merge(merged, overrides)
    return _build_config(merged, str(path))


def config_from_dict(data: dict, path: Optional[str] = None) -> RunConfig:
    return _build_config(_merge(_DEFAULTS, data), path)


def _build_config(merged: dict, path: Optional[str]) -> RunConfig:
    mode = merged.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    kind = merged["geometry"].get("kind")
    if kind not in ("interval", "cylinder"):
        raise ConfigError(f"geometry.kind must be 'interval' or 'cylinder', got {kind!r}")
    if float(merged["metric"]["T"]) <= 0:
        raise ConfigError("metric.T must be positive")
    if float(merged["solver"]["dt"]) <= 0:
        raise ConfigError("solver.dt must be positive")
    if merged["solver"]["dtype"] not in ("real", "complex"):
        raise ConfigError("solver.dtype must be 'real' or 'complex'")
    te = merged["solver"]["t_end"]
    if te is not None and float(te) <= 0:
        raise ConfigError("solver.t_end must be positive")
    if merged["sweep"] is not None:
        sw = merged["sweep"]
        if not isinstance(sw.get("grid"), dict) or not sw["grid"]:
            raise ConfigError("sweep.grid must map config paths to value lists")
        if sw.get("mode", "linear-nonauto") not in MODES or sw.get("mode") == "sweep":
            raise ConfigError("sweep.mode must be a non-sweep run mode")
        for key, vals in sw["grid"].items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep.grid[{key!r}] must be a non-empty list")
    return RunConfig(raw=merged, path=path)
