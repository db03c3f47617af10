"""Batch experiments: config validation, stage orchestration, manifests and summary tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

KINDS = ("spectrum", "f_profile", "v_scaling", "sim_moments", "localtime_dim",
         "moment_validation", "constants")
MANIFEST_SCHEMA = 1

DEFAULTS = {
    "spectrum": {"basis_size": 80, "kill": "F"},
    "f_profile": {"L": 10.0, "n": 2049},
    "v_scaling": {"lams": [10.0, 20.0, 40.0, 80.0], "scale_c": 4.0, "t": 1.0, "lam": 3.0},
    "sim_moments": {"x0_mass": 1.0, "t": 1.0, "dx": 0.02, "scheme": "feller"},
    "localtime_dim": {"t": 1.0, "dx": 0.002, "dx_coarse": 0.016, "window_nodes": 40.0,
                      "x0_mass": 1.0},
    "moment_validation": {"t": 1.0, "dx": 0.02, "x0_mass": 1.0, "constants": None},
    "constants": {"basis_size": 80, "n_paths": 20000, "horizon": 20.0, "rho_nodes": 9,
                  "rho_paths": 1000, "inner_dt": 0.01},
}


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 3)."""


@dataclass
class ExperimentConfig:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    replicates: int = 0
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"kind", "params", "seed", "replicates", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("config needs a 'kind'")
        cfg = cls(d["kind"], dict(d.get("params", {})), d.get("seed", 0),
                  d.get("replicates", 0), d.get("output_dir", "runs"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if "output_dir" not in d and os.environ.get("SBM_LOCALTIME_OUTPUT_ROOT"):
            d["output_dir"] = os.environ["SBM_LOCALTIME_OUTPUT_ROOT"]
        return cls.from_dict(d)

    def resolved(self) -> dict:
        p = dict(DEFAULTS.get(self.kind, {}))
        p.update(self.params)
        return p

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.resolved(), "seed": self.seed,
                "replicates": self.replicates, "output_dir": self.output_dir}

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not isinstance(self.replicates, int) or self.replicates < 0:
            raise ConfigError("replicates must be a nonnegative integer")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        p = self.resolved()

        def positive(*names):
            for n in names:
                v = p[n]
                if not isinstance(v, (int, float)) or not v > 0 or not math.isfinite(v):
                    raise ConfigError(f"{n} must be a positive number")

        k = self.kind
        if k in ("spectrum", "constants"):
            if not isinstance(p["basis_size"], int) or p["basis_size"] < 4:
                raise ConfigError("basis_size must be an integer >= 4")
        if k == "spectrum" and p["kill"] not in ("F", "zero"):
            raise ConfigError("kill must be 'F' or 'zero'")
        if k == "f_profile":
            positive("L", "n")
        if k == "v_scaling":
            positive("scale_c", "t", "lam")
            if len(p["lams"]) < 2 or any(not x > 0 for x in p["lams"]):
                raise ConfigError("lams must hold at least two positive values")
        if k in ("sim_moments", "moment_validation", "localtime_dim"):
            positive("t", "dx", "x0_mass")
            if p["dx"] > 0.1:
                raise ConfigError("dx must be at most 0.1")
            if self.replicates < 1:
                raise ConfigError("replicates must be at least 1")
        if k == "sim_moments" and p["scheme"] not in ("feller", "euler"):
            raise ConfigError("scheme must be 'feller' or 'euler'")
        if k == "localtime_dim":
            positive("dx_coarse", "window_nodes")
            if p["dx_coarse"] < p["dx"]:
                raise ConfigError("dx_coarse must be at least dx")
        if k == "constants":
            positive("n_paths", "horizon", "rho_nodes", "rho_paths", "inner_dt")
            if p["horizon"] > 22:
                raise ConfigError("horizon beyond the similarity table (22)")


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    code_version: str
    started: float
    finished: float | None = None
    status: str = "running"
    stages: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    schema: int = MANIFEST_SCHEMA

    def metric(self, name: str, value, operation: str, quantity: str, stderr=None) -> None:
        entry = {"value": _plain(value), "operation": operation, "quantity": quantity}
        if stderr is not None:
            entry["stderr"] = _plain(stderr)
        self.summary[name] = entry

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for r in rows:
        w.writerow([_plain(x) for x in r])
    atomic_write(path, buf.getvalue())


# ----------------------------------------------------------------------------
# Shared deterministic objects
# ----------------------------------------------------------------------------

class Workspace:
    """Lazily built profile, spectral model and similarity tables."""

    def __init__(self, basis_size: int = 80):
        self.basis_size = basis_size
        self._profile = self._model = self._ladder = self._f2 = None

    @property
    def profile(self):
        if self._profile is None:
            from .nonlinear_pde import solve_F
            self._profile = solve_F()
        return self._profile

    @property
    def model(self):
        if self._model is None:
            from .spectral_ou import KillingFunction, build_generator
            self._model = build_generator(KillingFunction(self.profile, (0.0, 0.0)),
                                          self.basis_size)
        return self._model

    @property
    def ladder(self):
        if self._ladder is None:
            from .nonlinear_pde import v_ladder
            self._ladder = v_ladder(tangent=True)
        return self._ladder

    @property
    def f2table(self):
        if self._f2 is None:
            from .nonlinear_pde import build_f2_table
            self._f2 = build_f2_table(self.profile, self.model.lambda0)
        return self._f2


# ----------------------------------------------------------------------------
# Stages
# ----------------------------------------------------------------------------

def _stage_spectrum(cfg, p, out, man, ws):
    from .spectral_ou import KillingFunction, build_generator
    if p["kill"] == "zero":
        model = build_generator(KillingFunction.zero(), p["basis_size"])
    else:
        ws.basis_size = p["basis_size"]
        model = ws.model
    write_csv(out / "eigenvalues.csv", ["n", "eigenvalue"], enumerate(model.eigenvalues))
    model.save_json(out / "spectral_model.json.tmp")
    os.replace(out / "spectral_model.json.tmp", out / "spectral_model.json")
    man.metric("lambda0", model.lambda0, "spectral_ou.build_generator", "lead killing rate")
    man.metric("lambda1", model.eigenvalues[1], "spectral_ou.build_generator", "second killing rate")
    man.metric("theta", model.theta, "spectral_ou.build_generator", "mean of the lead eigenfunction")
    man.metric("spectral_gap", model.spectral_gap, "spectral_ou.build_generator", "lambda1 - lambda0")
    return {"eigenvalues": "eigenvalues.csv", "model": "spectral_model.json"}


def _stage_f_profile(cfg, p, out, man, ws):
    from .nonlinear_pde import shoot_F0, solve_F
    prof = solve_F(L=p["L"], n=int(p["n"]))
    prof.to_csv(out / "f_profile.csv")
    man.metric("F0", prof.F0, "nonlinear_pde.solve_F", "profile value at the origin")
    man.metric("c1", prof.c1, "nonlinear_pde.solve_F", "tail constant")
    man.metric("residual", prof.residual_norm, "nonlinear_pde.solve_F", "max ODE residual")
    man.metric("F0_shooting", shoot_F0(), "nonlinear_pde.shoot_F0", "profile value at the origin")
    return {"profile": "f_profile.csv"}


def _stage_v_scaling(cfg, p, out, man, ws):
    from .nonlinear_pde import fit_rate_exponent, v_point_value
    c, t, lam = p["scale_c"], p["t"], p["lam"]
    x = np.linspace(-3, 3, 61)
    # V^lam_{c^2 t}(c x) = c^{-2} V^{c lam}_t(x)
    lhs = v_point_value(c * c * t, lam, c * x)
    rhs = v_point_value(t, c * lam, x) / (c * c)
    rel = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)))
    slope, gaps = fit_rate_exponent(ws.profile, tuple(p["lams"]))
    write_csv(out / "sup_gaps.csv", ["lambda", "sup_gap"], zip(p["lams"], gaps))
    man.metric("scaling_rel_error", rel, "nonlinear_pde.v_point", "scaling identity residual")
    man.metric("rate_exponent", slope, "nonlinear_pde.fit_rate_exponent", "sup-gap exponent")
    man.metric("rate_exponent_target", 1 - 2 * ws.model.lambda0, "spectral_ou.build_generator",
               "1 - 2 lambda0")
    return {"sup_gaps": "sup_gaps.csv"}


def _stage_sim_moments(cfg, p, out, man, ws):
    from .sbm_sim import InitialMeasure, simulate_replicates
    x0 = InitialMeasure.point(0.0, p["x0_mass"])
    n = cfg.replicates
    masses, _, seeds = simulate_replicates(x0, p["t"], p["dx"], n, cfg.seed, scheme=p["scheme"])
    write_csv(out / "masses.csv", ["replicate", "seed", "mass"],
              ((i, int(s), m) for i, (s, m) in enumerate(zip(seeds, masses))))
    m0, t = p["x0_mass"], p["t"]
    se = masses.std(ddof=1) / math.sqrt(n)
    ext = float(np.mean(masses == 0))
    p_ext = math.exp(-2 * m0 / t)
    var = masses.var(ddof=1)
    # Var of the sample variance from the fourth central moment
    mu4 = np.mean((masses - masses.mean()) ** 4)
    var_se = math.sqrt(max(mu4 - var ** 2, 0.0) / n)
    man.metric("mean_mass", masses.mean(), "sbm_sim.simulate_spde", "mean total mass", se)
    man.metric("mean_mass_z", (masses.mean() - m0) / se, "sbm_sim.simulate_spde", "mass martingale z")
    man.metric("var_mass_z", (var - m0 * t) / var_se, "sbm_sim.simulate_spde", "mass variance z")
    man.metric("extinction", ext, "sbm_sim.simulate_spde", "extinction frequency")
    man.metric("extinction_z", (ext - p_ext) / math.sqrt(p_ext * (1 - p_ext) / n),
               "sbm_sim.simulate_spde", "extinction z against exp(-2 X0(1)/t)")
    return {"masses": "masses.csv"}


def _stage_localtime_dim(cfg, p, out, man, ws):
    from .boundary_localtime import box_dimension, boundary_set, default_scales
    from .sbm_sim import InitialMeasure, simulate_spde_graded, stream_seeds
    x0 = InitialMeasure.point(0.0, p["x0_mass"])
    rows, fits = [], []
    for i, s in enumerate(stream_seeds(cfg.seed, cfg.replicates)):
        f = simulate_spde_graded(x0, p["t"], p["dx"], int(s), p["dx_coarse"], p["window_nodes"])
        if f.extinct:
            rows.append((i, int(s), 0, "", ""))
            continue
        b = boundary_set(f)
        sc = default_scales(f.dx, f.x_grid[-1] - f.x_grid[0])
        d, fit = box_dimension(b, sc)
        rows.append((i, int(s), len(b), d, fit.reliable))
        fits.append(json.loads(fit.to_json()))
    write_csv(out / "box_dimensions.csv", ["replicate", "seed", "boundary_points", "dimension",
                                           "reliable"], rows)
    atomic_write(out / "box_fits.json", json.dumps(fits))
    dims = [r[3] for r in rows if r[3] != ""]
    if not dims:
        raise StageError("no surviving replicate")
    man.metric("dimension_median", float(np.median(dims)), "boundary_localtime.box_dimension",
               "median box dimension of the zero-set boundary")
    man.metric("surviving", len(dims), "sbm_sim.simulate_spde_graded", "surviving replicates")
    man.metric("dimension_target", 2 - 2 * ws.model.lambda0, "spectral_ou.build_generator",
               "2 - 2 lambda0")
    return {"dimensions": "box_dimensions.csv", "fits": "box_fits.json"}


def _bundle(p, ws):
    from .moments import ConstantsBundle, c_from_tangent
    if p.get("constants"):
        return ConstantsBundle.load_json(p["constants"])
    C, _ = c_from_tangent(ws.model.lambda0, ws.model.theta)
    return ConstantsBundle(C=C, theta=ws.model.theta, lambda0=ws.model.lambda0,
                           routes={"tangent": C})


def _stage_moment_validation(cfg, p, out, man, ws):
    from .boundary_localtime import l_hat
    from .moments import MomentReport, px_first_moment
    from .sbm_sim import InitialMeasure, simulate_spde, stream_seeds
    bundle = _bundle(p, ws)
    x0 = InitialMeasure.point(0.0, p["x0_mass"])
    vals = []
    for s in stream_seeds(cfg.seed, cfg.replicates):
        f = simulate_spde(x0, p["t"], p["dx"], seed=int(s))
        vals.append(l_hat(f, bundle.lambda0))
    vals = np.array(vals)
    write_csv(out / "l_hat.csv", ["replicate", "l_hat"], enumerate(vals))
    formula = px_first_moment(lambda x: 1.0, p["t"], x0, ws.profile, bundle, ws.model)
    rep = MomentReport(formula, float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)),
                       int(vals.size), "moments.px_first_moment", "E L_t(1)")
    atomic_write(out / "reports.jsonl", rep.to_json_line() + "\n")
    man.metric("px_first_moment", formula, "moments.px_first_moment", "mean total local time")
    man.metric("px_first_moment_mc", rep.mc_estimate, "boundary_localtime.l_hat",
               "replicate mean of the local-time estimate", rep.mc_stderr)
    man.metric("px_first_moment_z", rep.z_score, "moments.MomentReport", "formula vs Monte Carlo z")
    return {"l_hat": "l_hat.csv", "reports": "reports.jsonl"}


def _stage_constants(cfg, p, out, man, ws):
    from .moments import (ConstantsBundle, PathFunctionals, c_from_galerkin, c_from_tangent,
                          c_upper_bound, estimate_C, rho_table, z_cap)
    from .spectral_ou import GaussianMeasureGrid
    ws.basis_size = p["basis_size"]
    model, prof, lad = ws.model, ws.profile, ws.ladder
    fun = PathFunctionals(model, prof, lad, ws.f2table)
    C, se, diag = estimate_C(prof, model, lad, int(p["n_paths"]), cfg.seed, p["horizon"],
                             p["inner_dt"], functionals=fun)
    ct, _ = c_from_tangent(model.lambda0, model.theta)
    cg = c_from_galerkin(model, lad, p["horizon"])
    quad = GaussianMeasureGrid.from_order(int(p["rho_nodes"]))
    table, err = rho_table(quad.nodes, fun, int(p["rho_paths"]), cfg.seed + 1, p["horizon"])
    cap = z_cap(prof, lad, model.lambda0)
    bundle = ConstantsBundle(C=C, theta=model.theta, lambda0=model.lambda0, C_stderr=se,
                             rho_nodes=quad.nodes, rho_table=np.minimum(table, 1.0),
                             rho_stderr=err, C_Z_empirical=diag["z_max"], C_Z_cap=cap,
                             z_tail=diag["z_tail"], seeds={"C": cfg.seed, "rho": cfg.seed + 1},
                             n_paths={"C": int(p["n_paths"]), "rho": int(p["rho_paths"])},
                             routes={"tangent": ct, "galerkin": cg})
    bundle.save_json(out / "constants.json")
    man.metric("C", C, "moments.estimate_C", "nested Monte Carlo constant", se)
    man.metric("C_tangent", ct, "moments.c_from_tangent", "constant from the large-mass tangent")
    man.metric("C_galerkin", cg, "moments.c_from_galerkin", "constant from the backward Galerkin solve")
    man.metric("C_upper", c_upper_bound(cap, model), "moments.c_upper_bound", "C_Z E psi0(B_1)")
    man.metric("C_Z_empirical", diag["z_max"], "moments.estimate_C", "largest sampled Z")
    man.metric("C_Z_cap", cap, "moments.z_cap", "rate-integrated cap on Z")
    return {"constants": "constants.json"}


STAGES = {
    "spectrum": _stage_spectrum,
    "f_profile": _stage_f_profile,
    "v_scaling": _stage_v_scaling,
    "sim_moments": _stage_sim_moments,
    "localtime_dim": _stage_localtime_dim,
    "moment_validation": _stage_moment_validation,
    "constants": _stage_constants,
}


def run(cfg: ExperimentConfig, workspace: Workspace | None = None) -> RunManifest:
    """Execute the stage for ``cfg.kind``; the manifest is written even on failure."""
    cfg.validate()
    h = cfg.config_hash()
    out = Path(cfg.output_dir) / f"{cfg.kind}-{h}"
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.to_dict(), h, __version__, time.time(),
                      seeds={"root": cfg.seed, "derivation": "SeedSequence(root).spawn_key=(i,)"})
    ws = workspace or Workspace()
    t0 = time.time()
    try:
        outputs = STAGES[cfg.kind](cfg, cfg.resolved(), out, man, ws)
        man.stages.append({"name": cfg.kind, "status": "ok", "outputs": outputs,
                           "seconds": time.time() - t0})
        man.status = "ok"
    except Exception as exc:  # recorded in the manifest, then re-raised
        man.stages.append({"name": cfg.kind, "status": "failed", "error": repr(exc),
                           "trace": traceback.format_exc(), "seconds": time.time() - t0})
        man.status = "failed"
        man.finished = time.time()
        atomic_write(out / "manifest.json", json.dumps(man.to_dict(), indent=1, default=_plain))
        raise StageError(f"stage {cfg.kind} failed: {exc}") from exc
    man.finished = time.time()
    atomic_write(out / "manifest.json", json.dumps(man.to_dict(), indent=1, default=_plain))
    man.output_path = str(out / "manifest.json")
    return man


def find_manifests(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob("manifest.json")))
    return found


def report(manifests) -> tuple[list[str], list[dict]]:
    """Merge manifest summaries into rows; columns are the union of metric names."""
    mans = [m if isinstance(m, RunManifest) else RunManifest.load(m) for m in manifests]
    if not mans:
        raise ValueError("no manifests")
    versions = sorted({(m.schema, m.code_version) for m in mans})
    if len({v[0] for v in versions}) > 1:
        raise ValueError(f"manifest schema mismatch: {versions}")
    keys = sorted({k for m in mans for k in m.summary})
    header = ["kind", "config_hash", "status"] + keys
    rows = []
    for m in mans:
        row = {"kind": m.config["kind"], "config_hash": m.config_hash, "status": m.status}
        for k in keys:
            row[k] = m.summary[k]["value"] if k in m.summary else None
        rows.append(row)
    return header, rows


def report_csv(manifests) -> str:
    header, rows = report(manifests)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header)
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()
