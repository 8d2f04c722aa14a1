"""Run configuration: one JSON file drives the whole batch pipeline.

Every subcommand validates the full configuration before touching the
filesystem, so an invalid file never leaves partial outputs behind.
Numeric settings outside their documented ranges and unresolvable paths
are configuration errors, reported with the offending key.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ParameterEntry, ParameterSpace, PriorSpec
from .forward import SyntheticBeamModel, UpscaledBeamModel
from .surrogate import KernelSpec

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


_PARAM_ORDER = ("E_cm", "p0", "c0", "mu")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def _number(d: dict, key: str, where: str, lo=None, hi=None, default=None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError(f"{where}: missing key {key!r}")
        return float(default)
    v = d[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    v = float(v)
    if lo is not None and v < lo:
        raise ConfigError(f"{where}.{key}: must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{where}.{key}: must be <= {hi}, got {v}")
    return v


def _integer(d: dict, key: str, where: str, lo=None, hi=None, default=None) -> int:
    v = _number(d, key, where, lo, hi, default)
    if v != int(v):
        raise ConfigError(f"{where}.{key}: expected an integer, got {v}")
    return int(v)


def _prior_from_dict(d: dict, where: str) -> PriorSpec:
    kind = _require(d, "kind", where)
    if kind == "uniform":
        return PriorSpec("uniform", (_number(d, "lower", where), _number(d, "upper", where)))
    if kind in ("normal", "lognormal"):
        return PriorSpec(kind, (_number(d, "mean", where), _number(d, "std", where, lo=0.0)))
    raise ConfigError(f"{where}.kind: unknown prior kind {kind!r}")


def _axis_values(spec, where: str) -> np.ndarray:
    """An axis is either an explicit list or {start, stop|step, count}."""
    if isinstance(spec, list):
        vals = np.array([float(v) for v in spec])
        if vals.size == 0:
            raise ConfigError(f"{where}: empty axis")
        return vals
    if isinstance(spec, dict):
        count = _integer(spec, "count", where, lo=1)
        start = _number(spec, "start", where)
        if "step" in spec:
            return start + _number(spec, "step", where) * np.arange(count)
        stop = _number(spec, "stop", where)
        return np.linspace(start, stop, count)
    raise ConfigError(f"{where}: expected a list or {{start, stop/step, count}}")


@dataclass(frozen=True)
class RunConfig:
    """Validated pipeline settings plus the resolved artifact paths."""

    seed: int
    out_dir: Path
    raw: dict = field(repr=False)

    # forward / data generation
    synthetic_model: SyntheticBeamModel = field(repr=False, default=None)
    theta_true: np.ndarray = field(repr=False, default=None)
    obs_noise_std: float = 0.01
    obs_grid: np.ndarray = field(repr=False, default=None)
    e_field_spec: dict | None = None

    # parameter space
    space: ParameterSpace = field(repr=False, default=None)

    # GP training
    gp_design_space: ParameterSpace = field(repr=False, default=None)
    gp_train_count: int = 100
    gp_val_count: int = 49
    gp_kernel: KernelSpec = field(repr=False, default=None)
    gp_restarts: int = 8
    threads: int = 1

    # PCE
    pce_degree: int = 2
    pce_quad: int = 4

    # MCMC
    mcmc_walkers: int = 20
    mcmc_steps: int = 10000
    mcmc_stretch_a: float = 2.0
    prune_alpha: float = 0.2
    prune_gamma: float = 5.0

    # influence
    influence_mode: str = "embedded"
    influence_max_samples: int = 4000

    # separability
    upscaled_model: UpscaledBeamModel = field(repr=False, default=None)
    lambda_grid: np.ndarray = field(repr=False, default=None)
    sep_nodes: np.ndarray = field(repr=False, default=None)
    sep_delta_max: float | None = None
    sep_kernel: KernelSpec = field(repr=False, default=None)
    sep_restarts: int = 4
    sep_train_count: int | None = None
    sep_snapshots: Path | None = None

    # artifact locations inside out_dir
    def path(self, name: str) -> Path:
        return self.out_dir / name

    @property
    def observations_path(self) -> Path:
        return self.path("observations.csv")

    @property
    def snapshots_path(self) -> Path:
        return self.path("snapshots.csv")

    @property
    def snapshots_val_path(self) -> Path:
        return self.path("snapshots_val.csv")

    @property
    def gp_models_path(self) -> Path:
        return self.path("gp_models.json")

    @property
    def gp_metrics_path(self) -> Path:
        return self.path("gp_metrics.json")

    def posterior_path(self, mode: str) -> Path:
        return self.path(f"posterior_{mode}.csv")

    def summary_path(self, mode: str) -> Path:
        return self.path(f"summary_{mode}.json")

    def predictive_path(self, mode: str) -> Path:
        return self.path(f"predictive_{mode}.json")

    @property
    def influence_path(self) -> Path:
        return self.path("influence.json")

    @property
    def separability_path(self) -> Path:
        return self.path("separability.csv")

    @property
    def sep_metrics_path(self) -> Path:
        return self.path("separability_gp_metrics.json")


def _build_space(doc: dict) -> ParameterSpace:
    section = _require(doc, "space", "config")
    params = _require(section, "parameters", "space")
    if not isinstance(params, list) or not params:
        raise ConfigError("space.parameters: expected a nonempty list")
    entries = []
    for i, p in enumerate(params):
        where = f"space.parameters[{i}]"
        name = _require(p, "name", where)
        lower = _number(p, "lower", where)
        upper = _number(p, "upper", where)
        prior = _prior_from_dict(_require(p, "prior", where), f"{where}.prior")
        try:
            entries.append(ParameterEntry(name, lower, upper, prior))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    embedded = section.get("embedded")
    if embedded is None:
        return ParameterSpace(entries=tuple(entries))
    where = "space.embedded"
    target = _require(embedded, "parameter", where)
    names = [e.name for e in entries]
    if target not in names:
        raise ConfigError(f"{where}.parameter: {target!r} is not a declared parameter")
    sigma_prior = _prior_from_dict(_require(embedded, "sigma_prior", where), f"{where}.sigma_prior")
    try:
        return ParameterSpace(
            entries=tuple(entries),
            embedded_index=names.index(target),
            embedded_sigma_prior=sigma_prior,
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _kernel_from(doc: dict, where: str, default_bounds: KernelSpec) -> KernelSpec:
    family = doc.get("kernel", default_bounds.family)
    bounds = doc.get("bounds", {})

    def pair(key: str, fallback: tuple[float, float]) -> tuple[float, float]:
        if key not in bounds:
            return fallback
        v = bounds[key]
        if not isinstance(v, list) or len(v) != 2:
            raise ConfigError(f"{where}.bounds.{key}: expected [lo, hi]")
        lo, hi = float(v[0]), float(v[1])
        if not 0.0 < lo < hi:
            raise ConfigError(f"{where}.bounds.{key}: need 0 < lo < hi")
        return lo, hi

    ls_b = pair("length_scale", default_bounds.length_scale_bounds)
    sf_b = pair("signal_var", default_bounds.signal_var_bounds)
    sn_b = pair("noise_var", default_bounds.noise_var_bounds)
    try:
        return KernelSpec(
            family=family,
            length_scale=float(np.sqrt(ls_b[0] * ls_b[1])),
            signal_var=float(np.sqrt(sf_b[0] * sf_b[1])),
            noise_var=float(np.sqrt(sn_b[0] * sn_b[1])),
            length_scale_bounds=ls_b,
            signal_var_bounds=sf_b,
            noise_var_bounds=sn_b,
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a pipeline configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    seed = _integer(doc, "seed", "config", lo=0) if seed_override is None else int(seed_override)
    paths = _require(doc, "paths", "config")
    out_dir = Path(_require(paths, "out_dir", "paths"))
    if not path.is_absolute() and not out_dir.is_absolute():
        out_dir = path.parent / out_dir
    probe = out_dir
    while not probe.exists() and probe.parent != probe:
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"paths.out_dir: {out_dir} is not writable")

    fwd = doc.get("forward", {})
    constants = fwd.get("constants", {})
    try:
        synthetic = SyntheticBeamModel(
            a0=_number(constants, "a0", "forward.constants", lo=1e-12, default=20.0),
            e_ref=_number(constants, "e_ref", "forward.constants", lo=1e-12, default=31000.0),
            phi_p=_number(constants, "phi_p", "forward.constants", lo=1e-12, default=9.4),
            sigma_p0=_number(constants, "sigma_p0", "forward.constants", lo=1e-12, default=755.0),
            c_ref=_number(constants, "c_ref", "forward.constants", lo=1e-12, default=0.5),
            beta_z=_number(constants, "beta_z", "forward.constants", lo=-1.0, hi=1.0, default=0.15),
            h=_number(constants, "h", "forward.constants", lo=1e-12, default=200.0),
        )
    except ValueError as exc:
        raise ConfigError(f"forward.constants: {exc}") from None

    space = _build_space(doc)

    theta_map = fwd.get("theta_true", {})
    theta_true = np.array(
        [
            _number(theta_map, name, "forward.theta_true", default=default)
            for name, default in zip(_PARAM_ORDER, (31000.0, 3.8, 0.5, 0.85))
        ]
    )
    noise = _number(fwd, "noise_std", "forward", lo=0.0, default=0.01)
    grid = None
    if "grid" in fwd:
        gspec = fwd["grid"]
        xs = _axis_values(_require(gspec, "x", "forward.grid"), "forward.grid.x")
        zs = _axis_values(_require(gspec, "z", "forward.grid"), "forward.grid.z")
        grid = np.array([(x, z) for z in zs for x in xs])
    e_field = fwd.get("e_field")
    if e_field is not None:
        _number(e_field, "amplitude", "forward.e_field", lo=-0.9, hi=0.9)
        _number(e_field, "length_mm", "forward.e_field", lo=1e-9)

    gp = doc.get("gp", {})
    design = gp.get("design", {})
    bounds_map = design.get("bounds", {})
    gp_entries = []
    space_by_name = {e.name: e for e in space.entries}
    for name in _PARAM_ORDER:
        if name in bounds_map:
            v = bounds_map[name]
            if not isinstance(v, list) or len(v) != 2:
                raise ConfigError(f"gp.design.bounds.{name}: expected [lo, hi]")
            lo, hi = float(v[0]), float(v[1])
        elif name in space_by_name:
            lo, hi = space_by_name[name].lower, space_by_name[name].upper
        else:
            raise ConfigError(f"gp.design.bounds: no bounds available for {name!r}")
        if not lo < hi:
            raise ConfigError(f"gp.design.bounds.{name}: need lo < hi")
        gp_entries.append(ParameterEntry(name, lo, hi, PriorSpec("uniform", (lo, hi))))
    gp_space = ParameterSpace(entries=tuple(gp_entries))

    sep = doc.get("separability", {})
    up_const = sep.get("constants", {})
    try:
        upscaled = UpscaledBeamModel(
            a0=_number(up_const, "a0", "separability.constants", lo=1e-12, default=20.0),
            e_ref=_number(up_const, "e_ref", "separability.constants", lo=1e-12, default=31000.0),
            l_g=_number(up_const, "l_g", "separability.constants", lo=1e-12, default=500.0),
            d0=_number(up_const, "d0", "separability.constants", lo=1e-12, default=300.0),
            z_t=_number(up_const, "z_t", "separability.constants", default=600.0),
            w_z=_number(up_const, "w_z", "separability.constants", lo=1e-12, default=400.0),
        )
    except ValueError as exc:
        raise ConfigError(f"separability.constants: {exc}") from None
    lam_spec = sep.get("lambda_grid", {"start": 50.0, "stop": 500.0, "count": 20})
    lambda_grid = _axis_values(lam_spec, "separability.lambda_grid")
    if lambda_grid.size < 2 or np.any(np.diff(lambda_grid) <= 0):
        raise ConfigError("separability.lambda_grid: need at least 2 strictly increasing values")
    nodes_spec = sep.get(
        "nodes",
        {"x": {"start": 0.0, "stop": 2800.0, "count": 15}, "z": {"start": 100.0, "stop": 1100.0, "count": 25}},
    )
    nx = _axis_values(_require(nodes_spec, "x", "separability.nodes"), "separability.nodes.x")
    nz = _axis_values(_require(nodes_spec, "z", "separability.nodes"), "separability.nodes.z")
    sep_nodes = np.array([(x, z) for z in nz for x in nx])
    delta_max = None
    if sep.get("delta_max") is not None:
        delta_max = _number(sep, "delta_max", "separability", lo=1e-12)
    sep_snapshots = None
    if sep.get("snapshots") is not None:
        sep_snapshots = Path(sep["snapshots"])
        if not sep_snapshots.is_absolute():
            sep_snapshots = path.parent / sep_snapshots

    mcmc = doc.get("mcmc", {})
    infl = doc.get("influence", {})
    influence_mode = infl.get("mode", "embedded")
    if influence_mode not in ("plain", "embedded"):
        raise ConfigError(f"influence.mode: expected plain or embedded, got {influence_mode!r}")

    threads_req = _integer(gp, "threads", "gp", lo=1, default=1)
    env_cap = os.environ.get("TENDUQ_THREADS")
    if env_cap is not None:
        try:
            cap = int(env_cap)
        except ValueError:
            raise ConfigError(f"TENDUQ_THREADS must be an integer, got {env_cap!r}") from None
        if cap < 1:
            raise ConfigError("TENDUQ_THREADS must be >= 1")
        threads_req = min(threads_req, cap)

    pce = doc.get("pce", {})
    degree = _integer(pce, "degree", "pce", lo=1, hi=10, default=2)
    quad = _integer(pce, "quadrature", "pce", lo=degree + 1, hi=20, default=max(degree + 2, 4))

    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        raw=doc,
        synthetic_model=synthetic,
        theta_true=theta_true,
        obs_noise_std=noise,
        obs_grid=grid,
        e_field_spec=e_field,
        space=space,
        gp_design_space=gp_space,
        gp_train_count=_integer(design, "count", "gp.design", lo=2, default=100),
        gp_val_count=_integer(design, "validation_count", "gp.design", lo=1, default=49),
        gp_kernel=_kernel_from(gp, "gp", KernelSpec(
            family="rbf", length_scale=1.0, signal_var=1.0, noise_var=1e-5,
        )),
        gp_restarts=_integer(gp, "restarts", "gp", lo=1, default=8),
        threads=threads_req,
        pce_degree=degree,
        pce_quad=quad,
        mcmc_walkers=_integer(mcmc, "walkers", "mcmc", lo=2, default=20),
        mcmc_steps=_integer(mcmc, "steps", "mcmc", lo=10, default=10000),
        mcmc_stretch_a=_number(mcmc, "stretch_a", "mcmc", lo=1.0 + 1e-9, default=2.0),
        prune_alpha=_number(mcmc, "prune_alpha", "mcmc", lo=1e-6, hi=1.0, default=0.2),
        prune_gamma=_number(mcmc, "prune_gamma", "mcmc", lo=0.0, default=5.0),
        influence_mode=influence_mode,
        influence_max_samples=_integer(infl, "max_samples", "influence", lo=100, default=4000),
        upscaled_model=upscaled,
        lambda_grid=lambda_grid,
        sep_nodes=sep_nodes,
        sep_delta_max=delta_max,
        sep_kernel=_kernel_from(sep, "separability", KernelSpec(
            family="matern_nu_1_5", length_scale=1.0, signal_var=1.0, noise_var=1e-5,
            signal_var_bounds=(0.001, 10000.0), noise_var_bounds=(1e-8, 0.01),
        )),
        sep_restarts=_integer(sep, "restarts", "separability", lo=1, default=4),
        sep_train_count=(
            _integer(sep, "train_count", "separability", lo=2) if "train_count" in sep else None
        ),
        sep_snapshots=sep_snapshots,
    )
