"""Batch pipeline driver: generate, train-gp, calibrate, influence, separability.

Each subcommand is a pipeline stage with explicit file handoffs inside the
configured output directory, so stages can be rerun individually. Exit
codes: 0 success, 2 configuration error, 3 numerical failure. Stage RNG
streams are derived from the single config seed, which makes the numeric
artifacts of a full run byte-identical across repetitions.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from .calibrate import (
    LikelihoodSpec,
    SamplerStuckError,
    load_posterior_csv,
    posterior_summary,
    predictive_check,
    run_two_phase,
)
from .config import ConfigError, RunConfig, load_config
from .core import ObservationSet
from .forward import SnapshotTable, eval_f_batch, generate_observations, load_snapshots, save_snapshots
from .influence import influence_report
from .separability import separability_map, train_moment_surrogates
from .surrogate import GpEnsemble, GpFitError, fit_point_gps
from . import core

__all__ = ["main"]


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stage,)))


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(stage,)).generate_state(1)[0])


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def _require_artifact(path: Path, hint: str) -> None:
    if not path.is_file():
        raise ConfigError(f"missing input artifact {path} (run `tenduq {hint}` first)")


def _e_field_callable(spec: dict | None):
    if spec is None:
        return None
    amp = float(spec["amplitude"])
    length = float(spec["length_mm"])
    return lambda x, z: 1.0 + amp * math.sin(2.0 * math.pi * x / length)


def cmd_generate(config: RunConfig) -> None:
    """Write the synthetic observation set and the LHS snapshot tables."""
    config.out_dir.mkdir(parents=True, exist_ok=True)
    obs = generate_observations(
        config.synthetic_model,
        config.theta_true,
        config.obs_grid,
        config.obs_noise_std,
        _stage_rng(config.seed, 1),
        e_field=_e_field_callable(config.e_field_spec),
    )
    obs.to_csv(config.observations_path)

    names = tuple(e.name for e in config.gp_design_space.entries)
    for stage, count, path in (
        (2, config.gp_train_count, config.snapshots_path),
        (3, config.gp_val_count, config.snapshots_val_path),
    ):
        design = core.latin_hypercube(config.gp_design_space, _stage_rng(config.seed, stage), count)
        outputs = eval_f_batch(config.synthetic_model, obs.points, design)
        save_snapshots(
            SnapshotTable(design=design, outputs=outputs, points=obs.points, param_names=names),
            path,
        )
    print(f"wrote {config.observations_path} ({len(obs)} points), "
          f"{config.snapshots_path} ({config.gp_train_count} runs), "
          f"{config.snapshots_val_path} ({config.gp_val_count} runs)")


def _load_table(path: Path) -> SnapshotTable:
    try:
        return load_snapshots(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train_gp(config: RunConfig) -> None:
    """Fit one GP per observation point and record validation metrics."""
    _require_artifact(config.snapshots_path, "generate")
    _require_artifact(config.snapshots_val_path, "generate")
    table = _load_table(config.snapshots_path)
    val = _load_table(config.snapshots_val_path)
    ensemble = fit_point_gps(
        table.design,
        table.outputs,
        spec_bounds=config.gp_kernel,
        restarts=config.gp_restarts,
        seed=_stage_seed(config.seed, 4),
        n_threads=config.threads,
    )
    ensemble.to_json(config.gp_models_path)
    metrics = {
        "train": ensemble.validate(table.design, table.outputs).to_dict(),
        "validation": ensemble.validate(val.design, val.outputs).to_dict(),
    }
    _write_json(config.gp_metrics_path, metrics)
    r2 = metrics["validation"]["R2"]
    print(f"trained {len(ensemble)} point GPs; validation R2 = {r2:.4f} "
          f"-> {config.gp_models_path}")


def _normalized_problem(config: RunConfig):
    """Load GPs and observations; return everything in normalized output units."""
    _require_artifact(config.gp_models_path, "train-gp")
    _require_artifact(config.observations_path, "generate")
    ensemble = GpEnsemble.from_json(config.gp_models_path)
    if config.obs_noise_std <= 0.0:
        raise ConfigError("forward.noise_std must be > 0 for calibration")
    obs_raw = ObservationSet.from_csv(config.observations_path, noise_std=config.obs_noise_std)
    y_norm = np.asarray(ensemble.normalizer.normalize_outputs(obs_raw.values))
    obs_norm = obs_raw.with_values(y_norm)
    return ensemble, obs_norm


def _likelihood_spec(config: RunConfig, ensemble: GpEnsemble, mode: str) -> LikelihoodSpec:
    if mode == "embedded" and config.space.embedded_index is None:
        raise ConfigError("embedded mode requires space.embedded in the config")
    return LikelihoodSpec(
        mode=mode,
        noise_std=config.obs_noise_std,
        emulator=ensemble.predict_mean_normalized,
        pce_degree=config.pce_degree,
        pce_quad=config.pce_quad,
        embedded_index=config.space.embedded_index or 0,
    )


def cmd_calibrate(config: RunConfig, mode: str, plots: bool = False) -> None:
    """Two-phase ensemble MCMC with walker pruning; posterior artifacts."""
    ensemble, obs_norm = _normalized_problem(config)
    space_s = config.space.extended() if mode == "embedded" else config.space
    spec = _likelihood_spec(config, ensemble, mode)
    loglike = spec.loglike_batch(obs_norm)
    rng = _stage_rng(config.seed, 5 if mode == "plain" else 6)
    burn, final = run_two_phase(
        space_s,
        loglike,
        config.mcmc_walkers,
        config.mcmc_steps,
        rng,
        stretch_a=config.mcmc_stretch_a,
        alpha=config.prune_alpha,
        gamma=config.prune_gamma,
    )
    final.to_csv(config.posterior_path(mode), names=space_s.names)
    summary = posterior_summary(final, names=space_s.names)
    payload = summary.to_dict()
    payload["mode"] = mode
    payload["diagnostics"] = {
        "burn_in_acceptance": burn.config.get("acceptance_rate"),
        "production_acceptance": final.config.get("acceptance_rate"),
        "walkers_retained_burn_in": int(burn.retained.size),
        "walkers_retained_final": int(final.retained.size),
        "steps_per_phase": config.mcmc_steps,
    }
    _write_json(config.summary_path(mode), payload)
    report = predictive_check(final, obs_norm, spec)
    _write_json(config.predictive_path(mode), report.to_dict())
    if plots:
        from .plots import save_predictive_plot

        save_predictive_plot(obs_norm, report, config.path(f"predictive_{mode}.svg"))
    print(f"calibrated ({mode}): retained {final.retained.size}/{config.mcmc_walkers} walkers, "
          f"coverage {report.coverage_95_pct:.0f}% -> {config.summary_path(mode)}")


def cmd_influence(config: RunConfig, plots: bool = False) -> None:
    """Case-deletion influence of the observation groups on the posterior."""
    mode = config.influence_mode
    _require_artifact(config.posterior_path(mode), f"calibrate --mode {mode}")
    ensemble, obs_norm = _normalized_problem(config)
    if not obs_norm.groups:
        raise ConfigError("observation file has no group column; influence needs a grouping")
    samples, _, names = load_posterior_csv(config.posterior_path(mode))
    if samples.shape[0] > config.influence_max_samples:
        stride = int(np.ceil(samples.shape[0] / config.influence_max_samples))
        samples = samples[::stride]
    spec = _likelihood_spec(config, ensemble, mode)
    report = influence_report(samples, obs_norm, obs_norm.groups, spec, param_names=names)
    report.to_json(config.influence_path)
    if plots:
        from .plots import save_influence_plot

        save_influence_plot(report, config.path("influence.svg"))
    top = report.subsets[int(np.argmax(report.global_normalized))]
    print(f"influence over {len(report.subsets)} subsets (mode {mode}); "
          f"most influential: {top} -> {config.influence_path}")


def cmd_separability(config: RunConfig, plots: bool = False) -> None:
    """Propagate the embedded posterior and map depth identifiability."""
    _require_artifact(config.summary_path("embedded"), "calibrate --mode embedded")
    with open(config.summary_path("embedded")) as fh:
        summary = json.load(fh)
    by_name = {p["name"]: p for p in summary.get("parameters", [])}
    target = config.space.entries[config.space.embedded_index or 0].name
    sigma_name = f"sigma_{target}"
    if target not in by_name or sigma_name not in by_name:
        raise ConfigError(
            f"summary {config.summary_path('embedded')} lacks {target!r}/{sigma_name!r}"
        )
    post_mean = float(by_name[target]["mean"])
    post_std = float(by_name[sigma_name]["mean"])
    model = config.upscaled_model
    if config.sep_snapshots is not None:
        _require_artifact(config.sep_snapshots, "generate")
        model = _load_table(config.sep_snapshots)
    surrogates = train_moment_surrogates(
        model,
        (post_mean, post_std),
        config.sep_nodes,
        config.lambda_grid,
        pce_config=(config.pce_degree, config.pce_quad),
        delta_max=config.sep_delta_max,
        kernel=config.sep_kernel,
        restarts=config.sep_restarts,
        seed=_stage_seed(config.seed, 7),
        train_count=config.sep_train_count,
    )
    _write_json(
        config.sep_metrics_path,
        {tag: rep.to_dict() for tag, rep in surrogates.metrics.items()},
    )
    smap = separability_map(surrogates, config.sep_nodes, n_threads=config.threads)
    smap.to_csv(config.separability_path)
    if plots:
        from .plots import save_separability_plot

        save_separability_plot(smap, config.path("separability.svg"))
    n_sep = sum(1 for r in smap.records if r.separable)
    print(f"separability: {n_sep}/{len(smap.records)} nodes separable "
          f"(delta_max {surrogates.delta_max:g} mm) -> {config.separability_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tenduq",
        description="Uncertainty-aware calibration and tendon-break identifiability pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str, mode_flag: bool = False, plots_flag: bool = True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="path to the run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if mode_flag:
            p.add_argument("--mode", choices=("plain", "embedded"), default="plain")
        if plots_flag:
            p.add_argument("--plots", action="store_true", help="emit SVG figures")
        return p

    add("generate", "write synthetic observations and snapshot tables", plots_flag=False)
    add("train-gp", "train per-point GP surrogates on the snapshot table", plots_flag=False)
    add("calibrate", "run two-phase ensemble MCMC calibration", mode_flag=True)
    add("influence", "compute case-deletion influence diagnostics")
    add("separability", "map depth identifiability on the upscaled model")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed)
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "train-gp":
            cmd_train_gp(config)
        elif args.command == "calibrate":
            cmd_calibrate(config, mode=args.mode, plots=args.plots)
        elif args.command == "influence":
            cmd_influence(config, plots=args.plots)
        elif args.command == "separability":
            cmd_separability(config, plots=args.plots)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GpFitError, SamplerStuckError, sla.LinAlgError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
