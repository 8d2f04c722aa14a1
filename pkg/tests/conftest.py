import numpy as np
import pytest

from tenduq.core import ObservationSet, ParameterEntry, ParameterSpace, PriorSpec, latin_hypercube
from tenduq.forward import SyntheticBeamModel, default_observation_grid, eval_f_batch
from tenduq.surrogate import fit_point_gps

# Input-parameter box used for surrogate training designs (wider than the priors).
GP_BOUNDS = {
    "E_cm": (27020.0, 38980.0),
    "p0": (2.008, 5.992),
    "c0": (0.2012, 0.7988),
    "mu": (0.202, 1.198),
}

# Calibration priors: lognormal modulus, uniform contact/friction parameters.
PRIORS = {
    "E_cm": ("lognormal", (33000.0, 3300.0), (25200.0, 37050.0)),
    "p0": ("uniform", (2.1, 5.7), (2.1, 5.7)),
    "c0": ("uniform", (0.21, 0.76), (0.21, 0.76)),
    "mu": ("uniform", (0.21, 1.14), (0.21, 1.14)),
}

THETA_TRUE = np.array([31000.0, 3.8, 0.5, 0.85])


def make_gp_space() -> ParameterSpace:
    entries = tuple(
        ParameterEntry(name, lo, hi, PriorSpec("uniform", (lo, hi)))
        for name, (lo, hi) in GP_BOUNDS.items()
    )
    return ParameterSpace(entries=entries)


def make_prior_space(embedded: bool = False) -> ParameterSpace:
    entries = tuple(
        ParameterEntry(name, lo, hi, PriorSpec(kind, params))
        for name, (kind, params, (lo, hi)) in PRIORS.items()
    )
    if not embedded:
        return ParameterSpace(entries=entries)
    return ParameterSpace(
        entries=entries,
        embedded_index=0,
        embedded_sigma_prior=PriorSpec("uniform", (250.0, 7410.0)),
    )


@pytest.fixture(scope="session")
def beam_model() -> SyntheticBeamModel:
    return SyntheticBeamModel()


@pytest.fixture(scope="session")
def surrogate_problem(beam_model):
    """100-point LHS design, per-point GP ensemble and a held-out set."""
    gp_space = make_gp_space()
    points, groups = default_observation_grid()
    design = latin_hypercube(gp_space, np.random.default_rng(2024), 100)
    outputs = eval_f_batch(beam_model, points, design)
    ensemble = fit_point_gps(design, outputs, restarts=4, seed=11, n_threads=1)
    val_design = latin_hypercube(gp_space, np.random.default_rng(2025), 49)
    val_outputs = eval_f_batch(beam_model, points, val_design)
    return {
        "model": beam_model,
        "gp_space": gp_space,
        "points": points,
        "groups": groups,
        "design": design,
        "outputs": outputs,
        "ensemble": ensemble,
        "val_design": val_design,
        "val_outputs": val_outputs,
    }


def normalized_observations(ensemble, points, groups, values, noise_std):
    """Observation set expressed in the ensemble's normalized output units."""
    y_norm = np.asarray(ensemble.normalizer.normalize_outputs(values))
    return ObservationSet(points=points, values=y_norm, noise_std=noise_std, groups=groups)
