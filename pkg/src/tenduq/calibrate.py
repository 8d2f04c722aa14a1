"""Bayesian calibration: likelihoods, ensemble MCMC, walker pruning, summaries.

The sampler is the affine-invariant stretch-move ensemble with the
canonical two-half update and stretch parameter a = 2. Log-posterior
evaluations are batched per half-ensemble, so likelihood callables take a
matrix of parameter rows and return one value per row. The embedded
likelihood promotes one parameter to a lognormal random variable, pushes
it through the emulator with a small polynomial-chaos expansion at every
evaluation, and widens the Gaussian noise by the propagated variance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ObservationSet, ParameterSpace, prior_log_density, sample_prior
from .pce import StochasticInput, build_pce, pce_moments, projection_operator

__all__ = [
    "LikelihoodSpec",
    "PosteriorEnsemble",
    "SamplerStuckError",
    "SummaryTable",
    "PredictiveReport",
    "log_likelihood_plain",
    "log_likelihood_embedded",
    "run_ensemble_mcmc",
    "cluster_and_prune",
    "posterior_summary",
    "predictive_check",
    "run_two_phase",
]

_LOG_2PI = math.log(2.0 * math.pi)


class SamplerStuckError(RuntimeError):
    """Raised when no proposal is accepted for an extended stretch of steps."""


def log_likelihood_plain(theta: np.ndarray, obs: ObservationSet, emulator: Callable) -> float:
    """Independent-Gaussian log likelihood using the emulator mean response.

    ``emulator`` maps a parameter vector to the predicted response at every
    observation point, in the same units as ``obs.values`` (the pipeline
    works in normalized output units); ``obs.noise_std`` is the noise level
    in those units.
    """
    if obs.noise_std <= 0.0:
        raise ValueError("likelihood requires noise_std > 0")
    theta = np.asarray(theta, dtype=float)
    pred = np.atleast_1d(np.asarray(emulator(theta), dtype=float))
    resid = obs.values - pred
    n = resid.size
    sigma = obs.noise_std
    return float(-0.5 * n * _LOG_2PI - n * math.log(sigma) - np.sum(resid**2) / (2.0 * sigma**2))


def log_likelihood_embedded(
    theta_ext: np.ndarray,
    obs: ObservationSet,
    emulator: Callable,
    pce_config: tuple[int, int] = (2, 4),
    embedded_index: int = 0,
) -> float:
    """Embedded-uncertainty log likelihood.

    ``theta_ext`` is (theta..., sigma_embed). The embedded parameter is
    replaced by a lognormal variable with mean theta[embedded_index] and
    std sigma_embed, propagated through ``emulator`` by pseudo-spectral
    projection; each observation contributes a Gaussian term with variance
    sigma_PCE^2 + noise_std^2.
    """
    theta_ext = np.asarray(theta_ext, dtype=float)
    theta = theta_ext[:-1]
    sigma_embed = float(theta_ext[-1])
    if sigma_embed <= 0.0:
        raise ValueError("embedded spread must be > 0")
    degree, q = pce_config

    def emulator_1d(value: float) -> np.ndarray:
        t = theta.copy()
        t[embedded_index] = value
        return np.atleast_1d(np.asarray(emulator(t), dtype=float))

    stoch = StochasticInput("lognormal", float(theta[embedded_index]), sigma_embed)
    expansion = build_pce(emulator_1d, stoch, degree, q)
    mean, var = pce_moments(expansion)
    if np.any(var < -1e-10):
        raise ValueError("PCE produced a negative variance beyond tolerance")
    var_tot = np.maximum(var, 0.0) + obs.noise_std**2
    resid = obs.values - mean
    return float(np.sum(-0.5 * _LOG_2PI - 0.5 * np.log(var_tot) - resid**2 / (2.0 * var_tot)))


def _embedded_moments_batch(
    thetas_ext: np.ndarray,
    emulator_batch: Callable[[np.ndarray], np.ndarray],
    embedded_index: int,
    degree: int,
    q: int,
) -> tuple[np.ndarray, np.ndarray]:
    """PCE mean/variance for a batch of extended parameter rows.

    Returns arrays of shape (batch, n_points) using batch * q emulator
    rows in a single call.
    """
    thetas_ext = np.atleast_2d(np.asarray(thetas_ext, dtype=float))
    b, d_ext = thetas_ext.shape
    d = d_ext - 1
    rule, wpsi = projection_operator(degree, q)
    means = thetas_ext[:, embedded_index]
    sigmas = thetas_ext[:, -1]
    scale2 = np.log1p((sigmas / means) ** 2)
    loc = np.log(means) - 0.5 * scale2
    physical = np.exp(loc[:, None] + np.sqrt(scale2)[:, None] * rule.nodes[None, :])  # (B, q)
    rows = np.repeat(thetas_ext[:, :d], q, axis=0)  # (B*q, d)
    rows[:, embedded_index] = physical.ravel()
    preds = np.asarray(emulator_batch(rows), dtype=float).reshape(b, q, -1)
    coeffs = np.einsum("bqn,qa->ban", preds, wpsi)  # (B, degree+1, N)
    mean = coeffs[:, 0, :]
    var = np.sum(coeffs[:, 1:, :] ** 2, axis=1)
    return mean, var


@dataclass(frozen=True)
class LikelihoodSpec:
    """Assembled likelihood: mode, noise level, emulator and PCE settings.

    ``emulator`` is batch-callable: a (batch, dim) matrix of parameter rows
    maps to a (batch, n_points) matrix of predictions in the same units as
    the observations it will be paired with.
    """

    mode: str
    noise_std: float
    emulator: Callable[[np.ndarray], np.ndarray]
    pce_degree: int = 2
    pce_quad: int = 4
    embedded_index: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("plain", "embedded"):
            raise ValueError(f"unknown likelihood mode {self.mode!r}")
        if self.noise_std <= 0.0:
            raise ValueError("noise_std must be > 0")

    def per_point_terms(self, thetas: np.ndarray, obs: ObservationSet) -> np.ndarray:
        """Per-observation log-likelihood contributions, shape (batch, N)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        sigma2 = self.noise_std**2
        if self.mode == "plain":
            preds = np.asarray(self.emulator(thetas), dtype=float)
            resid = obs.values[None, :] - preds
            return -0.5 * _LOG_2PI - 0.5 * math.log(sigma2) - resid**2 / (2.0 * sigma2)
        mean, var = _embedded_moments_batch(
            thetas, self.emulator, self.embedded_index, self.pce_degree, self.pce_quad
        )
        var_tot = np.maximum(var, 0.0) + sigma2
        resid = obs.values[None, :] - mean
        return -0.5 * _LOG_2PI - 0.5 * np.log(var_tot) - resid**2 / (2.0 * var_tot)

    def loglike_batch(self, obs: ObservationSet) -> Callable[[np.ndarray], np.ndarray]:
        """Batched total log likelihood callable for the sampler."""

        def fn(thetas: np.ndarray) -> np.ndarray:
            return np.sum(self.per_point_terms(thetas, obs), axis=1)

        return fn

    def predict_moments(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and propagated variance (excluding noise) at one point."""
        theta = np.asarray(theta, dtype=float)
        if self.mode == "plain":
            pred = np.asarray(self.emulator(theta[None, :]), dtype=float)[0]
            return pred, np.zeros_like(pred)
        mean, var = _embedded_moments_batch(
            theta[None, :], self.emulator, self.embedded_index, self.pce_degree, self.pce_quad
        )
        return mean[0], np.maximum(var[0], 0.0)


@dataclass(frozen=True)
class PosteriorEnsemble:
    """Walker chains with per-step log-posterior traces.

    ``retained`` indexes the walkers surviving pruning (all walkers for a
    freshly sampled ensemble). ``restart_states`` holds the per-walker
    initial states for a follow-up run when pruning resampled the pruned
    walkers; it is None otherwise.
    """

    chains: np.ndarray
    logp: np.ndarray
    retained: np.ndarray
    config: dict = field(default_factory=dict)
    restart_states: np.ndarray | None = None

    def __post_init__(self) -> None:
        chains = np.asarray(self.chains, dtype=float)
        logp = np.asarray(self.logp, dtype=float)
        if chains.ndim != 3 or logp.shape != chains.shape[:2]:
            raise ValueError("chains must be (walkers, steps, dim) with matching logp")
        object.__setattr__(self, "chains", chains)
        object.__setattr__(self, "logp", logp)
        object.__setattr__(self, "retained", np.asarray(self.retained, dtype=int))

    @property
    def n_walkers(self) -> int:
        return self.chains.shape[0]

    @property
    def n_steps(self) -> int:
        return self.chains.shape[1]

    @property
    def dim(self) -> int:
        return self.chains.shape[2]

    def flat_samples(self, burn_in: int = 0) -> np.ndarray:
        """Post-burn-in samples of retained walkers, shape (M, dim)."""
        return self.chains[self.retained, burn_in:, :].reshape(-1, self.dim)

    def flat_logp(self, burn_in: int = 0) -> np.ndarray:
        return self.logp[self.retained, burn_in:].reshape(-1)

    def last_states(self) -> np.ndarray:
        return self.chains[:, -1, :].copy()

    def to_csv(self, path, names: list[str]) -> None:
        """Write retained chains as ``walker,step,logp,<param names...>`` rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["walker", "step", "logp"] + list(names))
            for w in self.retained:
                for t in range(self.n_steps):
                    row = [str(int(w)), str(t), repr(float(self.logp[w, t]))]
                    row += [repr(float(v)) for v in self.chains[w, t]]
                    writer.writerow(row)


def load_posterior_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read a posterior CSV back into (samples, logp, parameter names)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["walker", "step", "logp"]:
            raise ValueError(f"{path}: not a posterior sample file")
        names = header[3:]
        rows = []
        logps = []
        for row in reader:
            if not row:
                continue
            logps.append(float(row[2]))
            rows.append([float(v) for v in row[3:]])
    return np.array(rows), np.array(logps), names


def run_ensemble_mcmc(
    space: ParameterSpace,
    loglike: Callable[[np.ndarray], np.ndarray],
    walkers: int,
    steps: int,
    rng: np.random.Generator,
    stretch_a: float = 2.0,
    init: np.ndarray | None = None,
    stuck_limit: int = 500,
) -> PosteriorEnsemble:
    """Affine-invariant stretch-move ensemble sampler.

    ``loglike`` receives a matrix of in-bounds parameter rows and returns
    one log-likelihood per row; the log posterior adds the prior density of
    ``space``, which also rejects out-of-bounds proposals by returning
    -inf. Walkers update in two half-ensembles per step with proposals
    y = x_j + z (x_k - x_j), z ~ g(z) proportional to 1/sqrt(z) on
    [1/a, a], accepted with probability min(1, z^(dim-1) exp(dlogp)).
    """
    dim = space.dim
    if walkers < 2 * dim:
        raise ValueError("need walkers >= 2 * dim")
    if walkers % 2:
        raise ValueError("walkers must be even to split into half-ensembles")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if stretch_a <= 1.0:
        raise ValueError("stretch parameter must be > 1")

    def logpost(thetas: np.ndarray) -> np.ndarray:
        lp = np.asarray(prior_log_density(space, thetas), dtype=float)
        out = np.full(thetas.shape[0], -np.inf)
        ok = np.isfinite(lp)
        if np.any(ok):
            out[ok] = lp[ok] + np.asarray(loglike(thetas[ok]), dtype=float)
        return out

    cur = sample_prior(space, rng, walkers) if init is None else np.array(init, dtype=float)
    if cur.shape != (walkers, dim):
        raise ValueError("init must have shape (walkers, dim)")
    logpost_cur = logpost(cur)

    chains = np.empty((walkers, steps, dim))
    logp = np.empty((walkers, steps))
    half = walkers // 2
    halves = (np.arange(half), np.arange(half, walkers))
    accepted_total = 0
    stuck_streak = 0
    for t in range(steps):
        accepted_step = 0
        for h in (0, 1):
            idx = halves[h]
            comp = halves[1 - h]
            s = idx.size
            u = rng.random(s)
            z = ((stretch_a - 1.0) * u + 1.0) ** 2 / stretch_a
            partners = comp[rng.integers(0, comp.size, s)]
            prop = cur[partners] + z[:, None] * (cur[idx] - cur[partners])
            lp_prop = logpost(prop)
            with np.errstate(invalid="ignore"):
                logr = (dim - 1) * np.log(z) + lp_prop - logpost_cur[idx]
            # A walker starting at -inf accepts any finite proposal.
            logr = np.where(
                np.isfinite(logpost_cur[idx]),
                logr,
                np.where(np.isfinite(lp_prop), np.inf, -np.inf),
            )
            accept = np.log(rng.random(s)) < logr
            cur[idx[accept]] = prop[accept]
            logpost_cur[idx[accept]] = lp_prop[accept]
            accepted_step += int(np.sum(accept))
        chains[:, t, :] = cur
        logp[:, t] = logpost_cur
        accepted_total += accepted_step
        stuck_streak = stuck_streak + 1 if accepted_step == 0 else 0
        if stuck_streak >= stuck_limit:
            raise SamplerStuckError(
                f"no proposal accepted in {stuck_limit} consecutive steps "
                f"(step {t + 1}/{steps}); the posterior may be degenerate"
            )
    config = {
        "walkers": walkers,
        "steps": steps,
        "stretch_a": stretch_a,
        "acceptance_rate": accepted_total / (walkers * steps),
    }
    return PosteriorEnsemble(chains=chains, logp=logp, retained=np.arange(walkers), config=config)


def cluster_and_prune(
    ensemble: PosteriorEnsemble,
    alpha: float = 0.2,
    gamma: float = 5.0,
    rng: np.random.Generator | None = None,
    resample: bool = False,
) -> PosteriorEnsemble:
    """Cluster walkers by mean terminal log-posterior and prune the stragglers.

    The mean log posterior of each walker over the final floor(alpha * T)
    steps is sorted; jumps in consecutive differences larger than gamma
    times the median difference split the ensemble into clusters. The
    largest cluster is retained (ties go to the higher log-posterior
    cluster) and the retention threshold is its smallest member. With
    ``resample`` the pruned walkers' final states are replaced by convex
    mixes of two distinct retained walkers, giving restart states for a
    follow-up run; without it only the retained subset is returned.

    When the median difference is zero, jumps require d > 0 and
    d > gamma * mean(d), so an ensemble of identical walkers is kept whole.
    """
    n = ensemble.n_walkers
    if n < 2:
        raise ValueError("pruning needs at least 2 walkers")
    window = int(alpha * ensemble.n_steps)
    if window < 1:
        raise ValueError("steps * alpha must be >= 1")
    ell = ensemble.logp[:, ensemble.n_steps - window :].mean(axis=1)
    order = np.argsort(ell, kind="stable")
    ell_sorted = ell[order]
    diffs = np.diff(ell_sorted)
    med = float(np.median(diffs)) if diffs.size else 0.0
    if med > 0.0:
        jumps = diffs > gamma * med
    else:
        jumps = (diffs > 0.0) & (diffs > gamma * float(np.mean(diffs)))
    boundaries = np.flatnonzero(jumps)
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries + 1, [n]))
    sizes = ends - starts
    best = int(np.flatnonzero(sizes == sizes.max())[-1])  # tie: higher-ell cluster
    threshold = float(ell_sorted[starts[best]])
    retained = np.flatnonzero(ell >= threshold)

    config = dict(ensemble.config)
    config.update(
        {
            "prune_alpha": alpha,
            "prune_gamma": gamma,
            "prune_threshold": threshold,
            "n_retained": int(retained.size),
        }
    )
    restart = None
    if resample:
        if rng is None:
            raise ValueError("resampling requires an rng")
        if retained.size < 2:
            raise ValueError("resampling needs at least 2 retained walkers")
        restart = ensemble.last_states()
        pruned = np.setdiff1d(np.arange(n), retained)
        for i in pruned:
            a, b = rng.choice(retained, size=2, replace=False)
            w = rng.uniform()
            restart[i] = w * restart[a] + (1.0 - w) * restart[b]
    return PosteriorEnsemble(
        chains=ensemble.chains,
        logp=ensemble.logp,
        retained=retained,
        config=config,
        restart_states=restart,
    )


@dataclass(frozen=True)
class SummaryTable:
    """Per-parameter posterior mean, std and equal-tailed 95% interval."""

    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "parameters": [
                {
                    "name": self.names[k],
                    "mean": float(self.mean[k]),
                    "std": float(self.std[k]),
                    "ci95": [float(self.ci_lo[k]), float(self.ci_hi[k])],
                }
                for k in range(len(self.names))
            ],
        }


def posterior_summary(
    ensemble: PosteriorEnsemble, burn_in: int = 0, names: list[str] | None = None
) -> SummaryTable:
    """Summary statistics over retained post-burn-in samples."""
    if burn_in >= ensemble.n_steps:
        raise ValueError("burn_in must be smaller than the chain length")
    samples = ensemble.flat_samples(burn_in)
    if names is None:
        names = [f"theta_{k}" for k in range(ensemble.dim)]
    return SummaryTable(
        names=tuple(names),
        mean=samples.mean(axis=0),
        std=samples.std(axis=0),
        ci_lo=np.quantile(samples, 0.025, axis=0),
        ci_hi=np.quantile(samples, 0.975, axis=0),
        n_samples=samples.shape[0],
    )


@dataclass(frozen=True)
class PredictiveReport:
    """Residual and |z| statistics of the posterior-mean prediction."""

    mode: str
    theta_hat: np.ndarray
    pred_mean: np.ndarray
    pred_std: np.ndarray
    residuals: np.ndarray
    z_values: np.ndarray
    coverage_95_pct: float

    def to_dict(self) -> dict:
        r = self.residuals
        az = np.abs(self.z_values)
        return {
            "mode": self.mode,
            "theta_hat": [float(v) for v in self.theta_hat],
            "residual": {
                "mean": float(np.mean(r)),
                "rmse": float(np.sqrt(np.mean(r**2))),
                "median": float(np.median(r)),
                "mad": float(np.median(np.abs(r - np.median(r)))),
            },
            "abs_z": {
                "mean": float(np.mean(az)),
                "std": float(np.std(az)),
                "median": float(np.median(az)),
                "mad": float(np.median(np.abs(az - np.median(az)))),
                "pct_gt_2": float(100.0 * np.mean(az > 2.0)),
                "pct_lt_05": float(100.0 * np.mean(az < 0.5)),
            },
            "coverage_95_pct": self.coverage_95_pct,
        }


def predictive_check(
    ensemble: PosteriorEnsemble,
    obs: ObservationSet,
    likelihood_spec: LikelihoodSpec,
    burn_in: int = 0,
) -> PredictiveReport:
    """Posterior-predictive diagnostics at the posterior mean.

    z values divide the residuals by the total predictive standard
    deviation sqrt(sigma_PCE^2 + sigma^2) (plain mode: sigma alone);
    coverage counts |z| <= 1.96.
    """
    samples = ensemble.flat_samples(burn_in)
    if samples.shape[0] == 0:
        raise ValueError("ensemble has no retained samples")
    theta_hat = samples.mean(axis=0)
    mean, var = likelihood_spec.predict_moments(theta_hat)
    std_tot = np.sqrt(var + likelihood_spec.noise_std**2)
    resid = obs.values - mean
    z = resid / std_tot
    coverage = float(100.0 * np.mean(np.abs(z) <= 1.96))
    return PredictiveReport(
        mode=likelihood_spec.mode,
        theta_hat=theta_hat,
        pred_mean=mean,
        pred_std=std_tot,
        residuals=resid,
        z_values=z,
        coverage_95_pct=coverage,
    )


def run_two_phase(
    space: ParameterSpace,
    loglike: Callable[[np.ndarray], np.ndarray],
    walkers: int,
    steps: int,
    rng: np.random.Generator,
    stretch_a: float = 2.0,
    alpha: float = 0.2,
    gamma: float = 5.0,
) -> tuple[PosteriorEnsemble, PosteriorEnsemble]:
    """Burn-in phase, prune with resampling, production phase, final prune.

    Returns (burn_in_ensemble, final_ensemble); the final ensemble carries
    the production chains with the post-run retention set, and the whole
    first phase is treated as burn-in.
    """
    phase1 = run_ensemble_mcmc(space, loglike, walkers, steps, rng, stretch_a)
    pruned = cluster_and_prune(phase1, alpha, gamma, rng, resample=True)
    phase2 = run_ensemble_mcmc(
        space, loglike, walkers, steps, rng, stretch_a, init=pruned.restart_states
    )
    final = cluster_and_prune(phase2, alpha, gamma, resample=False)
    return pruned, final
