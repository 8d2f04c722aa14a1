"""Gaussian-process regression for response-surface emulation.

Supports the two usage modes of the workflow: a family of per-observation-
point GPs over the calibration parameters (sharing one input normalizer and
one joint output normalizer), and a single joint GP over (coordinates,
parameters). Kernels are isotropic RBF or Matern nu=3/2, each with a white
noise term on the training diagonal. Hyperparameters maximize the log
marginal likelihood by Nelder-Mead over log-parameters with multiple
restarts; no kernel gradients are needed.
"""

from __future__ import annotations

import base64
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg as sla
from scipy.optimize import minimize

from .core import Normalizer, latin_hypercube_unit

__all__ = [
    "KernelSpec",
    "GpModel",
    "GpFitError",
    "MetricsReport",
    "kernel_eval",
    "gp_fit",
    "gp_predict",
    "gp_validate",
    "log_marginal_likelihood",
    "GpEnsemble",
    "fit_point_gps",
    "default_calibration_kernel",
    "default_moment_kernel",
]

_SQRT3 = math.sqrt(3.0)


class GpFitError(RuntimeError):
    """Raised when the training covariance cannot be factorized."""


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic kernel with white noise: family, values and search bounds."""

    family: str
    length_scale: float
    signal_var: float
    noise_var: float
    length_scale_bounds: tuple[float, float] = (0.01, 100.0)
    signal_var_bounds: tuple[float, float] = (0.001, 1000.0)
    noise_var_bounds: tuple[float, float] = (1e-7, 0.1)

    def __post_init__(self) -> None:
        if self.family not in ("rbf", "matern_nu_1_5"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        for name, value, bounds in (
            ("length_scale", self.length_scale, self.length_scale_bounds),
            ("signal_var", self.signal_var, self.signal_var_bounds),
            ("noise_var", self.noise_var, self.noise_var_bounds),
        ):
            lo, hi = bounds
            if not 0.0 < lo < hi:
                raise ValueError(f"{name} bounds must satisfy 0 < lo < hi")
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside bounds [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "length_scale": self.length_scale,
            "signal_var": self.signal_var,
            "noise_var": self.noise_var,
            "length_scale_bounds": list(self.length_scale_bounds),
            "signal_var_bounds": list(self.signal_var_bounds),
            "noise_var_bounds": list(self.noise_var_bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(
            family=d["family"],
            length_scale=d["length_scale"],
            signal_var=d["signal_var"],
            noise_var=d["noise_var"],
            length_scale_bounds=tuple(d["length_scale_bounds"]),
            signal_var_bounds=tuple(d["signal_var_bounds"]),
            noise_var_bounds=tuple(d["noise_var_bounds"]),
        )


def default_calibration_kernel(family: str = "rbf") -> KernelSpec:
    """Kernel template with the calibration-GP hyperparameter bounds."""
    return KernelSpec(
        family=family,
        length_scale=1.0,
        signal_var=1.0,
        noise_var=1e-5,
        length_scale_bounds=(0.01, 100.0),
        signal_var_bounds=(0.001, 1000.0),
        noise_var_bounds=(1e-7, 0.1),
    )


def default_moment_kernel(family: str = "matern_nu_1_5") -> KernelSpec:
    """Kernel template with the moment-GP hyperparameter bounds."""
    return KernelSpec(
        family=family,
        length_scale=1.0,
        signal_var=1.0,
        noise_var=1e-5,
        length_scale_bounds=(0.01, 100.0),
        signal_var_bounds=(0.001, 10000.0),
        noise_var_bounds=(1e-8, 0.01),
    )


def _corr_from_sqdist(family: str, d2: np.ndarray, length_scale: float) -> np.ndarray:
    if family == "rbf":
        return np.exp(-d2 / (2.0 * length_scale**2))
    r = np.sqrt(np.maximum(d2, 0.0)) * (_SQRT3 / length_scale)
    return (1.0 + r) * np.exp(-r)


def _cross_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a2 = np.sum(a * a, axis=1)
    b2 = np.sum(b * b, axis=1)
    d2 = a2[:, None] + b2[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def kernel_eval(spec: KernelSpec, xi, xj, same_index: bool = False) -> float:
    """Covariance between two inputs.

    The white-noise term contributes only when ``same_index`` is set, i.e.
    on the diagonal of the training covariance; two test points at zero
    distance do not pick it up.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    if xi.shape != xj.shape:
        raise ValueError("inputs must have equal dimension")
    d2 = float(np.sum((xi - xj) ** 2))
    value = spec.signal_var * float(_corr_from_sqdist(spec.family, np.array(d2), spec.length_scale))
    if same_index:
        value += spec.noise_var
    return value


def _chol_with_jitter(k: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating jitter up to 5 retries."""
    base = 1e-10 * float(np.mean(np.diag(k)))
    jitter = 0.0
    for attempt in range(6):
        try:
            chol = sla.cholesky(k + jitter * np.eye(k.shape[0]), lower=True, check_finite=False)
            return chol, jitter
        except sla.LinAlgError:
            jitter = base * (10.0**attempt) if attempt else base
    raise GpFitError("covariance factorization failed after maximum jitter escalation")


def _lml_raw(
    family: str,
    d2: np.ndarray,
    outputs_norm: np.ndarray,
    length_scale: float,
    signal_var: float,
    noise_var: float,
) -> float:
    n = outputs_norm.shape[0]
    k = signal_var * _corr_from_sqdist(family, d2, length_scale)
    k[np.diag_indices_from(k)] += noise_var
    chol, _ = _chol_with_jitter(k)
    alpha = sla.cho_solve((chol, True), outputs_norm, check_finite=False)
    return float(
        -0.5 * outputs_norm @ alpha
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * n * math.log(2.0 * math.pi)
    )


def log_marginal_likelihood(
    spec: KernelSpec,
    inputs_norm: np.ndarray,
    outputs_norm: np.ndarray,
    d2: np.ndarray | None = None,
) -> float:
    """Log marginal likelihood of normalized training data under ``spec``."""
    if d2 is None:
        d2 = _cross_sqdist(inputs_norm, inputs_norm)
    return _lml_raw(
        spec.family, d2, outputs_norm, spec.length_scale, spec.signal_var, spec.noise_var
    )


@dataclass(frozen=True)
class GpModel:
    """Trained GP: kernel, normalized training data and factored covariance."""

    kernel: KernelSpec
    train_inputs: np.ndarray
    train_outputs: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    normalizer: Normalizer
    lml: float

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]


def _build_model(
    spec: KernelSpec,
    inputs_norm: np.ndarray,
    outputs_norm: np.ndarray,
    normalizer: Normalizer,
    d2: np.ndarray,
) -> GpModel:
    n = inputs_norm.shape[0]
    k = spec.signal_var * _corr_from_sqdist(spec.family, d2, spec.length_scale)
    k[np.diag_indices_from(k)] += spec.noise_var
    chol, _ = _chol_with_jitter(k)
    alpha = sla.cho_solve((chol, True), outputs_norm, check_finite=False)
    lml = float(
        -0.5 * outputs_norm @ alpha
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * n * math.log(2.0 * math.pi)
    )
    return GpModel(
        kernel=spec,
        train_inputs=inputs_norm,
        train_outputs=outputs_norm,
        chol=chol,
        alpha=alpha,
        normalizer=normalizer,
        lml=lml,
    )


def gp_fit(
    inputs: np.ndarray,
    outputs: np.ndarray,
    spec_bounds: KernelSpec | None = None,
    restarts: int = 8,
    rng: np.random.Generator | None = None,
    normalizer: Normalizer | None = None,
    maxfev: int = 150,
) -> GpModel:
    """Fit a GP by maximizing the log marginal likelihood.

    The search runs Nelder-Mead on (log length_scale, log signal_var,
    log noise_var), clipped to the bounds of ``spec_bounds``, from
    ``restarts`` starting points: one variance-matched heuristic plus the
    best of a Latin hypercube probe of the log-bound box. The best restart
    wins. When ``normalizer`` is omitted one is built from the data; pass a
    shared instance to train families of GPs in a common scale.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    outputs = np.asarray(outputs, dtype=float).ravel()
    if inputs.shape[0] != outputs.shape[0]:
        raise ValueError("inputs and outputs must have equal length")
    if inputs.shape[0] < 2:
        raise ValueError("need at least 2 training rows")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    if spec_bounds is None:
        spec_bounds = default_calibration_kernel()
    if normalizer is None:
        normalizer = Normalizer.from_data(inputs, outputs)

    xn = normalizer.normalize_inputs(inputs)
    yn = np.asarray(normalizer.normalize_outputs(outputs))
    d2 = _cross_sqdist(xn, xn)

    log_lo = np.log(
        [spec_bounds.length_scale_bounds[0], spec_bounds.signal_var_bounds[0], spec_bounds.noise_var_bounds[0]]
    )
    log_hi = np.log(
        [spec_bounds.length_scale_bounds[1], spec_bounds.signal_var_bounds[1], spec_bounds.noise_var_bounds[1]]
    )

    def values_at(p: np.ndarray) -> tuple[float, float, float]:
        p = np.clip(p, log_lo, log_hi)
        values = np.exp(p)
        # exp(log(bound)) can land one ulp outside; clip again in linear space
        return (
            float(np.clip(values[0], *spec_bounds.length_scale_bounds)),
            float(np.clip(values[1], *spec_bounds.signal_var_bounds)),
            float(np.clip(values[2], *spec_bounds.noise_var_bounds)),
        )

    def spec_at(p: np.ndarray) -> KernelSpec:
        ls, sf2, sn2 = values_at(p)
        return replace(spec_bounds, length_scale=ls, signal_var=sf2, noise_var=sn2)

    def objective(p: np.ndarray) -> float:
        try:
            return -_lml_raw(spec_bounds.family, d2, yn, *values_at(p))
        except GpFitError:
            return 1e12

    # Heuristic start: median pairwise distance, target variance, tiny noise.
    off_diag = d2[np.triu_indices_from(d2, k=1)]
    med = math.sqrt(float(np.median(off_diag))) if off_diag.size else 1.0
    heuristic = np.clip(
        np.log([max(med, 1e-6), max(float(np.var(yn)), 1e-6), 1e-6]), log_lo, log_hi
    )
    pool = [heuristic]
    n_probe = max(4 * restarts, 16)
    probes = log_lo + latin_hypercube_unit(rng, n_probe, 3) * (log_hi - log_lo)
    pool.extend(probes)
    pool = np.array(pool)
    scores = np.array([objective(p) for p in pool])
    order = np.argsort(scores)
    starts = pool[order[:restarts]]

    best_p = None
    best_val = np.inf
    for start in starts:
        res = minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"maxfev": maxfev, "xatol": 3e-4, "fatol": 1e-6, "adaptive": False},
        )
        if res.fun < best_val:
            best_val = res.fun
            best_p = res.x
    if best_p is None or not np.isfinite(best_val):
        raise GpFitError("hyperparameter search failed to produce a finite likelihood")
    return _build_model(spec_at(best_p), xn, yn, normalizer, d2)


def gp_predict(model: GpModel, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance at raw-unit query points.

    Variances are clamped at zero; values below -1e-10 (before clamping)
    trigger a warning since they indicate numerical trouble rather than
    roundoff.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    qn = model.normalizer.normalize_inputs(queries)
    if qn.shape[1] != model.train_inputs.shape[1]:
        raise ValueError("query dimension does not match training inputs")
    d2 = _cross_sqdist(qn, model.train_inputs)
    kstar = model.kernel.signal_var * _corr_from_sqdist(
        model.kernel.family, d2, model.kernel.length_scale
    )
    mean_n = kstar @ model.alpha
    v = sla.solve_triangular(model.chol, kstar.T, lower=True, check_finite=False)
    var_n = model.kernel.signal_var - np.sum(v * v, axis=0)
    if np.any(var_n < -1e-10):
        warnings.warn(
            f"predictive variance reached {var_n.min():.3e}; clamping to zero",
            RuntimeWarning,
            stacklevel=2,
        )
    var_n = np.maximum(var_n, 0.0)
    scale = model.normalizer.output_span
    mean = np.asarray(model.normalizer.denormalize_outputs(mean_n))
    return mean, var_n * scale**2


@dataclass(frozen=True)
class MetricsReport:
    """Regression validation metrics, following the emulator report schema."""

    rmse: float
    mae: float
    r2: float | None
    max_error: float
    nrmse_pct: float | None
    mean_abs_z: float
    pct_abs_z_lt_2: float
    pct_abs_z_gt_05: float
    n_validation: int

    def to_dict(self) -> dict:
        return {
            "RMSE": self.rmse,
            "MAE": self.mae,
            "R2": self.r2,
            "Max Error": self.max_error,
            "NRMSE (%)": self.nrmse_pct,
            "Mean |z|": self.mean_abs_z,
            "|z| < 2 (%)": self.pct_abs_z_lt_2,
            "|z| > 0.5 (%)": self.pct_abs_z_gt_05,
            "n_validation": self.n_validation,
        }


def _metrics(y_true: np.ndarray, y_pred: np.ndarray, pred_std: np.ndarray) -> MetricsReport:
    resid = y_true - y_pred
    rmse = float(np.sqrt(np.mean(resid**2)))
    mae = float(np.mean(np.abs(resid)))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else float(1.0 - np.sum(resid**2) / ss_tot)
    span = float(y_true.max() - y_true.min())
    nrmse = None if span == 0.0 else float(100.0 * rmse / span)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(pred_std > 0.0, resid / pred_std, np.inf * np.sign(resid))
        z = np.where(resid == 0.0, 0.0, z)
    abs_z = np.abs(z)
    return MetricsReport(
        rmse=rmse,
        mae=mae,
        r2=r2,
        max_error=float(np.max(np.abs(resid))),
        nrmse_pct=nrmse,
        mean_abs_z=float(np.mean(abs_z)),
        pct_abs_z_lt_2=float(100.0 * np.mean(abs_z < 2.0)),
        pct_abs_z_gt_05=float(100.0 * np.mean(abs_z > 0.5)),
        n_validation=int(y_true.size),
    )


def gp_validate(model: GpModel, val_inputs: np.ndarray, val_outputs: np.ndarray) -> MetricsReport:
    """Held-out metrics (raw units) of a single GP."""
    val_outputs = np.asarray(val_outputs, dtype=float).ravel()
    if val_outputs.size == 0:
        raise ValueError("validation set must be nonempty")
    mean, var = gp_predict(model, val_inputs)
    return _metrics(val_outputs, mean, np.sqrt(var))


class GpEnsemble:
    """Per-observation-point GPs sharing one normalizer.

    Prediction across the whole family is vectorized by stacking the
    per-model coefficient vectors; all members must share the kernel
    family and training design.
    """

    def __init__(self, models: list[GpModel], normalizer: Normalizer):
        if not models:
            raise ValueError("ensemble needs at least one model")
        self.models = tuple(models)
        self.normalizer = normalizer
        first = models[0]
        if any(m.kernel.family != first.kernel.family for m in models):
            raise ValueError("ensemble members must share a kernel family")
        self._family = first.kernel.family
        self._train = first.train_inputs
        self._alphas = np.stack([m.alpha for m in models], axis=0)
        self._ls = np.array([m.kernel.length_scale for m in models])
        self._sf2 = np.array([m.kernel.signal_var for m in models])

    def __len__(self) -> int:
        return len(self.models)

    def predict_mean_normalized(self, thetas: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Normalized predictive means, shape (batch, n_points).

        Large batches are processed in chunks to bound the stacked
        (n_models, batch, n_train) kernel tensor.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        b = thetas.shape[0]
        if b > chunk:
            return np.vstack(
                [self.predict_mean_normalized(thetas[s : s + chunk]) for s in range(0, b, chunk)]
            )
        xn = self.normalizer.normalize_inputs(thetas)
        d2 = _cross_sqdist(xn, self._train)  # (B, n)
        if self._family == "rbf":
            corr = np.exp(-d2[None, :, :] / (2.0 * self._ls[:, None, None] ** 2))
        else:
            r = np.sqrt(d2)[None, :, :] * (_SQRT3 / self._ls[:, None, None])
            corr = (1.0 + r) * np.exp(-r)
        kstar = self._sf2[:, None, None] * corr  # (P, B, n)
        return np.einsum("pbn,pn->bp", kstar, self._alphas)

    def predict_mean(self, thetas: np.ndarray) -> np.ndarray:
        """Predictive means in raw output units, shape (batch, n_points)."""
        return np.asarray(
            self.normalizer.denormalize_outputs(self.predict_mean_normalized(thetas))
        )

    def validate(self, design: np.ndarray, outputs: np.ndarray) -> MetricsReport:
        """Pooled held-out metrics (raw units) across every output point."""
        design = np.atleast_2d(np.asarray(design, dtype=float))
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
        preds = np.empty_like(outputs)
        stds = np.empty_like(outputs)
        for j, model in enumerate(self.models):
            mean, var = gp_predict(model, design)
            preds[:, j] = mean
            stds[:, j] = np.sqrt(var)
        return _metrics(outputs.ravel(), preds.ravel(), stds.ravel())

    def to_json(self, path) -> None:
        doc = {
            "format": "tenduq-gp-ensemble",
            "version": 1,
            "normalizer": self.normalizer.to_dict(),
            "models": [_model_to_dict(m) for m in self.models],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "GpEnsemble":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "tenduq-gp-ensemble":
            raise ValueError(f"{path}: not a GP ensemble file")
        normalizer = Normalizer.from_dict(doc["normalizer"])
        models = [_model_from_dict(d, normalizer) for d in doc["models"]]
        return cls(models, normalizer)


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def _model_to_dict(model: GpModel) -> dict:
    return {
        "kernel": model.kernel.to_dict(),
        "train_inputs": _encode_array(model.train_inputs),
        "train_outputs": _encode_array(model.train_outputs),
        "lml": model.lml,
    }


def _model_from_dict(d: dict, normalizer: Normalizer) -> GpModel:
    spec = KernelSpec.from_dict(d["kernel"])
    xn = _decode_array(d["train_inputs"])
    yn = _decode_array(d["train_outputs"]).ravel()
    d2 = _cross_sqdist(xn, xn)
    model = _build_model(spec, xn, yn, normalizer, d2)
    return model


def gp_to_json(model: GpModel, path) -> None:
    """Serialize a single GP with its normalizer."""
    doc = {
        "format": "tenduq-gp",
        "version": 1,
        "normalizer": model.normalizer.to_dict(),
        "model": _model_to_dict(model),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def gp_from_json(path) -> GpModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "tenduq-gp":
        raise ValueError(f"{path}: not a GP model file")
    normalizer = Normalizer.from_dict(doc["normalizer"])
    return _model_from_dict(doc["model"], normalizer)


def fit_point_gps(
    design: np.ndarray,
    outputs: np.ndarray,
    spec_bounds: KernelSpec | None = None,
    restarts: int = 8,
    seed: int = 0,
    n_threads: int = 1,
    maxfev: int = 150,
) -> GpEnsemble:
    """Train one GP per output column on a shared design.

    Inputs are normalized over the design bounding box and outputs jointly
    over the full output matrix, so every member of the family lives on
    the same [0, 1] scales. Fits are independent; ``n_threads`` bounds the
    worker pool and does not affect the result because each fit draws from
    its own seeded stream.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    if design.shape[0] != outputs.shape[0]:
        raise ValueError("design and outputs must have equal row counts")
    normalizer = Normalizer.from_data(design, outputs)
    if spec_bounds is None:
        spec_bounds = default_calibration_kernel()

    def fit_one(j: int) -> GpModel:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
        return gp_fit(
            design,
            outputs[:, j],
            spec_bounds=spec_bounds,
            restarts=restarts,
            rng=rng,
            normalizer=normalizer,
            maxfev=maxfev,
        )

    n_out = outputs.shape[1]
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            models = list(pool.map(fit_one, range(n_out)))
    else:
        models = [fit_one(j) for j in range(n_out)]
    return GpEnsemble(models, normalizer)
