"""Shared domain types: parameter spaces, priors, observations, normalization.

Everything here is immutable after construction and safe to share between
worker threads. The only mutable object threaded through the toolkit is a
``numpy.random.Generator``, which every stochastic routine receives
explicitly so that pipelines are bit-reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PriorSpec",
    "ParameterEntry",
    "ParameterSpace",
    "ObservationSet",
    "Normalizer",
    "lognormal_location_scale",
    "prior_log_density",
    "sample_prior",
    "latin_hypercube",
    "latin_hypercube_unit",
]

_LOG_2PI = math.log(2.0 * math.pi)


def lognormal_location_scale(mean: float, std: float) -> tuple[float, float]:
    """Convert (mean, std) of a lognormal variable to log-space (location, scale).

    The conversion is exact: scale^2 = ln(1 + (std/mean)^2) and
    location = ln(mean) - scale^2 / 2.
    """
    if mean <= 0.0:
        raise ValueError(f"lognormal mean must be positive, got {mean}")
    if std <= 0.0:
        raise ValueError(f"lognormal std must be positive, got {std}")
    scale2 = math.log1p((std / mean) ** 2)
    location = math.log(mean) - 0.5 * scale2
    return location, math.sqrt(scale2)


@dataclass(frozen=True)
class PriorSpec:
    """Prior distribution for a single scalar parameter.

    kind
        One of ``uniform``, ``normal``, ``lognormal``.
    params
        ``uniform``: (lower, upper). ``normal``: (mean, std).
        ``lognormal``: (mean, std) of the variable itself; the log-space
        location/scale are derived with the exact conversion.
    """

    kind: str
    params: tuple[float, float]

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "normal", "lognormal"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        a, b = self.params
        object.__setattr__(self, "params", (float(a), float(b)))
        if self.kind == "uniform":
            if not self.params[0] < self.params[1]:
                raise ValueError("uniform prior requires lower < upper")
        else:
            if self.params[1] <= 0.0:
                raise ValueError(f"{self.kind} prior requires std > 0")
            if self.kind == "lognormal" and self.params[0] <= 0.0:
                raise ValueError("lognormal prior requires mean > 0")

    def log_density(self, x: np.ndarray | float) -> np.ndarray | float:
        """Log density of the untruncated parent distribution at ``x``."""
        x = np.asarray(x, dtype=float)
        if self.kind == "uniform":
            lo, hi = self.params
            out = np.where((x >= lo) & (x <= hi), -math.log(hi - lo), -np.inf)
        elif self.kind == "normal":
            m, s = self.params
            out = -0.5 * _LOG_2PI - math.log(s) - 0.5 * ((x - m) / s) ** 2
        else:
            loc, scale = lognormal_location_scale(*self.params)
            with np.errstate(divide="ignore", invalid="ignore"):
                logx = np.where(x > 0.0, np.log(np.maximum(x, 1e-300)), np.nan)
                out = np.where(
                    x > 0.0,
                    -0.5 * _LOG_2PI - math.log(scale) - logx
                    - 0.5 * ((logx - loc) / scale) ** 2,
                    -np.inf,
                )
        return out if out.ndim else float(out)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` samples from the untruncated parent distribution."""
        if self.kind == "uniform":
            return rng.uniform(self.params[0], self.params[1], size)
        if self.kind == "normal":
            return rng.normal(self.params[0], self.params[1], size)
        loc, scale = lognormal_location_scale(*self.params)
        return rng.lognormal(loc, scale, size)


@dataclass(frozen=True)
class ParameterEntry:
    """One named parameter with hard bounds and a prior."""

    name: str
    lower: float
    upper: float
    prior: PriorSpec

    def __post_init__(self) -> None:
        if not self.lower < self.upper:
            raise ValueError(f"parameter {self.name!r}: lower must be < upper")
        if self.prior.kind == "uniform":
            lo, hi = self.prior.params
            if lo < self.lower - 1e-12 or hi > self.upper + 1e-12:
                raise ValueError(
                    f"parameter {self.name!r}: uniform prior support must lie "
                    f"within the bounds [{self.lower}, {self.upper}]"
                )


@dataclass(frozen=True)
class ParameterSpace:
    """Ordered collection of calibration parameters.

    ``embedded_index`` marks the parameter that carries a stochastic
    extension (promoted to a lognormal random variable during embedded
    calibration); ``embedded_sigma_prior`` is the prior for the spread of
    that extension. ``extended()`` returns the sampling space with the
    spread appended as an ordinary bounded parameter.
    """

    entries: tuple[ParameterEntry, ...]
    embedded_index: int | None = None
    embedded_sigma_prior: PriorSpec | None = None
    embedded_sigma_bounds: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("parameter space needs at least one entry")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if self.embedded_index is not None:
            if not 0 <= self.embedded_index < len(self.entries):
                raise ValueError("embedded_index out of range")
            if self.embedded_sigma_prior is None:
                raise ValueError("embedded parameter requires a sigma prior")
            if self.embedded_sigma_bounds is None:
                if self.embedded_sigma_prior.kind != "uniform":
                    raise ValueError(
                        "embedded_sigma_bounds required for non-uniform sigma prior"
                    )
                object.__setattr__(
                    self, "embedded_sigma_bounds", self.embedded_sigma_prior.params
                )

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def lower(self) -> np.ndarray:
        return np.array([e.lower for e in self.entries])

    @property
    def upper(self) -> np.ndarray:
        return np.array([e.upper for e in self.entries])

    def extended(self) -> "ParameterSpace":
        """Sampling space for embedded calibration: entries + spread parameter."""
        if self.embedded_index is None:
            raise ValueError("space has no embedded parameter")
        lo, hi = self.embedded_sigma_bounds
        sigma_entry = ParameterEntry(
            name=f"sigma_{self.entries[self.embedded_index].name}",
            lower=float(lo),
            upper=float(hi),
            prior=self.embedded_sigma_prior,
        )
        return ParameterSpace(entries=self.entries + (sigma_entry,))


def prior_log_density(space: ParameterSpace, theta: np.ndarray) -> float | np.ndarray:
    """Sum of per-parameter log prior densities; -inf outside the bounds.

    Truncated priors are used unnormalized: inside the bounds the density of
    the parent distribution is returned, so the missing truncation constant
    is the same for every theta and cancels in MCMC acceptance ratios.

    ``theta`` may be a single vector of length ``space.dim`` or a matrix of
    shape (batch, dim); the batched form returns one value per row.
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    thetas = theta[None, :] if single else theta
    if thetas.shape[-1] != space.dim:
        raise ValueError(
            f"theta has {thetas.shape[-1]} entries, space has {space.dim}"
        )
    total = np.zeros(thetas.shape[0])
    for k, entry in enumerate(space.entries):
        x = thetas[:, k]
        inside = (x >= entry.lower) & (x <= entry.upper)
        dens = np.asarray(entry.prior.log_density(x))
        total = total + np.where(inside, dens, -np.inf)
    return float(total[0]) if single else total


def sample_prior(space: ParameterSpace, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``count`` prior samples, each row inside the space bounds.

    Normal/lognormal draws falling outside the bounds are rejected and
    redrawn until the requested count is reached.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, space.dim))
    for k, entry in enumerate(space.entries):
        if entry.prior.kind == "uniform":
            out[:, k] = entry.prior.sample(rng, count)
            continue
        filled = 0
        while filled < count:
            draw = entry.prior.sample(rng, max(count - filled, 64))
            keep = draw[(draw >= entry.lower) & (draw <= entry.upper)]
            take = min(keep.size, count - filled)
            out[filled : filled + take, k] = keep[:take]
            filled += take
    return out


def latin_hypercube_unit(rng: np.random.Generator, count: int, dims: int) -> np.ndarray:
    """Latin hypercube design on the unit cube: one point per stratum per dim."""
    if count < 1:
        raise ValueError("count must be >= 1")
    u = rng.random((count, dims))
    out = np.empty((count, dims))
    for j in range(dims):
        perm = rng.permutation(count)
        out[:, j] = (perm + u[:, j]) / count
    return out


def latin_hypercube(space: ParameterSpace, rng: np.random.Generator, count: int) -> np.ndarray:
    """Latin hypercube design over the space bounds.

    Per dimension, exactly one sample falls in each of the ``count``
    equal-width strata of [lower, upper].
    """
    unit = latin_hypercube_unit(rng, count, space.dim)
    return space.lower + unit * (space.upper - space.lower)


@dataclass(frozen=True)
class Normalizer:
    """Affine map of a training box onto [0,1]^d and outputs onto [0,1].

    Degenerate ranges (hi == lo) are mapped with unit span so the transform
    stays invertible.
    """

    input_lo: np.ndarray
    input_hi: np.ndarray
    output_lo: float
    output_hi: float

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.input_lo, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.input_hi, dtype=float)).copy()
        if lo.shape != hi.shape:
            raise ValueError("input_lo and input_hi must have the same shape")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "input_lo", lo)
        object.__setattr__(self, "input_hi", hi)
        object.__setattr__(self, "output_lo", float(self.output_lo))
        object.__setattr__(self, "output_hi", float(self.output_hi))

    @classmethod
    def from_data(cls, inputs: np.ndarray, outputs: np.ndarray) -> "Normalizer":
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        outputs = np.asarray(outputs, dtype=float)
        return cls(
            input_lo=inputs.min(axis=0),
            input_hi=inputs.max(axis=0),
            output_lo=float(outputs.min()),
            output_hi=float(outputs.max()),
        )

    @property
    def _input_span(self) -> np.ndarray:
        span = self.input_hi - self.input_lo
        return np.where(span > 0.0, span, 1.0)

    @property
    def output_span(self) -> float:
        span = self.output_hi - self.output_lo
        return span if span > 0.0 else 1.0

    def normalize_inputs(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_lo) / self._input_span

    def denormalize_inputs(self, u: np.ndarray) -> np.ndarray:
        return self.input_lo + np.asarray(u, dtype=float) * self._input_span

    def normalize_outputs(self, y: np.ndarray | float) -> np.ndarray | float:
        return (np.asarray(y, dtype=float) - self.output_lo) / self.output_span

    def denormalize_outputs(self, v: np.ndarray | float) -> np.ndarray | float:
        return self.output_lo + np.asarray(v, dtype=float) * self.output_span

    def to_dict(self) -> dict:
        return {
            "input_lo": [float(v) for v in self.input_lo],
            "input_hi": [float(v) for v in self.input_hi],
            "output_lo": self.output_lo,
            "output_hi": self.output_hi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            input_lo=np.array(d["input_lo"], dtype=float),
            input_hi=np.array(d["input_hi"], dtype=float),
            output_lo=d["output_lo"],
            output_hi=d["output_hi"],
        )


def identity_normalizer(dims: int) -> Normalizer:
    """Normalizer that leaves inputs and outputs unchanged."""
    return Normalizer(np.zeros(dims), np.ones(dims), 0.0, 1.0)


@dataclass(frozen=True)
class ObservationSet:
    """Spatial measurement points with strain-change values.

    points
        (N, 2) array of (x, z) coordinates in mm.
    values
        (N,) strain changes in micrometer/m.
    noise_std
        Measurement noise standard deviation in normalized output units.
        Zero is accepted only for synthetic noise-free generation; any
        likelihood built on the set requires a strictly positive value.
    groups
        Optional labeled partition of point indices into disjoint subsets.
    """

    points: np.ndarray
    values: np.ndarray
    noise_std: float
    groups: dict[str, np.ndarray] | None = field(default=None)

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float)).copy()
        vals = np.asarray(self.values, dtype=float).copy()
        if pts.shape[0] != vals.shape[0]:
            raise ValueError("points and values must have equal length")
        if pts.shape[0] < 1:
            raise ValueError("need at least one observation")
        if pts.shape[1] != 2:
            raise ValueError("points must be (N, 2) coordinates")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")
        pts.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "noise_std", float(self.noise_std))
        if self.groups is not None:
            seen: set[int] = set()
            clean: dict[str, np.ndarray] = {}
            for label, idx in self.groups.items():
                arr = np.asarray(idx, dtype=int).copy()
                if arr.size == 0:
                    raise ValueError(f"group {label!r} is empty")
                if arr.min() < 0 or arr.max() >= len(vals):
                    raise ValueError(f"group {label!r} has out-of-range indices")
                overlap = seen.intersection(arr.tolist())
                if overlap:
                    raise ValueError(f"group {label!r} overlaps another group")
                seen.update(arr.tolist())
                arr.setflags(write=False)
                clean[label] = arr
            object.__setattr__(self, "groups", clean)

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray, noise_std: float | None = None) -> "ObservationSet":
        return ObservationSet(
            points=self.points,
            values=values,
            noise_std=self.noise_std if noise_std is None else noise_std,
            groups=self.groups,
        )

    def to_csv(self, path) -> None:
        """Write ``x_mm,z_mm,strain_microstrain[,group]`` rows."""
        label_of: dict[int, str] = {}
        if self.groups:
            for label, idx in self.groups.items():
                for i in idx:
                    label_of[int(i)] = label
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["x_mm", "z_mm", "strain_microstrain"]
            if self.groups:
                header.append("group")
            writer.writerow(header)
            for i in range(len(self)):
                row = [
                    repr(float(self.points[i, 0])),
                    repr(float(self.points[i, 1])),
                    repr(float(self.values[i])),
                ]
                if self.groups:
                    row.append(label_of.get(i, ""))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, noise_std: float) -> "ObservationSet":
        """Parse an observation CSV; rows may appear in any order."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty observation file") from None
            header = [h.strip() for h in header]
            if header[:3] != ["x_mm", "z_mm", "strain_microstrain"]:
                raise ValueError(
                    f"{path}: expected header x_mm,z_mm,strain_microstrain, got {header}"
                )
            has_group = len(header) >= 4 and header[3] == "group"
            pts: list[tuple[float, float]] = []
            vals: list[float] = []
            labels: list[str] = []
            for rownum, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) < 3:
                    raise ValueError(f"{path}: row {rownum} has {len(row)} fields")
                try:
                    x, z, v = float(row[0]), float(row[1]), float(row[2])
                except ValueError as exc:
                    raise ValueError(f"{path}: row {rownum}: {exc}") from None
                pts.append((x, z))
                vals.append(v)
                labels.append(row[3].strip() if has_group and len(row) > 3 else "")
        groups: dict[str, np.ndarray] | None = None
        if any(labels):
            by_label: dict[str, list[int]] = {}
            for i, lab in enumerate(labels):
                if lab:
                    by_label.setdefault(lab, []).append(i)
            groups = {lab: np.array(ix) for lab, ix in by_label.items()}
        return cls(points=np.array(pts), values=np.array(vals), noise_std=noise_std, groups=groups)
