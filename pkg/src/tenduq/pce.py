"""Polynomial chaos in one stochastic variable.

The stochastic input is either normal or lognormal. Both are expanded in
orthonormal probabilists' Hermite polynomials of the underlying standard
normal germ; the lognormal case pushes the germ through ``exp`` rather
than constructing a lognormal-orthogonal family. Coefficients come from
pseudo-spectral projection on a Gauss-Hermite rule, so a degree-p
expansion costs exactly Q evaluations of the emulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import lognormal_location_scale

__all__ = [
    "StochasticInput",
    "QuadratureRule",
    "PceExpansion",
    "gauss_hermite",
    "hermite_orthonormal",
    "build_pce",
    "pce_moments",
]


@dataclass(frozen=True)
class StochasticInput:
    """Distribution of the embedded stochastic variable.

    ``normal`` maps the germ t ~ N(0,1) through mean + std * t;
    ``lognormal`` through exp(location + scale * t) with the exact
    (mean, std) -> (location, scale) conversion.
    """

    kind: str
    mean: float
    std: float

    def __post_init__(self) -> None:
        if self.kind not in ("normal", "lognormal"):
            raise ValueError(f"unknown stochastic input kind {self.kind!r}")
        if self.std <= 0.0:
            raise ValueError("std must be > 0")
        if self.kind == "lognormal" and self.mean <= 0.0:
            raise ValueError("lognormal mean must be > 0")

    def to_physical(self, germ: np.ndarray) -> np.ndarray:
        germ = np.asarray(germ, dtype=float)
        if self.kind == "normal":
            return self.mean + self.std * germ
        loc, scale = lognormal_location_scale(self.mean, self.std)
        return np.exp(loc + scale * germ)


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss quadrature nodes/weights in germ space, probabilists' normalization."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float).copy()
        weights = np.asarray(self.weights, dtype=float).copy()
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-D arrays of equal length")
        if np.any(weights <= 0.0):
            raise ValueError("quadrature weights must be positive")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.nodes.size


def gauss_hermite(q: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with ``q`` points.

    Integrates germ polynomials up to degree 2q-1 exactly against the
    standard normal density; weights sum to one.
    """
    if not 1 <= q <= 20:
        raise ValueError("quadrature size must be in [1, 20]")
    nodes, weights = np.polynomial.hermite_e.hermegauss(q)
    weights = weights / weights.sum()
    return QuadratureRule(nodes=nodes, weights=weights)


def hermite_orthonormal(degree: int, t: np.ndarray) -> np.ndarray:
    """Evaluate orthonormal probabilists' Hermite polynomials at ``t``.

    Returns an array of shape (len(t), degree+1) with column alpha holding
    He_alpha(t) / sqrt(alpha!), so that <Psi_a, Psi_a> = 1 under N(0,1).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((t.size, degree + 1))
    out[:, 0] = 1.0
    if degree >= 1:
        out[:, 1] = t
    for n in range(1, degree):
        # He_{n+1} = t He_n - n He_{n-1}, columns still unnormalized here
        out[:, n + 1] = t * out[:, n] - n * out[:, n - 1]
    norms = np.array([math.sqrt(math.factorial(a)) for a in range(degree + 1)])
    return out / norms


@dataclass(frozen=True)
class PceExpansion:
    """Orthonormal Hermite expansion of an emulated response vector.

    coeffs has shape (N output points, degree+1); the mean is the zeroth
    column and the variance the sum of squares of the rest, both exact
    consequences of orthonormality.
    """

    degree: int
    coeffs: np.ndarray
    input: StochasticInput

    def __post_init__(self) -> None:
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float)).copy()
        if coeffs.shape[1] != self.degree + 1:
            raise ValueError("coeffs must have degree+1 columns")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_outputs(self) -> int:
        return self.coeffs.shape[0]

    def eval_germ(self, t: np.ndarray | float) -> np.ndarray:
        """Evaluate the expansion at germ values ``t``; shape (len(t), N)."""
        psi = hermite_orthonormal(self.degree, np.atleast_1d(t))
        return psi @ self.coeffs.T


def build_pce(
    emulator: Callable[[float], np.ndarray],
    input: StochasticInput,
    degree: int,
    q: int,
) -> PceExpansion:
    """Pseudo-spectral projection of ``emulator`` onto the Hermite basis.

    ``emulator`` maps one physical value of the stochastic variable to the
    response vector over the output points. It is called exactly ``q``
    times, once per quadrature node.
    """
    if q < degree + 1:
        raise ValueError("need q >= degree + 1 quadrature points")
    rule = gauss_hermite(q)
    physical = input.to_physical(rule.nodes)
    evals = []
    for idx, value in enumerate(physical):
        try:
            evals.append(np.atleast_1d(np.asarray(emulator(float(value)), dtype=float)))
        except Exception as exc:
            raise RuntimeError(
                f"emulator failed at quadrature node {idx} (value {value!r}): {exc}"
            ) from exc
    responses = np.stack(evals, axis=0)  # (q, N)
    psi = hermite_orthonormal(degree, rule.nodes)  # (q, degree+1)
    coeffs = (rule.weights[:, None] * responses).T @ psi  # (N, degree+1)
    return PceExpansion(degree=degree, coeffs=coeffs, input=input)


def pce_moments(expansion: PceExpansion) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form mean and variance vectors of the expansion."""
    mean = expansion.coeffs[:, 0].copy()
    var = np.sum(expansion.coeffs[:, 1:] ** 2, axis=1)
    var[(var < 0.0) & (var > -1e-14)] = 0.0
    return mean, var


def projection_operator(degree: int, q: int) -> tuple[QuadratureRule, np.ndarray]:
    """Quadrature rule and weighted-basis matrix for batched projections.

    The returned matrix W has shape (q, degree+1) with W[k, a] =
    w_k * Psi_a(t_k); for responses R of shape (..., q, N) the coefficient
    array is einsum('...qn,qa->...an', R, W).
    """
    rule = gauss_hermite(q)
    psi = hermite_orthonormal(degree, rule.nodes)
    return rule, rule.weights[:, None] * psi
