"""Identifiability of the tendon depth under propagated uncertainty.

The calibrated stochastic modulus is propagated through the upscaled
forward model once per depth-grid value with a small polynomial-chaos
expansion; the resulting mean and standard-deviation fields train two GP
surrogates over (x, z, depth). Identifiability at a sensor location is
judged by non-overlap of 95% confidence intervals: the maximin problem
finds the least favorable operating depth and the minimal detectable
change there, and where separation fails within the perturbation budget
the shared probability mass between the predictive distributions is
reported instead.

All routines accept any surrogate object exposing ``moments_at(node,
lams)``, ``lambda_grid`` and ``delta_max``; tests exercise them with
analytic stubs.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .forward import SnapshotTable, UpscaledBeamModel, eval_g_batch
from .pce import StochasticInput, build_pce, pce_moments
from .surrogate import GpModel, default_moment_kernel, gp_fit, gp_predict, gp_validate

__all__ = [
    "MomentSurrogates",
    "SeparabilityMap",
    "NodeResult",
    "train_moment_surrogates",
    "ci_95",
    "min_detectable_delta",
    "maximin_over_grid",
    "overlap_integral",
    "separability_map",
]

_STD_EPS = 1e-12


@dataclass(frozen=True)
class MomentSurrogates:
    """GP emulators of the propagated response mean and std over (x, z, depth)."""

    mean_gp: GpModel
    std_gp: GpModel
    lambda_grid: np.ndarray
    delta_max: float
    metrics: dict

    def __post_init__(self) -> None:
        grid = np.asarray(self.lambda_grid, dtype=float).copy()
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("lambda_grid must be a 1-D array with at least 2 points")
        if np.any(np.diff(grid) <= 0.0):
            raise ValueError("lambda_grid must be strictly increasing")
        if self.delta_max <= 0.0:
            raise ValueError("delta_max must be positive")
        grid.setflags(write=False)
        object.__setattr__(self, "lambda_grid", grid)

    def moments_at(self, node, lams) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std predictions at one spatial node for several depths."""
        lams = np.atleast_1d(np.asarray(lams, dtype=float))
        queries = np.column_stack(
            [np.full(lams.size, node[0]), np.full(lams.size, node[1]), lams]
        )
        mean, _ = gp_predict(self.mean_gp, queries)
        std, _ = gp_predict(self.std_gp, queries)
        return mean, np.maximum(std, 0.0)


def _resolve_evaluator(model) -> Callable[[np.ndarray, float, float], np.ndarray]:
    """Turn the forward-model argument into a batch evaluator g(nodes, E, lam)."""
    if isinstance(model, UpscaledBeamModel):
        return lambda nodes, e, lam: eval_g_batch(model, nodes, e, lam)
    if isinstance(model, SnapshotTable):
        return _snapshot_evaluator(model)
    if callable(model):
        return model
    raise TypeError("model must be an UpscaledBeamModel, SnapshotTable or callable")


def _snapshot_evaluator(table: SnapshotTable, seed: int = 0, max_rows: int = 2000):
    """Joint GP over (x, z, parameters) fitted to snapshot rows.

    The table's design columns are expected to be (modulus, depth); every
    (point, simulation) pair becomes one training row of the joint GP,
    subsampled to ``max_rows`` for tractability.
    """
    if table.design.shape[1] != 2:
        raise ValueError("snapshot table for the upscaled model needs (modulus, depth) columns")
    n_rows = table.n_sims * table.points.shape[0]
    xs = np.repeat(table.points, table.n_sims, axis=0)
    params = np.tile(table.design, (table.points.shape[0], 1))
    inputs = np.column_stack([xs, params])
    outputs = table.outputs.T.reshape(-1)
    rng = np.random.default_rng(seed)
    if n_rows > max_rows:
        pick = rng.choice(n_rows, size=max_rows, replace=False)
        inputs, outputs = inputs[pick], outputs[pick]
    joint = gp_fit(inputs, outputs, spec_bounds=default_moment_kernel(), restarts=4, rng=rng)

    def evaluator(nodes: np.ndarray, e: float, lam: float) -> np.ndarray:
        queries = np.column_stack(
            [nodes, np.full(len(nodes), e), np.full(len(nodes), lam)]
        )
        mean, _ = gp_predict(joint, queries)
        return mean

    return evaluator


def train_moment_surrogates(
    model,
    posterior_embed: tuple[float, float],
    nodes: np.ndarray,
    lambda_grid: np.ndarray,
    pce_config: tuple[int, int] = (2, 4),
    delta_max: float | None = None,
    kernel=None,
    restarts: int = 4,
    seed: int = 0,
    train_count: int | None = None,
    maxfev: int = 300,
) -> MomentSurrogates:
    """Build the (mean, std) training fields and fit the two moment GPs.

    For each depth-grid value one PCE is constructed from Q forward-field
    evaluations, so the forward cost is exactly len(lambda_grid) * Q. The
    pooled (node, depth) rows are split at random into training and
    validation parts; held-out metrics for both GPs are recorded on the
    returned object.
    """
    post_mean, post_std = float(posterior_embed[0]), float(posterior_embed[1])
    if post_std <= 0.0:
        raise ValueError("posterior std of the embedded parameter must be > 0")
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if nodes.size == 0 or lambda_grid.size == 0:
        raise ValueError("nodes and lambda grid must be nonempty")
    evaluator = _resolve_evaluator(model)
    degree, q = pce_config
    stoch = StochasticInput("lognormal", post_mean, post_std)

    mean_rows = []
    std_rows = []
    for lam in lambda_grid:
        expansion = build_pce(lambda e: evaluator(nodes, e, lam), stoch, degree, q)
        mean_j, var_j = pce_moments(expansion)
        mean_rows.append(mean_j)
        std_rows.append(np.sqrt(np.maximum(var_j, 0.0)))
    mean_field = np.stack(mean_rows, axis=0)  # (n_lambda, n_nodes)
    std_field = np.stack(std_rows, axis=0)

    inputs = np.column_stack(
        [
            np.tile(nodes, (lambda_grid.size, 1)),
            np.repeat(lambda_grid, nodes.shape[0]),
        ]
    )
    targets_mean = mean_field.reshape(-1)
    targets_std = std_field.reshape(-1)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    n_total = inputs.shape[0]
    if train_count is None:
        train_count = max(2, n_total // 3)
    train_count = min(train_count, n_total)
    perm = rng.permutation(n_total)
    train_idx = perm[:train_count]
    val_idx = perm[train_count:]

    if kernel is None:
        kernel = default_moment_kernel()
    metrics: dict = {}
    gps = []
    for targets, tag in ((targets_mean, "mean"), (targets_std, "std")):
        fit_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(102 if tag == "mean" else 103,))
        )
        gp = gp_fit(
            inputs[train_idx],
            targets[train_idx],
            spec_bounds=kernel,
            restarts=restarts,
            rng=fit_rng,
            maxfev=maxfev,
        )
        gps.append(gp)
        if val_idx.size:
            metrics[tag] = gp_validate(gp, inputs[val_idx], targets[val_idx])
    span = float(lambda_grid[-1] - lambda_grid[0])
    if delta_max is None:
        delta_max = 0.2 * span
    return MomentSurrogates(
        mean_gp=gps[0],
        std_gp=gps[1],
        lambda_grid=lambda_grid,
        delta_max=float(delta_max),
        metrics=metrics,
    )


def ci_95(surr, node, lam: float) -> tuple[float, float]:
    """95% confidence interval [m - 1.96 s, m + 1.96 s] at (node, depth)."""
    mean, std = surr.moments_at(node, [lam])
    return float(mean[0] - 1.96 * std[0]), float(mean[0] + 1.96 * std[0])


def _disjoint(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] > b[1] or b[0] > a[1]


def _separated(surr, node, lam0: float, delta: float) -> bool:
    """Two-sided CI non-overlap with boundary clipping.

    Each perturbed depth is clipped to the grid span; a side whose clipped
    value coincides with lam0 (lam0 sits on the boundary) carries no
    admissible perturbation and is dropped from the conjunction.
    """
    gmin, gmax = float(surr.lambda_grid[0]), float(surr.lambda_grid[-1])
    lam_p = min(lam0 + delta, gmax)
    lam_m = max(lam0 - delta, gmin)
    mean, std = surr.moments_at(node, [lam0, lam_p, lam_m])
    cis = [(mean[i] - 1.96 * std[i], mean[i] + 1.96 * std[i]) for i in range(3)]
    ok = True
    if lam_p > lam0:
        ok = ok and _disjoint(cis[0], cis[1])
    if lam_m < lam0:
        ok = ok and _disjoint(cis[0], cis[2])
    if lam_p == lam0 and lam_m == lam0:
        return False
    return ok


def _both_sides_exit(surr, lam0: float) -> bool:
    gmin, gmax = float(surr.lambda_grid[0]), float(surr.lambda_grid[-1])
    return (lam0 + surr.delta_max > gmax) and (lam0 - surr.delta_max < gmin)


def min_detectable_delta(
    surr, node, lam0: float, delta_max: float | None = None, tol_frac: float = 1e-3
) -> float | None:
    """Smallest depth change whose CIs separate on both sides of lam0.

    Returns None when even ``delta_max`` fails to separate. The search
    runs a coarse scan for a feasibility bracket, polishes it with
    Nelder-Mead on a penalized objective, and certifies the threshold by
    bisection on the feasibility indicator down to tol_frac * delta_max.
    """
    dmax = float(surr.delta_max if delta_max is None else delta_max)

    def feasible(d: float) -> bool:
        return _separated(surr, node, lam0, d)

    if not feasible(dmax):
        return None
    n_scan = 32
    grid = np.linspace(dmax / n_scan, dmax, n_scan)
    hi = dmax
    lo = 0.0
    for i, d in enumerate(grid):
        if feasible(float(d)):
            hi = float(d)
            lo = float(grid[i - 1]) if i > 0 else 0.0
            break

    def penalized(p) -> float:
        d = float(np.atleast_1d(p)[0])
        if d <= 0.0 or d > dmax:
            return 2.0 * dmax + abs(d)
        return d if feasible(d) else dmax + (dmax - d)

    res = minimize(
        penalized,
        x0=[0.5 * (lo + hi) if lo > 0.0 else hi],
        method="Nelder-Mead",
        options={"maxfev": 60, "xatol": tol_frac * dmax, "fatol": tol_frac * dmax},
    )
    cand = float(np.atleast_1d(res.x)[0])
    if lo < cand < hi and feasible(cand):
        hi = cand
    while hi - lo > tol_frac * dmax:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def maximin_over_grid(surr, node) -> tuple[float, float] | None:
    """Least favorable grid depth and its minimal detectable change.

    Grid points whose two-sided perturbation exits the admissible span on
    both sides are excluded. If any remaining grid point fails to separate
    at delta_max the whole node is infeasible (None); otherwise the grid
    point with the largest minimal detectable change wins, first index on
    ties.
    """
    candidates = [
        float(lam) for lam in surr.lambda_grid if not _both_sides_exit(surr, float(lam))
    ]
    if not candidates:
        return None
    deltas = []
    for lam in candidates:
        d = min_detectable_delta(surr, node, lam)
        if d is None:
            return None
        deltas.append(d)
    best = int(np.argmax(deltas))
    return candidates[best], deltas[best]


def _overlap_side(m1: float, s1: float, m2: float, s2: float, n_points: int = 2001) -> float:
    """Shared probability mass of two normals, trapezoid rule on +-4 std."""
    if s1 < _STD_EPS and s2 < _STD_EPS:
        return 1.0 if abs(m1 - m2) < _STD_EPS else 0.0
    if s1 < _STD_EPS or s2 < _STD_EPS:
        return 0.0
    lo = min(m1 - 4.0 * s1, m2 - 4.0 * s2)
    hi = max(m1 + 4.0 * s1, m2 + 4.0 * s2)
    y = np.linspace(lo, hi, n_points)
    p1 = np.exp(-0.5 * ((y - m1) / s1) ** 2) / (s1 * math.sqrt(2.0 * math.pi))
    p2 = np.exp(-0.5 * ((y - m2) / s2) ** 2) / (s2 * math.sqrt(2.0 * math.pi))
    return float(np.trapezoid(np.minimum(p1, p2), y))


def overlap_integral(surr, node, lam: float, delta_max: float | None = None) -> float:
    """Average shared probability mass against the +-delta_max neighbors.

    Perturbed depths are clipped to the admissible span; a side clipped
    onto lam itself compares identical distributions and contributes one.
    """
    dmax = float(surr.delta_max if delta_max is None else delta_max)
    gmin, gmax = float(surr.lambda_grid[0]), float(surr.lambda_grid[-1])
    lam_p = min(lam + dmax, gmax)
    lam_m = max(lam - dmax, gmin)
    mean, std = surr.moments_at(node, [lam, lam_p, lam_m])
    o_plus = _overlap_side(mean[0], std[0], mean[1], std[1])
    o_minus = _overlap_side(mean[0], std[0], mean[2], std[2])
    return 0.5 * (o_plus + o_minus)


@dataclass(frozen=True)
class NodeResult:
    """Algorithm outcome at one sensor location."""

    x: float
    z: float
    separable: bool
    delta_min: float | None = None
    lambda_star: float | None = None
    overlap: np.ndarray | None = None
    o_min: float | None = None
    o_max: float | None = None
    r_o: float | None = None


@dataclass(frozen=True)
class SeparabilityMap:
    """Per-node separability classification over the sensor field."""

    records: tuple[NodeResult, ...]
    lambda_grid: np.ndarray
    delta_max: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["x_mm", "z_mm", "separable", "delta_min_mm", "lambda_star_mm", "o_min", "o_max", "r_o"]
            )
            for rec in self.records:
                writer.writerow(
                    [
                        repr(rec.x),
                        repr(rec.z),
                        "1" if rec.separable else "0",
                        repr(float(rec.delta_min)) if rec.delta_min is not None else "",
                        repr(float(rec.lambda_star)) if rec.lambda_star is not None else "",
                        repr(float(rec.o_min)) if rec.o_min is not None else "",
                        repr(float(rec.o_max)) if rec.o_max is not None else "",
                        repr(float(rec.r_o)) if rec.r_o is not None else "",
                    ]
                )


def _classify_node(surr, node) -> NodeResult:
    result = maximin_over_grid(surr, node)
    if result is not None:
        lam_star, delta_min = result
        return NodeResult(
            x=float(node[0]), z=float(node[1]), separable=True,
            delta_min=delta_min, lambda_star=lam_star,
        )
    overlaps = np.array(
        [overlap_integral(surr, node, float(lam)) for lam in surr.lambda_grid]
    )
    o_min = float(overlaps.min())
    o_max = float(overlaps.max())
    return NodeResult(
        x=float(node[0]), z=float(node[1]), separable=False,
        overlap=overlaps, o_min=o_min, o_max=o_max, r_o=o_max - o_min,
    )


def separability_map(surr, nodes: np.ndarray, n_threads: int = 1) -> SeparabilityMap:
    """Run the separability check with maximin fallback to overlap per node.

    Per node: if every admissible grid depth separates at delta_max, the
    maximin optimization reports (lambda_star, delta_min); otherwise the
    overlap matrix over the grid and its (min, max, range) statistics are
    reported. Deterministic given the surrogates; nodes are independent
    and may be processed concurrently.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            records = list(pool.map(lambda nd: _classify_node(surr, nd), nodes))
    else:
        records = [_classify_node(surr, nd) for nd in nodes]
    return SeparabilityMap(
        records=tuple(records),
        lambda_grid=surr.lambda_grid,
        delta_max=float(surr.delta_max),
    )
