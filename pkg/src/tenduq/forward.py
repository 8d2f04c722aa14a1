"""Forward models standing in for the finite-element simulations.

Two analytic strain-change models make the pipeline runnable end to end:
``SyntheticBeamModel`` mimics the laboratory beam used for calibration and
``UpscaledBeamModel`` the T-beam used for the depth-identifiability study.
Both are declared stand-ins, not physics claims; their constants reproduce
the qualitative strain-field shape (amplitude ~20 microstrain at the break,
monotone decay along the beam, mild vertical asymmetry) so GP surrogacy,
calibration, and propagation are exercised honestly at desk scale.

``SnapshotTable`` ingests externally computed simulation outputs in place
of either analytic model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ObservationSet

__all__ = [
    "SyntheticBeamModel",
    "UpscaledBeamModel",
    "SnapshotTable",
    "eval_f",
    "eval_f_batch",
    "eval_g",
    "eval_g_batch",
    "default_observation_grid",
    "generate_observations",
    "load_snapshots",
    "save_snapshots",
]


@dataclass(frozen=True)
class SyntheticBeamModel:
    """Analytic strain-change model for the pretensioned laboratory beam.

    The response at (x, z) for parameters theta = (E_cm, p0, c0, mu) is

        a0 * (E_ref / E_cm) * exp(-x / L_t) * (1 + beta_z * z / h)

    with transfer length L_t = phi_p * sigma_p0 / (4 * mu * p0) * (1 + c0 / c_ref).
    """

    a0: float = 20.0
    e_ref: float = 31000.0
    phi_p: float = 9.4
    sigma_p0: float = 755.0
    c_ref: float = 0.5
    beta_z: float = 0.15
    h: float = 200.0

    def __post_init__(self) -> None:
        for name in ("a0", "e_ref", "phi_p", "sigma_p0", "c_ref", "h"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not -1.0 < self.beta_z < 1.0:
            raise ValueError("beta_z must lie in (-1, 1)")

    def transfer_length(self, p0, c0, mu):
        return self.phi_p * self.sigma_p0 / (4.0 * mu * p0) * (1.0 + c0 / self.c_ref)


def _check_theta_f(theta: np.ndarray) -> None:
    e_cm, p0, mu = theta[..., 0], theta[..., 1], theta[..., 3]
    if np.any(e_cm <= 0.0) or np.any(p0 <= 0.0) or np.any(mu <= 0.0):
        raise ValueError("E_cm, p0 and mu must be positive")


def eval_f(model: SyntheticBeamModel, point, theta) -> float:
    """Strain change in microstrain at one (x, z) point for one theta."""
    point = np.asarray(point, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if point[0] < 0.0:
        raise ValueError("x must be >= 0")
    _check_theta_f(theta)
    e_cm, p0, c0, mu = theta
    lt = model.transfer_length(p0, c0, mu)
    return float(
        model.a0
        * (model.e_ref / e_cm)
        * np.exp(-point[0] / lt)
        * (1.0 + model.beta_z * point[1] / model.h)
    )


def eval_f_batch(model: SyntheticBeamModel, points: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Vectorized eval_f: points (N, 2) x thetas (B, 4) -> (B, N)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    _check_theta_f(thetas)
    e_cm, p0, c0, mu = thetas.T
    lt = model.transfer_length(p0, c0, mu)  # (B,)
    decay = np.exp(-points[:, 0][None, :] / lt[:, None])  # (B, N)
    vertical = 1.0 + model.beta_z * points[:, 1] / model.h  # (N,)
    return model.a0 * (model.e_ref / e_cm)[:, None] * decay * vertical[None, :]


@dataclass(frozen=True)
class UpscaledBeamModel:
    """Analytic strain-change model for the full-scale T-beam.

    The depth of the broken tendon enters as the control parameter
    lambda_a; the response at (x, z) for modulus E and depth lambda_a is

        a0 * (E_ref / E) * exp(-lambda_a / d0) * exp(-x / L_g)
           * exp(-((z - z_t) / w_z)^2)

    Geometry (web height, web width, flange thickness, flange width) is
    carried along for reporting; it does not enter the response.
    """

    a0: float = 20.0
    e_ref: float = 31000.0
    l_g: float = 500.0
    d0: float = 300.0
    z_t: float = 600.0
    w_z: float = 400.0
    h_w: float = 1000.0
    t_w: float = 1200.0
    t_f: float = 250.0
    b_f: float = 2250.0

    def __post_init__(self) -> None:
        for name in ("a0", "e_ref", "l_g", "d0", "w_z"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


def eval_g(model: UpscaledBeamModel, point, theta_e: float, lambda_a: float) -> float:
    """Strain change at one (x, z) point of the upscaled beam."""
    point = np.asarray(point, dtype=float)
    if point[0] < 0.0:
        raise ValueError("x must be >= 0")
    if theta_e <= 0.0:
        raise ValueError("E must be positive")
    return float(
        model.a0
        * (model.e_ref / theta_e)
        * np.exp(-lambda_a / model.d0)
        * np.exp(-point[0] / model.l_g)
        * np.exp(-(((point[1] - model.z_t) / model.w_z) ** 2))
    )


def eval_g_batch(
    model: UpscaledBeamModel, points: np.ndarray, theta_e: float, lambda_a: float
) -> np.ndarray:
    """eval_g over many points for one (E, lambda_a), shape (N,)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if theta_e <= 0.0:
        raise ValueError("E must be positive")
    return (
        model.a0
        * (model.e_ref / theta_e)
        * np.exp(-lambda_a / model.d0)
        * np.exp(-points[:, 0] / model.l_g)
        * np.exp(-(((points[:, 1] - model.z_t) / model.w_z) ** 2))
    )


def default_observation_grid() -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """55-point measurement grid with distance-to-break grouping.

    Five rows at z in {-80, -40, 0, 40, 80} mm, 11 stations per row from
    x = 0 mm in 40 mm steps. Groups S1..S11 collect the five points at a
    common distance x from the break.
    """
    xs = np.arange(11) * 40.0
    zs = np.array([-80.0, -40.0, 0.0, 40.0, 80.0])
    points = np.array([(x, z) for z in zs for x in xs])
    groups = {
        f"S{j + 1}": np.array([i for i, p in enumerate(points) if p[0] == xs[j]])
        for j in range(len(xs))
    }
    return points, groups


def generate_observations(
    model: SyntheticBeamModel,
    theta_true: np.ndarray,
    grid: np.ndarray | None,
    noise_std: float,
    rng: np.random.Generator,
    e_field: Callable[[float, float], float] | None = None,
) -> ObservationSet:
    """Synthetic observations: eval_f at theta_true plus Gaussian noise.

    Noise is drawn in normalized output units (the clean values scaled to
    [0, 1] over the grid) and then mapped back, matching the convention
    that the sensor noise level 0.01 refers to [0, 1]-scaled outputs.
    ``e_field`` optionally perturbs the modulus per point, multiplying
    E_cm by e_field(x, z); this fabricates a spatially varying stiffness
    that the four-parameter model cannot represent.
    """
    if noise_std < 0.0:
        raise ValueError("noise_std must be >= 0")
    if grid is None:
        points, groups = default_observation_grid()
    else:
        points = np.atleast_2d(np.asarray(grid, dtype=float))
        groups = None
        xs = sorted(set(points[:, 0].tolist()))
        groups = {
            f"S{j + 1}": np.array([i for i, p in enumerate(points) if p[0] == xs[j]])
            for j in range(len(xs))
        }
    theta_true = np.asarray(theta_true, dtype=float)
    if e_field is None:
        clean = eval_f_batch(model, points, theta_true[None, :])[0]
    else:
        clean = np.empty(len(points))
        for i, (x, z) in enumerate(points):
            theta_i = theta_true.copy()
            theta_i[0] = theta_true[0] * float(e_field(x, z))
            clean[i] = eval_f(model, (x, z), theta_i)
    lo, hi = float(clean.min()), float(clean.max())
    span = hi - lo if hi > lo else 1.0
    noisy = clean + rng.normal(0.0, 1.0, len(clean)) * noise_std * span
    if noise_std == 0.0:
        noisy = clean
    return ObservationSet(points=points, values=noisy, noise_std=noise_std, groups=groups)


@dataclass(frozen=True)
class SnapshotTable:
    """Design/output matrices of externally computed simulation runs."""

    design: np.ndarray
    outputs: np.ndarray
    points: np.ndarray
    param_names: tuple[str, ...]

    def __post_init__(self) -> None:
        design = np.atleast_2d(np.asarray(self.design, dtype=float)).copy()
        outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float)).copy()
        points = np.atleast_2d(np.asarray(self.points, dtype=float)).copy()
        if design.shape[0] != outputs.shape[0]:
            raise ValueError("design and outputs must have equal row counts")
        if outputs.shape[1] != points.shape[0]:
            raise ValueError("outputs column count must equal number of points")
        if design.shape[1] != len(self.param_names):
            raise ValueError("design column count must match param_names")
        for arr in (design, outputs, points):
            arr.setflags(write=False)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "param_names", tuple(self.param_names))

    @property
    def n_sims(self) -> int:
        return self.design.shape[0]


def _format_coord(v: float) -> str:
    return f"{v:g}"


def save_snapshots(table: SnapshotTable, path) -> None:
    """Write the snapshot CSV: ``param:<name>,...,out:<x>:<z>,...`` header."""
    header = [f"param:{n}" for n in table.param_names] + [
        f"out:{_format_coord(x)}:{_format_coord(z)}" for x, z in table.points
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(table.n_sims):
            row = [repr(float(v)) for v in table.design[i]]
            row += [repr(float(v)) for v in table.outputs[i]]
            writer.writerow(row)


def load_snapshots(path) -> SnapshotTable:
    """Parse a snapshot CSV, reporting malformed content with its location."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty snapshot file") from None
        header = [h.strip() for h in header]
        param_names: list[str] = []
        points: list[tuple[float, float]] = []
        for col, name in enumerate(header):
            if name.startswith("param:"):
                if points:
                    raise ValueError(
                        f"{path}: header column {col + 1}: param column after out columns"
                    )
                param_names.append(name[len("param:"):])
            elif name.startswith("out:"):
                parts = name[len("out:"):].split(":")
                if len(parts) != 2:
                    raise ValueError(
                        f"{path}: header column {col + 1}: malformed out column {name!r}"
                    )
                try:
                    points.append((float(parts[0]), float(parts[1])))
                except ValueError:
                    raise ValueError(
                        f"{path}: header column {col + 1}: non-numeric coordinates in {name!r}"
                    ) from None
            else:
                raise ValueError(
                    f"{path}: header column {col + 1}: expected param: or out: prefix, got {name!r}"
                )
        if not param_names:
            raise ValueError(f"{path}: header has no param columns")
        if not points:
            raise ValueError(f"{path}: header has no out columns")
        width = len(param_names) + len(points)
        design_rows: list[list[float]] = []
        output_rows: list[list[float]] = []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(
                    f"{path}: row {rownum} has {len(row)} fields, expected {width}"
                )
            values: list[float] = []
            for col, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: row {rownum}, column {col + 1}: non-numeric value {cell!r}"
                    ) from None
            design_rows.append(values[: len(param_names)])
            output_rows.append(values[len(param_names):])
    if not design_rows:
        raise ValueError(f"{path}: no simulations")
    return SnapshotTable(
        design=np.array(design_rows),
        outputs=np.array(output_rows),
        points=np.array(points),
        param_names=tuple(param_names),
    )
