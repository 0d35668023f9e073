"""Incompressible two-phase flow in heterogeneous porous media.

Sequential IMPES scheme on the cell-centred grid of :mod:`surroflow.grf`:
each step solves a two-point flux approximation pressure system with total
mobility and harmonic face averaging, then advances the injected-phase
saturation explicitly with upwind fractional flow under a CFL bound.

Boundary conditions are fixed volumetric injection across the left edge
(one rate per inlet cell), fixed pressure on the right edge applied through
half-cell transmissibilities, and no flow across top and bottom. Relative
permeabilities follow a power law in effective saturation with irreducible
saturations for both phases.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .errors import GeometryError, NumericalError
from .grf import GridSpec, PermeabilityField
from .training import binarize

PRESSURE_SCALE_PA = 1.0e7
PRESSURE_SHIFT = 1.2


@dataclass(frozen=True)
class SimConfig:
    """Physical and numerical parameters of one simulation."""

    grid: GridSpec
    snapshot_times: tuple[float, ...]
    injection_rate: float = 1.13e-5
    outlet_pressure: float = 1.2e7
    porosity: float = 0.2
    thickness_m: float = 1.0
    corey_exponent: float = 2.0
    mobility_ratio: float = 2.0
    residual_resident: float = 0.2
    residual_injected: float = 0.05
    resident_viscosity: float = 1.2e-3
    cfl_safety: float = 0.5
    cg_rtol: float = 1e-10

    def __post_init__(self):
        if self.grid.width < 2:
            raise GeometryError("flow domain needs at least 2 columns")
        times = tuple(float(t) for t in self.snapshot_times)
        if not times:
            raise GeometryError("at least one snapshot time is required")
        if any(not np.isfinite(t) or t <= 0 for t in times):
            raise GeometryError(f"snapshot times must be positive and finite: {times}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GeometryError(f"snapshot times must be strictly increasing: {times}")
        object.__setattr__(self, "snapshot_times", times)
        for name in (
            "injection_rate",
            "porosity",
            "thickness_m",
            "corey_exponent",
            "mobility_ratio",
            "resident_viscosity",
            "cfl_safety",
            "cg_rtol",
        ):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.residual_injected < 1 or not 0 <= self.residual_resident < 1:
            raise GeometryError("residual saturations must lie in [0, 1)")
        if self.residual_injected + self.residual_resident >= 1:
            raise GeometryError("residual saturations leave no mobile range")
        if self.porosity > 1:
            raise GeometryError(f"porosity must not exceed 1, got {self.porosity}")

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_size_m**2 * self.thickness_m

    @property
    def max_saturation(self) -> float:
        return 1.0 - self.residual_resident


@dataclass(frozen=True)
class Snapshot:
    """Simulator state at one requested time."""

    time_s: float
    pressure: np.ndarray
    rescaled_pressure: np.ndarray
    saturation: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class SimDiagnostics:
    """Volume accounting accumulated over a full run."""

    injected_volume: float
    produced_volume: float
    stored_volume: float
    steps: int

    @property
    def balance_error(self) -> float:
        """Relative injected-phase volume defect."""
        defect = self.injected_volume - self.produced_volume - self.stored_volume
        return abs(defect) / max(self.injected_volume, 1e-300)


def rescale_pressure(pressure: np.ndarray) -> np.ndarray:
    """Map pressures in pascal to the dimensionless training range."""
    return np.asarray(pressure, dtype=np.float64) / PRESSURE_SCALE_PA - PRESSURE_SHIFT


def effective_saturation(s: np.ndarray, config: SimConfig) -> np.ndarray:
    """Mobile fraction of the injected phase, clipped to [0, 1]."""
    span = 1.0 - config.residual_resident - config.residual_injected
    return np.clip((np.asarray(s, dtype=np.float64) - config.residual_injected) / span, 0.0, 1.0)


def mobilities(s: np.ndarray, config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Phase mobilities (injected, resident) in 1/(Pa s)."""
    se = effective_saturation(s, config)
    a = config.corey_exponent
    lam_inj = config.mobility_ratio * se**a / config.resident_viscosity
    lam_res = (1.0 - se) ** a / config.resident_viscosity
    return lam_inj, lam_res


def fractional_flow(s: np.ndarray, config: SimConfig) -> np.ndarray:
    """Injected-phase share of the total volumetric flux."""
    lam_inj, lam_res = mobilities(s, config)
    return lam_inj / (lam_inj + lam_res)


@lru_cache(maxsize=32)
def _max_fractional_slope(exponent, ratio, res_resident, res_injected) -> float:
    span = 1.0 - res_resident - res_injected
    se = np.linspace(0.0, 1.0, 4001)
    lam_i = ratio * se**exponent
    lam_r = (1.0 - se) ** exponent
    f = lam_i / (lam_i + lam_r)
    return float(np.abs(np.gradient(f, se)).max() / span)


def max_fractional_slope(config: SimConfig) -> float:
    """Upper bound on |df/dS| used by the CFL estimate."""
    return _max_fractional_slope(
        config.corey_exponent,
        config.mobility_ratio,
        config.residual_resident,
        config.residual_injected,
    )


def _face_transmissibilities(k: np.ndarray, s: np.ndarray, config: SimConfig):
    """Harmonic-mean face transmissibilities in m^3/(Pa s)."""
    lam_inj, lam_res = mobilities(s, config)
    c = np.asarray(k, dtype=np.float64) * (lam_inj + lam_res)
    th = config.thickness_m
    tx = th * 2.0 * c[:, :-1] * c[:, 1:] / (c[:, :-1] + c[:, 1:])
    ty = th * 2.0 * c[:-1, :] * c[1:, :] / (c[:-1, :] + c[1:, :])
    t_out = th * 2.0 * c[:, -1]
    return tx, ty, t_out


def solve_pressure(
    k: np.ndarray,
    s: np.ndarray,
    config: SimConfig,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the TPFA pressure system with CG and a Jacobi preconditioner."""
    h, w = config.grid.height, config.grid.width
    if k.shape != (h, w) or s.shape != (h, w):
        raise GeometryError(f"fields must be {h}x{w}, got {k.shape} and {s.shape}")
    tx, ty, t_out = _face_transmissibilities(k, s, config)
    idx = np.arange(h * w).reshape(h, w)

    diag = np.zeros(h * w)
    rows, cols, vals = [], [], []
    for ga, gb, t in (
        (idx[:, :-1].ravel(), idx[:, 1:].ravel(), tx.ravel()),
        (idx[:-1, :].ravel(), idx[1:, :].ravel(), ty.ravel()),
    ):
        np.add.at(diag, ga, t)
        np.add.at(diag, gb, t)
        rows.extend((ga, gb))
        cols.extend((gb, ga))
        vals.extend((-t, -t))
    np.add.at(diag, idx[:, -1], t_out)
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag)
    a = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, h * w),
    )

    b = np.zeros(h * w)
    b[idx[:, 0]] += config.injection_rate
    b[idx[:, -1]] += t_out * config.outlet_pressure

    inv_diag = 1.0 / diag
    precond = LinearOperator((h * w, h * w), matvec=lambda v: inv_diag * v)
    guess = None if x0 is None else np.asarray(x0, dtype=np.float64).ravel()
    solution, info = cg(a, b, x0=guess, rtol=config.cg_rtol, atol=0.0, M=precond)
    if info != 0:
        residual = np.linalg.norm(b - a @ solution) / np.linalg.norm(b)
        raise NumericalError(
            f"pressure solve did not converge (cg info={info}, residual={residual:.2e})"
        )
    return solution.reshape(h, w)


def _face_fluxes(p: np.ndarray, k: np.ndarray, s: np.ndarray, config: SimConfig):
    """Total volumetric face fluxes; positive along +x (east) and +y (south)."""
    h, w = p.shape
    tx, ty, t_out = _face_transmissibilities(k, s, config)
    fx = np.zeros((h, w + 1))
    fy = np.zeros((h + 1, w))
    fx[:, 1:-1] = tx * (p[:, :-1] - p[:, 1:])
    fx[:, 0] = config.injection_rate
    fx[:, -1] = t_out * (p[:, -1] - config.outlet_pressure)
    fy[1:-1, :] = ty * (p[:-1, :] - p[1:, :])
    return fx, fy


def _injected_face_fluxes(fx, fy, s, config):
    """Upwind injected-phase share of each face flux."""
    f = fractional_flow(s, config)
    ix = np.empty_like(fx)
    iy = np.zeros_like(fy)
    # interior x-faces: donor cell by flux sign
    ix[:, 1:-1] = np.where(fx[:, 1:-1] >= 0, f[:, :-1], f[:, 1:]) * fx[:, 1:-1]
    # inlet carries pure injected fluid; outlet exports at the last cell's
    # fractional flow, and any backflow brings in resident fluid only
    ix[:, 0] = fx[:, 0]
    ix[:, -1] = np.where(fx[:, -1] >= 0, f[:, -1], 0.0) * fx[:, -1]
    iy[1:-1, :] = np.where(fy[1:-1, :] >= 0, f[:-1, :], f[1:, :]) * fy[1:-1, :]
    return ix, iy


def _stable_dt_from_fluxes(fx, fy, config: SimConfig) -> float:
    outflow = (
        np.maximum(fx[:, 1:], 0.0)
        + np.maximum(-fx[:, :-1], 0.0)
        + np.maximum(fy[1:, :], 0.0)
        + np.maximum(-fy[:-1, :], 0.0)
    )
    peak = outflow.max()
    if peak <= 0:
        return np.inf
    pore_volume = config.porosity * config.cell_volume
    return pore_volume / (peak * max_fractional_slope(config))


def max_stable_dt(p: np.ndarray, k: np.ndarray, s: np.ndarray, config: SimConfig) -> float:
    """Largest explicit-transport step for the current pressure field."""
    fx, fy = _face_fluxes(p, k, s, config)
    return _stable_dt_from_fluxes(fx, fy, config)


def _advance_with_fluxes(s, fx, fy, dt, config: SimConfig):
    ix, iy = _injected_face_fluxes(fx, fy, s, config)
    net_in = ix[:, :-1] - ix[:, 1:] + iy[:-1, :] - iy[1:, :]
    s_new = s + (dt / (config.porosity * config.cell_volume)) * net_in
    produced = float(np.maximum(ix[:, -1], 0.0).sum() * dt)
    return s_new, produced


def advance_saturation(
    s: np.ndarray, p: np.ndarray, k: np.ndarray, dt: float, config: SimConfig
) -> np.ndarray:
    """One explicit upwind transport step; rejects steps beyond the CFL bound."""
    if not dt > 0:
        raise NumericalError(f"time step must be positive, got {dt}")
    fx, fy = _face_fluxes(p, k, s, config)
    bound = _stable_dt_from_fluxes(fx, fy, config)
    if dt > bound * (1.0 + 1e-9):
        raise NumericalError(f"CFL violation: dt={dt:.6g} exceeds stable bound {bound:.6g}")
    s_new, _ = _advance_with_fluxes(s, fx, fy, dt, config)
    return s_new


def simulate(
    field: PermeabilityField, config: SimConfig, return_diagnostics: bool = False
):
    """Run the IMPES scheme, recording a :class:`Snapshot` per requested time."""
    k = np.asarray(field.values, dtype=np.float64)
    h, w = config.grid.height, config.grid.width
    if k.shape != (h, w):
        raise GeometryError(f"permeability must be {h}x{w}, got {k.shape}")
    s = np.zeros((h, w))
    p = None
    t = 0.0
    injected = 0.0
    produced = 0.0
    steps = 0
    total_rate = config.injection_rate * h
    snapshots = []
    for target in config.snapshot_times:
        while t < target * (1.0 - 1e-12):
            p = solve_pressure(k, s, config, x0=p)
            fx, fy = _face_fluxes(p, k, s, config)
            bound = _stable_dt_from_fluxes(fx, fy, config)
            dt = min(config.cfl_safety * bound, target - t)
            s, out = _advance_with_fluxes(s, fx, fy, dt, config)
            injected += total_rate * dt
            produced += out
            t += dt
            steps += 1
        p = solve_pressure(k, s, config, x0=p)
        snapshots.append(
            Snapshot(
                time_s=target,
                pressure=p.copy(),
                rescaled_pressure=rescale_pressure(p),
                saturation=s.copy(),
                mask=binarize(s),
            )
        )
    if return_diagnostics:
        stored = float(s.sum() * config.porosity * config.cell_volume)
        return snapshots, SimDiagnostics(injected, produced, stored, steps)
    return snapshots
