"""2D finite-volume enthalpy-method melt-pool plant.

The domain is a vertical slice along the scan track. Cells are indexed
``[row, col]`` with row 0 at the bottom of the substrate. Columns share one
width ``dx``; rows carry their own heights so that the substrate and every
powder layer map onto whole rows. Empty cells hold no material and no energy.

Physics per explicit step:

* conduction with phase-dependent conductivity (harmonic face averages),
* a Gaussian surface beam absorbed with exponential decay below the local
  surface,
* convection and radiation from every material face that borders empty space,
* a base-plate sink holding the plane below row 0 at ambient temperature.

Latent heat enters through the enthalpy-temperature map, which is linear in
the mushy range, i.e. an apparent heat capacity ``c_p + L / (T_l - T_s)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import _kernel
from ._kernel import EMPTY, LIQUID, POWDER, SOLID
from .config import ConfigError, PlantConfig

PHASE_NAMES = {EMPTY: "empty", POWDER: "powder", SOLID: "solid", LIQUID: "liquid"}
FULL_LIQUID = 1.0 - 1e-9

RUN_LOG_HEADER = ["layer", "step", "time_s", "laser_x_m", "power_w",
                  "depth_m", "length_m", "max_temp_k"]
SNAPSHOT_HEADER = ["col", "row", "x_m", "y_m", "temp_k", "phase", "liquid_frac"]


class PlantError(RuntimeError):
    """Raised when the simulation leaves its valid operating envelope."""


@dataclass(frozen=True)
class MeltPoolState:
    depth: float
    length: float

    def as_array(self) -> np.ndarray:
        return np.array([self.depth, self.length])


@dataclass(frozen=True)
class SurfaceMeasurement:
    surface_temps: np.ndarray
    mean_temp: float


@dataclass
class ScanResult:
    """Outcome of one layer scan, sampled once per control interval."""

    samples: np.ndarray  # (N, 2) depth and length in metres
    log: list = field(default_factory=list)

    @property
    def states(self) -> list[MeltPoolState]:
        return [MeltPoolState(float(d), float(l)) for d, l in self.samples]


def enthalpy_from_temperature(temp, material):
    """Volumetric enthalpy [J/m^3] referenced to 0 K."""
    temp = np.asarray(temp, dtype=float)
    rho_c = material.density * material.specific_heat
    frac = liquid_fraction(temp, material)
    return rho_c * temp + material.density * material.latent_heat * frac


def liquid_fraction(temp, material):
    span = material.t_liquidus - material.t_solidus
    return np.clip((np.asarray(temp, dtype=float) - material.t_solidus) / span, 0.0, 1.0)


def temperature_from_enthalpy(enthalpy, material):
    """Invert the enthalpy map. Returns ``(temperature, liquid_fraction)``."""
    h = np.asarray(enthalpy, dtype=float)
    rho_c = material.density * material.specific_heat
    rho_l = material.density * material.latent_heat
    h_sol = rho_c * material.t_solidus
    h_liq = rho_c * material.t_liquidus + rho_l
    apparent = rho_c + rho_l / (material.t_liquidus - material.t_solidus)
    temp = np.where(h <= h_sol, h / rho_c,
                    np.where(h >= h_liq, (h - rho_l) / rho_c,
                             material.t_solidus + (h - h_sol) / apparent))
    frac = np.where(h <= h_sol, 0.0, np.where(h >= h_liq, 1.0, (h - h_sol) / (h_liq - h_sol)))
    return temp, frac


def gaussian_intensity(r, power, beam_radius):
    """Surface intensity of the normalized Gaussian beam [W/m^2]."""
    r = np.asarray(r, dtype=float)
    return 2.0 * power / (math.pi * beam_radius**2) * np.exp(-2.0 * (r / beam_radius) ** 2)


def stable_time_step(config: PlantConfig, dx: float, dz: np.ndarray) -> float:
    """Largest explicit step keeping every update coefficient non-negative.

    Uses the most conductive phase everywhere and includes the base-plate
    sink, so it is never looser than ``0.25 * h_min**2 * rho * c_p / k_max``.
    """
    mat = config.material
    k = mat.k_max
    rho_c = mat.density * mat.specific_heat
    h_min = min(dx, float(dz.min()))
    limit = 0.25 * h_min**2 * rho_c / k
    # per-row coefficient sums: two lateral faces plus vertical faces
    lateral = 2.0 * k / dx**2
    below = np.empty_like(dz)
    below[1:] = 2.0 * k / (dz[1:] * (dz[1:] + dz[:-1]))
    below[0] = 2.0 * k / dz[0] ** 2 if config.process.bottom_sink else 0.0
    above = np.zeros_like(dz)
    above[:-1] = 2.0 * k / (dz[:-1] * (dz[1:] + dz[:-1]))
    per_row = (lateral + below + above) / rho_c
    return min(limit, 1.0 / float(per_row.max()))


class ThermalGrid:
    """Full plant state plus the operations that advance it.

    Instances own all their arrays, so many grids may live in one process.
    """

    def __init__(self, config: PlantConfig):
        self.config = config
        mat, proc = config.material, config.process
        self.material = mat
        self.process = proc

        self.n_cols = max(1, round(proc.track_length / proc.cell_size))
        self.dx = proc.track_length / self.n_cols
        self.n_sub_rows = max(1, round(proc.substrate_height / proc.cell_size))
        self.rows_per_layer = max(1, round(proc.layer_thickness / proc.cell_size))
        self.n_rows = self.n_sub_rows + proc.n_layers * self.rows_per_layer
        self.dz = np.concatenate([
            np.full(self.n_sub_rows, proc.substrate_height / self.n_sub_rows),
            np.full(proc.n_layers * self.rows_per_layer,
                    proc.layer_thickness / self.rows_per_layer),
        ])
        self.z_edges = np.concatenate([[0.0], np.cumsum(self.dz)])
        self.x_edges = self.dx * np.arange(self.n_cols + 1)
        self.x_centers = 0.5 * (self.x_edges[:-1] + self.x_edges[1:])

        limit = stable_time_step(config, self.dx, self.dz)
        interval = proc.interval_time
        if proc.time_step is None:
            self.steps_per_interval = math.ceil(interval / limit * (1 - 1e-12))
            self.dt = interval / self.steps_per_interval
        else:
            if proc.time_step > limit:
                raise ConfigError(
                    f"time_step {proc.time_step:.3e} s exceeds stability bound {limit:.3e} s")
            ratio = interval / proc.time_step
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ConfigError("time_step must divide the control interval exactly")
            self.steps_per_interval = round(ratio)
            self.dt = proc.time_step
        self.stability_limit = limit

        shape = (self.n_rows, self.n_cols)
        self.phase = np.full(shape, EMPTY, dtype=np.int8)
        self.temperature = np.full(shape, mat.t_ambient)
        self.enthalpy = np.zeros(shape)
        self.liquid_frac = np.zeros(shape)
        self.consolidated = np.zeros(shape, dtype=bool)
        self.current_layer = -1
        self.sim_time = 0.0

        sub = slice(0, self.n_sub_rows)
        self.phase[sub] = SOLID
        self.consolidated[sub] = True
        self.enthalpy[sub] = enthalpy_from_temperature(mat.t_ambient, mat)
        self._top = self.n_sub_rows
        self._update_geometry()

    # ------------------------------------------------------------------
    # geometry helpers

    @property
    def material_mask(self) -> np.ndarray:
        return self.phase != EMPTY

    @property
    def active_height(self) -> np.ndarray:
        """Height of the topmost material cell in each column [m]."""
        mask = self.material_mask
        has = mask.any(axis=0)
        top_row = self.n_rows - 1 - np.argmax(mask[::-1], axis=0)
        return np.where(has, self.z_edges[top_row + 1], 0.0)

    @property
    def total_height(self) -> float:
        return float(self.z_edges[self._top])

    def interval_columns(self, start: int, stop: int) -> tuple[int, int]:
        """Column range whose centres fall on control intervals ``[start, stop)``."""
        seg = self.process.track_length / self.process.n_intervals
        cols = np.nonzero((self.x_centers >= start * seg) & (self.x_centers < stop * seg))[0]
        if cols.size == 0:
            return 0, 0
        return int(cols[0]), int(cols[-1]) + 1

    def total_energy(self) -> float:
        """Sum of cell enthalpies times cell volumes per unit depth [J/m]."""
        return float(np.sum(self.enthalpy * self.dz[:, None]) * self.dx)

    def set_temperature(self, temp: np.ndarray) -> None:
        """Overwrite material-cell temperatures (testing and restarts)."""
        mask = self.material_mask
        temp = np.broadcast_to(np.asarray(temp, dtype=float), mask.shape)
        h = enthalpy_from_temperature(temp, self.material)
        self.enthalpy = np.where(mask, h, 0.0)
        self._refresh_state()

    # ------------------------------------------------------------------
    # process operations

    def deposit_layer(self, footprint: tuple[int, int] | None = None) -> None:
        """Add one powder layer at ambient temperature over ``[start, stop)`` columns."""
        if self.current_layer + 1 >= self.process.n_layers:
            raise ConfigError("all configured layers already deposited")
        start, stop = (0, self.n_cols) if footprint is None else footprint
        if not 0 <= start < stop <= self.n_cols:
            raise ValueError(f"footprint {footprint} outside domain of {self.n_cols} columns")
        self.current_layer += 1
        r0 = self.n_sub_rows + self.current_layer * self.rows_per_layer
        rows = slice(r0, r0 + self.rows_per_layer)
        cols = slice(start, stop)
        self.phase[rows, cols] = POWDER
        self.enthalpy[rows, cols] = enthalpy_from_temperature(self.material.t_ambient, self.material)
        self.temperature[rows, cols] = self.material.t_ambient
        self.liquid_frac[rows, cols] = 0.0
        self._top = r0 + self.rows_per_layer
        self._update_geometry()

    def step(self, source: np.ndarray | None = None, dt: float | None = None) -> None:
        """Advance one explicit step; ``source`` is an extra W/m^3 field over the grid."""
        dt = self.dt if dt is None else dt
        if dt > self.stability_limit * (1 + 1e-12):
            raise ConfigError(f"dt {dt:.3e} s exceeds stability bound {self.stability_limit:.3e} s")
        if source is not None:
            mask = self.material_mask
            self.enthalpy += dt * np.where(mask, source, 0.0)
        self._advance(dt, 0.0, self._no_columns)

    def _advance(self, dt: float, absorbed: float, col_frac: np.ndarray) -> None:
        mat, proc = self.material, self.process
        rho_c = mat.density * mat.specific_heat
        _kernel.advance(
            self.enthalpy, self.temperature, self.liquid_frac, self.phase,
            self.consolidated, self.dz, self.dx, dt, self._top,
            mat.conductivity_solid, mat.conductivity_liquid, mat.conductivity_powder,
            rho_c, mat.density * mat.latent_heat, mat.t_solidus, mat.t_liquidus,
            mat.t_ambient, mat.convection_coeff, mat.emissivity, self._loss_area,
            proc.surface_losses, proc.bottom_sink, absorbed, col_frac,
            self._absorption, self._absorption_scale, self._power)
        self.sim_time += dt

    def scan_layer(self, profile, xi=None) -> ScanResult:
        """Scan the current layer with a piecewise-constant power profile.

        The melt pool is sampled at the last thermal step of each of the N
        control intervals.
        """
        proc = self.process
        profile = self.validate_profile(profile, xi)
        samples = np.zeros((proc.n_intervals, 2))
        log = []
        absorptivity = self.material.absorptivity
        t_layer = 0.0
        for i, u in enumerate(profile):
            for _ in range(self.steps_per_interval):
                laser_x = proc.scan_speed * (t_layer + 0.5 * self.dt)
                if u > 0:
                    self._advance(self.dt, absorptivity * u, self.column_power_fraction(laser_x))
                else:
                    self._advance(self.dt, 0.0, self._no_columns)
                t_layer += self.dt
            self._check_finite()
            pool = self.measure_melt_pool()
            samples[i] = pool.depth, pool.length
            log.append({
                "layer": self.current_layer, "step": i, "time_s": self.sim_time,
                "laser_x_m": proc.scan_speed * t_layer, "power_w": float(u),
                "depth_m": pool.depth, "length_m": pool.length,
                "max_temp_k": self.max_temperature(),
            })
        return ScanResult(samples, log)

    def cool(self, duration: float | None = None) -> None:
        """Step with zero source; default duration is ``cooling_factor * tau``."""
        duration = self.process.cooling_time if duration is None else duration
        if duration < 0:
            raise ValueError("cooling duration must be non-negative")
        for _ in range(round(duration / self.dt)):
            self._advance(self.dt, 0.0, self._no_columns)
        self._check_finite()

    def validate_profile(self, profile, xi=None) -> np.ndarray:
        proc = self.process
        u = np.asarray(profile, dtype=float)
        if u.shape != (proc.n_intervals,):
            raise ValueError(f"profile must have length {proc.n_intervals}")
        if not np.isfinite(u).all():
            raise ValueError("profile contains non-finite powers")
        if xi is not None:
            xi = np.asarray(xi, dtype=bool)
            if np.any(u[~xi] != 0):
                raise ValueError("nonzero power outside the layer geometry")
        on = u != 0
        if np.any((u[on] < proc.u_min) | (u[on] > proc.u_max)):
            raise ValueError(f"powers must be 0 or within [{proc.u_min}, {proc.u_max}] W")
        return u

    # ------------------------------------------------------------------
    # measurements

    def measure_melt_pool(self) -> MeltPoolState:
        """Melt-pool depth and length from the box around fully liquid cells.

        The box spans every cell with liquid fraction 1 (to within 1e-9).
        Its bottom, left and right edges are then pushed outward by the
        largest liquid fraction found in the adjacent row or column of
        partially molten cells, so the extents move continuously as the
        front crosses a cell instead of jumping a whole cell at a time.
        With only fully liquid and fully solid cells this is exactly the
        cell bounding box.
        """
        f = np.where(self.material_mask, self.liquid_frac, 0.0)
        full = f >= FULL_LIQUID
        rows = np.nonzero(full.any(axis=1))[0]
        if rows.size == 0:
            return MeltPoolState(0.0, 0.0)
        cols = np.nonzero(full.any(axis=0))[0]
        r0, r1 = rows[0], rows[-1]
        c0, c1 = cols[0], cols[-1]
        depth = self.z_edges[r1 + 1] - self.z_edges[r0]
        if r0 > 0:
            depth += f[r0 - 1, c0:c1 + 1].max() * self.dz[r0 - 1]
        width = c1 - c0 + 1.0
        if c0 > 0:
            width += f[r0:r1 + 1, c0 - 1].max()
        if c1 + 1 < self.n_cols:
            width += f[r0:r1 + 1, c1 + 1].max()
        return MeltPoolState(float(depth), float(width * self.dx))

    def measure_surface(self, footprint: tuple[int, int] | None = None) -> SurfaceMeasurement:
        """Temperatures of the topmost material cell per column over ``footprint``."""
        start, stop = (0, self.n_cols) if footprint is None else footprint
        mask = self.material_mask[:, start:stop]
        top_row = self.n_rows - 1 - np.argmax(mask[::-1], axis=0)
        temps = self.temperature[top_row, np.arange(start, stop)]
        return SurfaceMeasurement(temps.copy(), float(np.mean(temps)))

    def max_temperature(self) -> float:
        return float(self.temperature[self.material_mask].max())

    def liquid_cell_count(self) -> int:
        return int(np.count_nonzero((self.liquid_frac > 0) & self.material_mask))

    def write_snapshot(self, path) -> None:
        """Write the full field, one row per material cell."""
        zc = 0.5 * (self.z_edges[:-1] + self.z_edges[1:])
        rows, cols = np.nonzero(self.material_mask)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SNAPSHOT_HEADER)
            for r, c in zip(rows, cols):
                w.writerow([c, r, repr(float(self.x_centers[c])), repr(float(zc[r])),
                            repr(float(self.temperature[r, c])),
                            PHASE_NAMES[int(self.phase[r, c])],
                            repr(float(self.liquid_frac[r, c]))])

    # ------------------------------------------------------------------
    # internals

    def _conductivity(self, top: int) -> np.ndarray:
        mat = self.material
        phase = self.phase[:top]
        f = self.liquid_frac[:top]
        dense = mat.conductivity_solid + f * (mat.conductivity_liquid - mat.conductivity_solid)
        k = np.where(self.consolidated[:top], dense, mat.conductivity_powder)
        return np.where(phase == EMPTY, 0.0, k)

    def _refresh_state(self, top: int | None = None) -> None:
        top = self.n_rows if top is None else top
        mask = self.phase[:top] != EMPTY
        temp, frac = temperature_from_enthalpy(self.enthalpy[:top], self.material)
        self.temperature[:top] = np.where(mask, temp, self.material.t_ambient)
        self.liquid_frac[:top] = np.where(mask, frac, 0.0)
        melted = mask & (frac > 0)
        self.consolidated[:top] |= melted
        self.phase[:top] = np.where(~mask, EMPTY,
                                    np.where(melted, LIQUID,
                                             np.where(self.consolidated[:top], SOLID, POWDER)))

    def _check_finite(self) -> None:
        if not np.isfinite(self.enthalpy[:self._top]).all():
            raise PlantError("non-finite enthalpy encountered")

    def _update_geometry(self) -> None:
        """Refresh data that only changes when material is added."""
        mask = self.material_mask
        empty = ~mask
        top = np.zeros_like(mask)
        top[:-1] = mask[:-1] & empty[1:]
        top[-1] = mask[-1]
        side = np.zeros(mask.shape)
        side[:, 1:] += mask[:, 1:] & empty[:, :-1]
        side[:, :-1] += mask[:, :-1] & empty[:, 1:]
        self._loss_area = top * self.dx + side * self.dz[:, None]
        self._power = np.zeros(mask.shape)
        self._no_columns = np.zeros(self.n_cols)
        self._update_absorption()

    def _update_absorption(self) -> None:
        """Per-cell fraction of a column's absorbed power (Beer-Lambert decay)."""
        mask = self.material_mask
        surface = self.active_height
        delta = self.material.extinction_depth
        upper = np.clip(surface[None, :] - self.z_edges[1:, None], 0.0, None)
        lower = np.clip(surface[None, :] - self.z_edges[:-1, None], 0.0, None)
        frac = np.exp(-upper / delta) - np.exp(-lower / delta)
        self._absorption = np.where(mask, frac, 0.0)
        self._absorption_scale = 1.0 / (self.process.slab * self.dx * self.dz)

    def column_power_fraction(self, laser_x: float) -> np.ndarray:
        """Fraction of the beam's line-integrated power falling on each column."""
        s = math.sqrt(2.0) / self.process.beam_radius
        cdf = erf(s * (self.x_edges - laser_x))
        return 0.5 * (cdf[1:] - cdf[:-1])

    def _laser_field(self, laser_x: float, power: float) -> np.ndarray:
        absorbed = self.material.absorptivity * power
        col = self.column_power_fraction(laser_x)
        return absorbed * col[None, :] * self._absorption * self._absorption_scale[:, None]


def laser_source(grid: ThermalGrid, laser_x: float, power: float) -> np.ndarray:
    """Volumetric absorbed heat rate [W/m^3] for a beam at ``laser_x``.

    The 2D slice represents a slab of out-of-plane thickness ``slab``
    (default 2R). The beam's intensity is integrated across the slab
    direction and over each column width, then spread downward from the
    local surface with decay length ``extinction_depth``. Power reaching
    empty cells or passing below the domain is lost, so the absorbed total
    never exceeds ``absorptivity * power``.
    """
    if power < 0:
        raise ValueError("laser power must be non-negative")
    if power == 0:
        return np.zeros((grid.n_rows, grid.n_cols))
    return grid._laser_field(laser_x, power)
