"""Layer-to-layer feedback loop, part geometries and the open-loop baseline.

Each layer runs: measure the mean surface temperature over the upcoming
footprint, recoat, choose the layer's power profile (OCP solve or constant),
scan, then cool. The temperature is read before recoating; fresh powder is
deposited at ambient temperature and would otherwise hide the part's heat.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import PlantConfig
from .plant import RUN_LOG_HEADER, ThermalGrid
from .qp import OcpSpec, QpError, condense, ocp_cost, solve_box_qp
from .sysid import LpvModel, ThetaClampWarning

log = logging.getLogger(__name__)

RESULTS_HEADER = ["layer", "theta_k", "mean_power_w", "mean_depth_m", "mean_length_m",
                  "end_surface_k", "ocp_objective", "solve_time_s"]
GEOMETRIES = ("brick", "overhang")


class ControlError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerGeometry:
    """Laser on/off mask over the N intervals; the part occupies ``[start, stop)``."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=bool)
        on = np.nonzero(xi)[0]
        if on.size == 0:
            raise ValueError("layer has no printed intervals")
        if on[-1] - on[0] + 1 != on.size:
            raise ValueError("printed intervals must be contiguous")
        object.__setattr__(self, "xi", xi)

    @property
    def interval_range(self) -> tuple[int, int]:
        on = np.nonzero(self.xi)[0]
        return int(on[0]), int(on[-1]) + 1

    def footprint(self, grid: ThermalGrid) -> tuple[int, int]:
        return grid.interval_columns(*self.interval_range)


@dataclass
class PartGeometry:
    name: str
    layers: list

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def make_geometry(name: str, n_layers: int = 10, n_intervals: int = 40,
                  base_fraction: float = 0.4) -> PartGeometry:
    """Brick (full track every layer) or symmetric overhanging trapezoid.

    The overhang's printed fraction grows linearly from ``base_fraction`` at
    the bottom layer to 1 at the top, rounded to an even interval count so
    the mask stays centred.
    """
    if name == "brick":
        layers = [LayerGeometry(np.ones(n_intervals, dtype=bool)) for _ in range(n_layers)]
    elif name == "overhang":
        layers = []
        for layer in range(n_layers):
            frac = 1.0 if n_layers == 1 else base_fraction + (1 - base_fraction) * layer / (n_layers - 1)
            n_on = min(n_intervals, max(1, 2 * round(frac * n_intervals / 2)))
            start = (n_intervals - n_on) // 2
            xi = np.zeros(n_intervals, dtype=bool)
            xi[start:start + n_on] = True
            layers.append(LayerGeometry(xi))
    else:
        raise ValueError(f"unknown geometry {name!r}; expected one of {GEOMETRIES}")
    return PartGeometry(name, layers)


@dataclass
class LayerResult:
    layer: int
    theta: float
    applied_profile: np.ndarray
    melt_trajectory: np.ndarray  # (N, 2)
    xi: np.ndarray
    mean_depth: float
    mean_length: float
    mean_power: float
    end_surface_mean: float
    ocp_objective: float = float("nan")
    solve_time: float = float("nan")
    kkt_residual: float = float("nan")
    theta_clamped: bool = False
    plant_time: float = 0.0
    residual_liquid_cells: int = 0
    log: list = field(default_factory=list)


@dataclass
class ControllerSettings:
    target_depth: float = 30e-6
    q_depth: float = 1.0
    r_smooth: float = 0.05
    kkt_tol: float = 1e-9


Policy = Callable[[int, float, LayerGeometry], dict]


def _run(part: PartGeometry, config: PlantConfig, policy: Policy,
         allow_off: bool = False) -> list[LayerResult]:
    if part.n_layers > config.process.n_layers:
        config = config.with_process(n_layers=part.n_layers)
    grid = ThermalGrid(config)
    proc = config.process
    results = []
    for index, layer in enumerate(part.layers):
        if layer.xi.size != proc.n_intervals:
            raise ControlError(f"layer {index} mask has {layer.xi.size} intervals, "
                               f"plant uses {proc.n_intervals}")
        footprint = layer.footprint(grid)
        theta = grid.measure_surface(footprint).mean_temp
        grid.deposit_layer(footprint)
        decision = policy(index, theta, layer)
        u = decision["profile"]
        _check_constraints(u, layer.xi, proc.u_min, proc.u_max, index, allow_off)
        t0 = time.perf_counter()
        scan = grid.scan_layer(u, layer.xi)
        end_surface = grid.measure_surface(footprint).mean_temp
        grid.cool()
        plant_time = time.perf_counter() - t0
        residual = grid.liquid_cell_count()
        if residual:
            log.warning("layer %d: %d cells still molten after cooling", index, residual)
        on = layer.xi
        results.append(LayerResult(
            layer=index, theta=theta, applied_profile=u, melt_trajectory=scan.samples,
            xi=on.copy(), mean_depth=float(scan.samples[on, 0].mean()),
            mean_length=float(scan.samples[on, 1].mean()), mean_power=float(u[on].mean()),
            end_surface_mean=end_surface, plant_time=plant_time,
            residual_liquid_cells=residual, log=scan.log,
            **{k: v for k, v in decision.items() if k != "profile"}))
    return results


def _check_constraints(u, xi, u_min, u_max, layer, allow_off=False):
    if np.any(u[~xi] != 0.0):
        raise ControlError(f"layer {layer}: power commanded outside the geometry")
    on = u[xi]
    if allow_off:
        on = on[on != 0.0]  # laser switched off entirely (open-loop baseline)
    if np.any((on < u_min) | (on > u_max)):
        raise ControlError(f"layer {layer}: power outside [{u_min}, {u_max}] W")


def plan_layer(model: LpvModel, theta: float, xi, settings: ControllerSettings,
               u_min: float, u_max: float) -> dict:
    """Solve the layer OCP at scheduling temperature ``theta``."""
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ThetaClampWarning)
        A, B, c = model.evaluate(theta)
    clamped = any(issubclass(w.category, ThetaClampWarning) for w in caught)
    spec = OcpSpec(target_depth=settings.target_depth, A=A, B=B, c=c, xi=xi,
                   u_min=u_min, u_max=u_max, q_depth=settings.q_depth,
                   r_smooth=settings.r_smooth)
    sol = solve_box_qp(condense(spec), settings.kkt_tol)
    elapsed = time.perf_counter() - t0
    u = np.where(spec.xi, np.clip(sol.u, u_min, u_max), 0.0)
    return {"profile": u, "ocp_objective": ocp_cost(spec, u), "solve_time": elapsed,
            "kkt_residual": sol.kkt_residual, "theta_clamped": clamped}


def run_closed_loop(part: PartGeometry, model: LpvModel, config: PlantConfig,
                    settings: ControllerSettings | None = None) -> list[LayerResult]:
    """Layer-to-layer feedback: one OCP per layer, scheduled on the measured theta."""
    settings = settings or ControllerSettings()
    proc = config.process
    if not 0 < settings.target_depth:
        raise ValueError("target depth must be positive")

    def policy(index, theta, layer):
        try:
            decision = plan_layer(model, theta, layer.xi, settings, proc.u_min, proc.u_max)
        except QpError as exc:
            raise ControlError(f"layer {index}: OCP solve failed: {exc}") from exc
        if decision["theta_clamped"]:
            log.warning("layer %d: theta %.1f K outside model domain, clamped", index, theta)
        if decision["kkt_residual"] > settings.kkt_tol:
            raise ControlError(f"layer {index}: KKT residual {decision['kkt_residual']:.2e}")
        return decision

    return _run(part, config, policy)


def run_open_loop(part: PartGeometry, constant_power: float,
                  config: PlantConfig) -> list[LayerResult]:
    """Apply one constant power on every printed interval of every layer."""
    proc = config.process
    if constant_power != 0 and not proc.u_min <= constant_power <= proc.u_max:
        raise ValueError(f"constant power must be 0 or within [{proc.u_min}, {proc.u_max}] W")

    def policy(index, theta, layer):
        return {"profile": np.where(layer.xi, float(constant_power), 0.0)}

    return _run(part, config, policy, allow_off=constant_power == 0)


def commanded_power(model: LpvModel, thetas: Sequence[float], xi,
                    settings: ControllerSettings | None = None,
                    u_min: float = 100.0, u_max: float = 150.0) -> np.ndarray:
    """Mean planned power over the printed intervals for each theta."""
    settings = settings or ControllerSettings()
    xi = np.asarray(xi, dtype=bool)
    return np.array([plan_layer(model, t, xi, settings, u_min, u_max)["profile"][xi].mean()
                     for t in thetas])


# ----------------------------------------------------------------------
# comparison and files


@dataclass
class ComparisonRow:
    layer: int
    closed_depth: float
    open_depth: float
    closed_length: float
    open_length: float
    closed_theta: float
    open_theta: float
    closed_power: float
    open_power: float


@dataclass
class ComparisonReport:
    target_depth: float
    rows: list

    @property
    def closed_final_error(self) -> float:
        return abs(self.rows[-1].closed_depth - self.target_depth)

    @property
    def open_final_error(self) -> float:
        return abs(self.rows[-1].open_depth - self.target_depth)

    @property
    def closed_worst_error(self) -> float:
        return max(abs(r.closed_depth - self.target_depth) for r in self.rows)

    @property
    def open_worst_error(self) -> float:
        return max(abs(r.open_depth - self.target_depth) for r in self.rows)

    def format(self) -> str:
        lines = ["layer  depth_cl[um]  depth_ol[um]  len_cl[um]  len_ol[um]  "
                 "theta_cl[K]  theta_ol[K]  P_cl[W]  P_ol[W]"]
        for r in self.rows:
            lines.append(f"{r.layer:5d}  {r.closed_depth * 1e6:12.2f}  {r.open_depth * 1e6:12.2f}  "
                         f"{r.closed_length * 1e6:10.1f}  {r.open_length * 1e6:10.1f}  "
                         f"{r.closed_theta:11.1f}  {r.open_theta:11.1f}  "
                         f"{r.closed_power:7.2f}  {r.open_power:7.2f}")
        lines.append(f"final |depth - target|: closed {self.closed_final_error * 1e6:.2f} um, "
                     f"open {self.open_final_error * 1e6:.2f} um")
        return "\n".join(lines)


def compare_runs(closed: Sequence[LayerResult], open_: Sequence[LayerResult],
                 target_depth: float = 30e-6) -> ComparisonReport:
    if len(closed) != len(open_):
        raise ValueError(f"runs differ in layer count ({len(closed)} vs {len(open_)})")
    rows = [ComparisonRow(c.layer, c.mean_depth, o.mean_depth, c.mean_length, o.mean_length,
                          c.theta, o.theta, c.mean_power, o.mean_power)
            for c, o in zip(closed, open_)]
    return ComparisonReport(target_depth, rows)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_results(results: Sequence[LayerResult], path, timing: bool = True) -> None:
    """Per-layer CSV. ``timing=False`` writes nan for the wall-clock column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in results:
            w.writerow([r.layer, _fmt(r.theta), _fmt(r.mean_power), _fmt(r.mean_depth),
                        _fmt(r.mean_length), _fmt(r.end_surface_mean), _fmt(r.ocp_objective),
                        _fmt(r.solve_time if timing else float("nan"))])


def write_run_log(results: Sequence[LayerResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_LOG_HEADER)
        for r in results:
            for row in r.log:
                w.writerow([row["layer"], row["step"]] +
                           [_fmt(row[k]) for k in RUN_LOG_HEADER[2:]])
