"""Material and process configuration.

Both records load from flat JSON objects whose keys are exactly the field
names below. Unknown keys are rejected so that typos surface early.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class MaterialProps:
    density: float = 7900.0
    specific_heat: float = 500.0
    conductivity_solid: float = 20.0
    conductivity_liquid: float = 28.0
    conductivity_powder: float = 0.4
    t_solidus: float = 1673.0
    t_liquidus: float = 1727.0
    latent_heat: float = 2.6e5
    absorptivity: float = 0.27
    extinction_depth: float = 20e-6
    emissivity: float = 0.4
    convection_coeff: float = 10.0
    t_ambient: float = 293.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"material.{f.name} must be positive")
        if self.t_liquidus <= self.t_solidus:
            raise ConfigError("material.t_liquidus must exceed t_solidus")
        if self.absorptivity > 1:
            raise ConfigError("material.absorptivity must lie in (0, 1]")

    @property
    def k_max(self) -> float:
        return max(self.conductivity_solid, self.conductivity_liquid,
                   self.conductivity_powder)


@dataclass(frozen=True)
class ProcessParams:
    track_length: float = 2e-3
    substrate_height: float = 1.5e-4
    # consolidated thickness of one powder layer
    layer_thickness: float = 20e-6
    beam_radius: float = 40e-6
    scan_speed: float = 1.5
    cooling_factor: float = 1.5
    n_layers: int = 10
    n_intervals: int = 40
    u_min: float = 100.0
    u_max: float = 150.0
    cell_size: float = 7e-6
    # None selects the largest stable step that divides one control interval
    time_step: Optional[float] = None
    # out-of-plane thickness of the 2D slice; None means 2 * beam_radius
    slab_thickness: Optional[float] = 65e-6
    # switches used by closed-system test configurations
    bottom_sink: bool = True
    surface_losses: bool = True

    def __post_init__(self):
        positive = ("track_length", "substrate_height", "layer_thickness",
                    "beam_radius", "scan_speed", "cell_size", "u_max")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"process.{name} must be positive")
        if self.cooling_factor < 0:
            raise ConfigError("process.cooling_factor must be non-negative")
        if self.n_layers < 1 or self.n_intervals < 1:
            raise ConfigError("process.n_layers and n_intervals must be >= 1")
        if not 0 <= self.u_min <= self.u_max:
            raise ConfigError("process requires 0 <= u_min <= u_max")
        if self.time_step is not None and self.time_step <= 0:
            raise ConfigError("process.time_step must be positive")

    @property
    def scan_time(self) -> float:
        return self.track_length / self.scan_speed

    @property
    def interval_time(self) -> float:
        return self.scan_time / self.n_intervals

    @property
    def cooling_time(self) -> float:
        return self.cooling_factor * self.scan_time

    @property
    def slab(self) -> float:
        return self.slab_thickness if self.slab_thickness is not None else 2 * self.beam_radius


@dataclass(frozen=True)
class PlantConfig:
    material: MaterialProps = MaterialProps()
    process: ProcessParams = ProcessParams()

    def to_dict(self) -> dict:
        return {"material": asdict(self.material), "process": asdict(self.process)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_process(self, **changes: Any) -> "PlantConfig":
        return replace(self, process=replace(self.process, **changes))

    def with_material(self, **changes: Any) -> "PlantConfig":
        return replace(self, material=replace(self.material, **changes))


def _build(cls, data: dict, label: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {label} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:  # e.g. a string where a number belongs
        raise ConfigError(f"{label}: {exc}") from None


def load_material(path) -> MaterialProps:
    return _build(MaterialProps, _read_json(path), "material")


def load_process(path) -> ProcessParams:
    return _build(ProcessParams, _read_json(path), "process")


def load_plant_config(material_path=None, process_path=None) -> PlantConfig:
    """Load a plant configuration; missing paths fall back to the shipped defaults."""
    material = load_material(material_path) if material_path else default_material()
    process = load_process(process_path) if process_path else ProcessParams()
    return PlantConfig(material, process)


def load_config(path=None) -> PlantConfig:
    """One JSON file with optional ``material`` and ``process`` sections.

    Keys given in a section override the shipped defaults; omitted keys keep
    them. ``None`` returns the defaults unchanged.
    """
    material, process = default_material(), ProcessParams()
    if path is None:
        return PlantConfig(material, process)
    data = _read_json(path)
    unknown = set(data) - {"material", "process"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    sections = {}
    for name, base, cls in (("material", material, MaterialProps), ("process", process, ProcessParams)):
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section {name!r} must be an object")
        sections[name] = _build(cls, {**asdict(base), **section}, name)
    return PlantConfig(sections["material"], sections["process"])


def default_material() -> MaterialProps:
    """304L literature defaults shipped as package data."""
    text = resources.files("l2lpbf").joinpath("data/material_304l.json").read_text()
    return _build(MaterialProps, json.loads(text), "material")


def _read_json(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data
