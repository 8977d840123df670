import numpy as np
import pytest

from l2lpbf.config import PlantConfig, ProcessParams, default_material
from l2lpbf.sysid import LpvModel


def small_process(**kw) -> ProcessParams:
    """A short track on a thin substrate; a layer scan takes milliseconds."""
    base = dict(track_length=0.42e-3, substrate_height=63e-6, n_layers=3, n_intervals=6,
                scan_speed=1.5)
    base.update(kw)
    return ProcessParams(**base)


@pytest.fixture
def small_config():
    return PlantConfig(default_material(), small_process())


@pytest.fixture
def closed_config():
    # no base-plate sink and no surface losses: total enthalpy changes only by laser input
    return PlantConfig(default_material(), small_process(bottom_sink=False, surface_losses=False))


@pytest.fixture
def nominal_config():
    return PlantConfig(default_material())


def synthetic_model(thetas=(300.0, 900.0, 1500.0)) -> LpvModel:
    """Stable two-state model whose depth gain is positive and whose drift grows with theta."""
    thetas = np.asarray(thetas, dtype=float)
    K = thetas.size
    A = np.tile(np.array([[0.6, 0.0], [3.0, 0.7]]), (K, 1, 1))
    B = np.tile(np.array([1.0e-7, 3.0e-7]), (K, 1))
    w = (thetas - thetas[0]) / max(thetas[-1] - thetas[0], 1.0)
    c = np.stack([-5e-7 + 4e-6 * w, -6e-5 + 2e-5 * w], axis=1)
    return LpvModel(thetas, A, B, c)


@pytest.fixture
def model():
    return synthetic_model()


# acceptance outcomes, filled by test_acceptance.py and printed after the run
ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
