"""Excitation, dataset collection and temperature-scheduled LPV fitting.

The model maps one melt-pool sample to the next within a layer::

    x[i+1] = A(theta) @ x[i] + B(theta) * u[i] + c(theta)

with ``x = (depth, length)`` in metres and ``u`` in watts. States are indexed
so that ``x[0] = 0`` precedes the scan and ``x[i+1]`` is the sample taken at
the end of control interval ``i``; the power applied during that interval is
``u[i]``.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import repeat
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import PlantConfig
from .plant import PlantError, ThermalGrid

log = logging.getLogger(__name__)

DATASET_HEADER = ["print", "layer", "theta_k", "i", "u_w", "depth_m", "length_m"]
MODEL_SCHEMA = "l2lpbf.lpv_model/1"


class FitError(RuntimeError):
    pass


class ThetaClampWarning(UserWarning):
    """Scheduling temperature fell outside the identified domain."""


@dataclass(frozen=True)
class ExcitationSpec:
    n_prints: int = 20
    n_layers: int = 10
    segments_per_layer: int = 3
    power_low: float = 100.0
    power_high: float = 150.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_prints < 1 or self.n_layers < 1 or self.segments_per_layer < 1:
            raise ValueError("excitation counts must be >= 1")
        if self.power_high < self.power_low:
            raise ValueError("power_high must be >= power_low")


@dataclass
class LayerRecord:
    print_id: int
    layer_id: int
    theta: float
    inputs: np.ndarray  # (N,) W
    states: np.ndarray  # (N, 2) m, sample after each interval

    def regression_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Within-layer transitions between consecutive samples.

        Returns ``(X, Y)`` with rows ``[depth, length, u, 1]`` and targets of
        the next sample; the transition out of the zero pre-scan state is
        not used.
        """
        prev = self.states[:-1]
        u = self.inputs[1:, None]
        X = np.hstack([prev, u, np.ones_like(u)])
        return X, self.states[1:]


def segment_lengths(n: int, segments: int) -> list[int]:
    """Split ``n`` intervals into near-equal segments, longer ones first."""
    base, extra = divmod(n, segments)
    return [base + 1 if j < extra else base for j in range(segments)]


def generate_excitation(spec: ExcitationSpec, layer: int, print_id: int = 0,
                        n_intervals: int = 40) -> np.ndarray:
    """Piecewise-constant random power profile for one identification layer.

    Levels are uniform on ``[power_low, power_high]`` and depend only on
    ``(rng_seed, print_id, layer)``.
    """
    rng = np.random.default_rng([spec.rng_seed, print_id, layer])
    levels = rng.uniform(spec.power_low, spec.power_high, spec.segments_per_layer)
    return np.repeat(levels, segment_lengths(n_intervals, spec.segments_per_layer))


def simulate_print(spec: ExcitationSpec, config: PlantConfig, print_id: int) -> list[LayerRecord]:
    """Run one fresh full-width print with random excitation."""
    config = config.with_process(n_layers=max(spec.n_layers, config.process.n_layers))
    grid = ThermalGrid(config)
    n = config.process.n_intervals
    records = []
    for layer in range(spec.n_layers):
        theta = grid.measure_surface().mean_temp
        grid.deposit_layer()
        profile = generate_excitation(spec, layer, print_id, n)
        scan = grid.scan_layer(profile)
        grid.cool()
        records.append(LayerRecord(print_id, layer, theta, profile, scan.samples))
    return records


def _try_print(spec: ExcitationSpec, config: PlantConfig, print_id: int):
    try:
        return simulate_print(spec, config, print_id)
    except PlantError as exc:
        log.warning("print %d aborted, data discarded: %s", print_id, exc)
        return None


def collect_dataset(spec: ExcitationSpec, config: PlantConfig, prints: Iterable[int] | None = None,
                    progress=None, jobs: int = 1) -> list[LayerRecord]:
    """Simulate ``n_prints`` independent prints; failed prints are dropped whole.

    With ``jobs > 1`` prints run in worker processes. Records come back in
    print order either way, so the dataset does not depend on ``jobs``.
    """
    ids = list(range(spec.n_prints) if prints is None else prints)
    if jobs > 1 and len(ids) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_try_print, repeat(spec), repeat(config), ids))
    else:
        batches = (_try_print(spec, config, p) for p in ids)
    records = []
    for p, recs in zip(ids, batches):
        if recs is None:
            continue
        records.extend(recs)
        if progress is not None:
            progress(p, recs)
    return records


# ----------------------------------------------------------------------
# model


@dataclass
class LpvModel:
    """Knot grid of affine models, linearly interpolated in theta."""

    thetas: np.ndarray  # (K,)
    A: np.ndarray       # (K, 2, 2)
    B: np.ndarray       # (K, 2)
    c: np.ndarray       # (K, 2)
    counts: np.ndarray | None = None  # records per knot

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, 2, 2)
        self.B = np.asarray(self.B, dtype=float).reshape(-1, 2)
        self.c = np.asarray(self.c, dtype=float).reshape(-1, 2)
        if self.thetas.size == 0:
            raise ValueError("model needs at least one knot")
        if np.any(np.diff(self.thetas) <= 0):
            raise ValueError("knot temperatures must be strictly increasing")
        for arr in (self.A, self.B, self.c):
            if not np.isfinite(arr).all():
                raise ValueError("model matrices must be finite")

    @property
    def theta_min(self) -> float:
        return float(self.thetas[0])

    @property
    def theta_max(self) -> float:
        return float(self.thetas[-1])

    def in_domain(self, theta: float) -> bool:
        return self.theta_min <= theta <= self.theta_max

    def evaluate(self, theta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolated ``(A, B, c)``; out-of-domain theta clamps with a warning."""
        if not self.in_domain(theta):
            warnings.warn(f"theta {theta:.1f} K outside [{self.theta_min:.1f}, "
                          f"{self.theta_max:.1f}] K; clamped", ThetaClampWarning, stacklevel=2)
        t = min(max(theta, self.theta_min), self.theta_max)
        j = int(np.searchsorted(self.thetas, t, side="right")) - 1
        if j >= len(self.thetas) - 1:
            return self.A[-1].copy(), self.B[-1].copy(), self.c[-1].copy()
        w = (t - self.thetas[j]) / (self.thetas[j + 1] - self.thetas[j])
        if w == 0.0:
            return self.A[j].copy(), self.B[j].copy(), self.c[j].copy()
        lerp = lambda m: (1.0 - w) * m[j] + w * m[j + 1]  # noqa: E731
        return lerp(self.A), lerp(self.B), lerp(self.c)

    def to_dict(self) -> dict:
        knots = []
        for k, theta in enumerate(self.thetas):
            knot = {"theta_k": float(theta),
                    "A": [float(v) for v in self.A[k].ravel()],
                    "B": [float(v) for v in self.B[k]],
                    "c": [float(v) for v in self.c[k]]}
            if self.counts is not None:
                knot["n_records"] = int(self.counts[k])
            knots.append(knot)
        return {"schema": MODEL_SCHEMA, "state": ["depth_m", "length_m"], "input": "power_w",
                "matrix_layout": "row-major", "theta_min": self.theta_min,
                "theta_max": self.theta_max, "knots": knots}

    @classmethod
    def from_dict(cls, data: dict) -> "LpvModel":
        if data.get("schema") != MODEL_SCHEMA:
            raise ValueError(f"unsupported model schema {data.get('schema')!r}")
        knots = data["knots"]
        counts = [k["n_records"] for k in knots] if all("n_records" in k for k in knots) else None
        return cls(thetas=[k["theta_k"] for k in knots], A=[k["A"] for k in knots],
                   B=[k["B"] for k in knots], c=[k["c"] for k in knots],
                   counts=None if counts is None else np.array(counts))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LpvModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _solve_block(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, int]:
    """Column-scaled least squares; returns the (4, 2) parameter block and rank."""
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    W, _, rank, _ = np.linalg.lstsq(X / scale, Y, rcond=None)
    return W / scale[:, None], int(rank)


def fit_lpv(records: Sequence[LayerRecord], bin_width: float = 50.0,
            min_records: int = 3) -> LpvModel:
    """Least-squares fit of ``[A B c]`` per theta bin.

    Records are grouped into bins of ``bin_width`` kelvin starting at the
    coolest record. A bin whose stacked regression is rank deficient, or that
    holds fewer than ``min_records`` records, is merged into its neighbour.
    Each knot sits at the mean theta of its records.
    """
    if len(records) < 2:
        raise FitError("need at least two layer records to fit")
    thetas = np.array([r.theta for r in records])
    index = np.floor((thetas - thetas.min()) / bin_width).astype(int)
    groups = [[r for r, b in zip(records, index) if b == key] for key in np.unique(index)]

    fitted = []
    j = 0
    while j < len(groups):
        group = groups[j]
        X, Y = _stack(group)
        W, rank = _solve_block(X, Y)
        if rank < 4 or len(group) < min_records:
            if len(groups) == 1:
                if rank == 4:
                    fitted.append((float(np.mean([r.theta for r in group])), W, len(group)))
                    break
                raise FitError(f"bin around {np.mean([r.theta for r in group]):.1f} K "
                               "is rank deficient and has no neighbour to merge")
            target = j + 1 if j + 1 < len(groups) else j - 1
            log.info("merging rank-deficient bin %d into bin %d", j, target)
            groups[target] = groups[target] + group if target > j else group + groups[target]
            groups.pop(j)
            if target < j:
                fitted.pop()  # refit the merged previous bin
                j -= 1
            continue
        fitted.append((float(np.mean([r.theta for r in group])), W, len(group)))
        j += 1

    fitted.sort(key=lambda t: t[0])
    return LpvModel(
        thetas=[t for t, _, _ in fitted],
        A=[W[:2].T for _, W, _ in fitted],
        B=[W[2] for _, W, _ in fitted],
        c=[W[3] for _, W, _ in fitted],
        counts=np.array([n for _, _, n in fitted]),
    )


def _stack(group: Sequence[LayerRecord]) -> tuple[np.ndarray, np.ndarray]:
    rows = [r.regression_rows() for r in group]
    return np.vstack([x for x, _ in rows]), np.vstack([y for _, y in rows])


def predict_trajectory(model: LpvModel, theta: float, inputs) -> np.ndarray:
    """Roll the frozen model out from zero; returns the N post-interval states."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ThetaClampWarning)
        A, B, c = model.evaluate(theta)
    return rollout(A, B, c, inputs)


def rollout(A, B, c, inputs) -> np.ndarray:
    x = np.zeros(2)
    out = np.empty((len(inputs), 2))
    for i, u in enumerate(inputs):
        x = A @ x + B * u + c
        out[i] = x
    return out


def rmse(predicted, measured) -> tuple[float, float]:
    """Per-channel RMS error over all samples; inputs are (n, 2) or lists of them."""
    p = _as_samples(predicted)
    m = _as_samples(measured)
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {m.shape}")
    if p.shape[0] == 0:
        raise ValueError("rmse of empty input")
    err = np.sqrt(np.mean((p - m) ** 2, axis=0))
    return float(err[0]), float(err[1])


def _as_samples(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.reshape(-1, 2)
    parts = [np.asarray(v, dtype=float).reshape(-1, 2) for v in x]
    return np.vstack(parts) if parts else np.empty((0, 2))


def dataset_rmse(model: LpvModel, records: Sequence[LayerRecord]) -> tuple[float, float]:
    """Open-loop prediction error of the model over whole layers."""
    pred = [predict_trajectory(model, r.theta, r.inputs) for r in records]
    return rmse(pred, [r.states for r in records])


# ----------------------------------------------------------------------
# dataset files


def write_dataset(records: Sequence[LayerRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for r in records:
            for i, (u, (d, l)) in enumerate(zip(r.inputs, r.states)):
                w.writerow([r.print_id, r.layer_id, repr(float(r.theta)), i,
                            repr(float(u)), repr(float(d)), repr(float(l))])


def read_dataset(path) -> list[LayerRecord]:
    """Parse a dataset CSV; raises ``ValueError`` naming the offending line."""
    rows: dict[tuple[int, int], list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DATASET_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                p, layer, theta, i, u, d, l = row
                key = (int(p), int(layer))
                rows.setdefault(key, []).append((int(i), float(theta), float(u), float(d), float(l)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
    records = []
    for (p, layer), items in rows.items():
        items.sort()
        if [it[0] for it in items] != list(range(len(items))):
            raise ValueError(f"{path}: print {p} layer {layer} has gaps in interval index")
        records.append(LayerRecord(p, layer, items[0][1],
                                   np.array([it[2] for it in items]),
                                   np.array([[it[3], it[4]] for it in items])))
    return records
