"""Command-line pipeline: identify -> fit -> run -> report.

Exit codes: 0 success, 1 usage error, 2 bad input data or files,
3 numerical failure (plant blow-up, fitting or QP failure).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .controller import (GEOMETRIES, ControlError, ControllerSettings,
                         make_geometry, run_closed_loop, run_open_loop, write_results,
                         write_run_log)
from .plant import PlantError
from .qp import QpError
from .report import ReportError, write_report
from .sysid import (ExcitationSpec, FitError, LpvModel, collect_dataset, dataset_rmse, fit_lpv,
                    read_dataset, write_dataset)

log = logging.getLogger("l2lpbf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_SCHEMA = "l2lpbf.manifest/1"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, **fields) -> None:
    manifest = {"schema": MANIFEST_SCHEMA, "version": __version__, "command": command, **fields}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _config_fields(args, config) -> dict:
    return {"config_path": args.config, "config_digest": config.digest(), "config": config.to_dict()}


# ----------------------------------------------------------------------
# commands


def cmd_identify(args) -> int:
    config = load_config(args.config)
    spec = ExcitationSpec(n_prints=args.n_prints, n_layers=args.n_layers,
                          power_low=config.process.u_min, power_high=config.process.u_max,
                          rng_seed=args.seed)
    out = _out_dir(args.out)
    t0 = time.perf_counter()

    def progress(p, recs):
        log.info("print %d done (theta %.1f-%.1f K)", p, recs[0].theta, recs[-1].theta)

    records = collect_dataset(spec, config, progress=progress, jobs=args.jobs)
    if not records:
        raise PlantError("every print failed; no data collected")
    path = out / "dataset.csv"
    write_dataset(records, path)
    thetas = [r.theta for r in records]
    _write_manifest(out, "identify", seed=args.seed, n_prints=args.n_prints, n_layers=args.n_layers,
                    dataset="dataset.csv", dataset_sha256=_sha256(path),
                    n_records=len(records), **_config_fields(args, config))
    print(f"wrote {path}: {len(records)} records, theta range "
          f"[{min(thetas):.1f}, {max(thetas):.1f}] K ({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


def split_by_print(records, fraction: float, seed: int):
    """Seeded split of whole prints into training and validation groups."""
    ids = sorted({r.print_id for r in records})
    if not 0 < fraction <= 1:
        raise UsageError("--split must lie in (0, 1]")
    if fraction == 1.0:
        return records, [], ids, []
    n_train = int(round(fraction * len(ids)))
    if len(ids) < 2 or n_train < 1 or n_train >= len(ids):
        raise DataError(f"cannot split {len(ids)} print(s) with fraction {fraction}")
    order = np.random.default_rng(seed).permutation(len(ids))
    train_ids = sorted(ids[i] for i in order[:n_train])
    valid_ids = sorted(ids[i] for i in order[n_train:])
    train = [r for r in records if r.print_id in set(train_ids)]
    valid = [r for r in records if r.print_id in set(valid_ids)]
    return train, valid, train_ids, valid_ids


def cmd_fit(args) -> int:
    try:
        records = read_dataset(args.dataset)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {args.dataset}") from None
    train, valid, train_ids, valid_ids = split_by_print(records, args.split, args.seed)
    if not valid:
        warnings.warn("split fraction 1.0: every print used for training, no validation set")
    model = fit_lpv(train, bin_width=args.bin_width)
    out = _out_dir(args.out)
    path = out / "model.json"
    model.save(path)
    lines = [f"knots: {len(model.thetas)} over theta [{model.theta_min:.1f}, {model.theta_max:.1f}] K",
             f"train prints {train_ids}"]
    d, l = dataset_rmse(model, train)
    lines.append(f"train RMSE: depth {d * 1e6:.3f} um, length {l * 1e6:.3f} um")
    rmse = {"train": {"depth_m": d, "length_m": l}}
    if valid:
        d, l = dataset_rmse(model, valid)
        lines.append(f"validation prints {valid_ids}")
        lines.append(f"validation RMSE: depth {d * 1e6:.3f} um, length {l * 1e6:.3f} um")
        rmse["validation"] = {"depth_m": d, "length_m": l}
    text = "\n".join(lines) + "\n"
    (out / "fit_report.txt").write_text(text)
    _write_manifest(out, "fit", seed=args.seed, split=args.split, bin_width_k=args.bin_width,
                    dataset_path=args.dataset, dataset_sha256=_sha256(args.dataset),
                    model="model.json", model_sha256=_sha256(path), train_prints=train_ids,
                    validation_prints=valid_ids, rmse=rmse)
    print(text, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.mode == "closed" and not args.model:
        raise UsageError("--model is required with --mode closed")
    config = load_config(args.config)
    part = make_geometry(args.geometry, config.process.n_layers, config.process.n_intervals)
    out = _out_dir(args.out)
    settings = ControllerSettings(target_depth=args.target_depth_um * 1e-6, q_depth=args.q,
                                  r_smooth=args.r)
    fields = {"mode": args.mode, "geometry": args.geometry, "seed": args.seed,
              "target_depth_m": settings.target_depth, "u_min": config.process.u_min,
              "u_max": config.process.u_max, **_config_fields(args, config)}
    if args.mode == "closed":
        try:
            model = LpvModel.load(args.model)
        except FileNotFoundError:
            raise DataError(f"model file not found: {args.model}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{args.model}: malformed model file ({exc})") from None
        fields.update(model_path=args.model, model_sha256=_sha256(args.model),
                      weights={"q_depth": settings.q_depth, "r_smooth": settings.r_smooth})
        results = run_closed_loop(part, model, config, settings)
    else:
        fields.update(power_w=args.power_w)
        results = run_open_loop(part, args.power_w, config)
    write_results(results, out / "results.csv", timing=not args.reproducible)
    write_run_log(results, out / "run_log.csv")
    fields["clamped_layers"] = [r.layer for r in results if r.theta_clamped]
    fields["residual_liquid_cells"] = [r.residual_liquid_cells for r in results]
    _write_manifest(out, "run", **fields)
    timing = {"solve_time_s": [r.solve_time for r in results],
              "plant_time_s": [r.plant_time for r in results]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    target = settings.target_depth
    for r in results:
        print(f"layer {r.layer}: theta {r.theta:7.1f} K  power {r.mean_power:6.2f} W  "
              f"depth {r.mean_depth * 1e6:6.2f} um  length {r.mean_length * 1e6:7.1f} um")
    print(f"final |depth - target| = {abs(results[-1].mean_depth - target) * 1e6:.2f} um")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.results:
        raise UsageError("report needs at least one results CSV")
    written = write_report(args.results, args.out, args.target_depth_um)
    for p in written:
        print(f"wrote {p}")
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="l2lpbf", description="Layer-to-layer melt-pool control pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON file with optional material/process sections")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("identify", help="simulate randomized prints and write the dataset")
    common(p)
    p.add_argument("--n-prints", type=int, default=20)
    p.add_argument("--n-layers", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent prints")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("fit", help="fit the LPV model and report train/validation RMSE")
    common(p, config=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", type=float, default=0.8, help="fraction of prints used for training")
    p.add_argument("--bin-width", type=float, default=50.0, help="theta bin width [K]")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("run", help="open- or closed-loop multi-layer print")
    common(p)
    p.add_argument("--mode", choices=("open", "closed"), required=True)
    p.add_argument("--geometry", choices=GEOMETRIES, default="brick")
    p.add_argument("--model", help="model file from 'fit' (closed mode)")
    p.add_argument("--target-depth-um", type=float, default=30.0)
    p.add_argument("--power-w", type=float, default=125.0, help="constant power (open mode)")
    p.add_argument("--q", type=float, default=1.0, help="depth tracking weight [1/um^2]")
    p.add_argument("--r", type=float, default=0.05, help="power increment weight [1/W^2]")
    p.add_argument("--reproducible", action="store_true",
                   help="write nan for solve_time_s so results.csv is byte-stable; "
                        "timings still go to timing.json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="SVG figures and a text summary from results CSVs")
    p.add_argument("results", nargs="*", help="results.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--target-depth-um", type=float, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"l2lpbf {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, ReportError, ValueError) as exc:
        print(f"l2lpbf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PlantError, FitError, QpError, ControlError, FloatingPointError) as exc:
        print(f"l2lpbf {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
