"""Configuration files, result files and the ``slipdisk`` command line."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from types import SimpleNamespace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from diagnostics import operator_selfcheck, taylor_couette_study
from errors import ConfigError, OutputError, ParameterError, SlipDiskError
from fixed_point import (
    STOP_DEGENERACY,
    GeometryConfig,
    InitialConfig,
    OutputConfig,
    PhysicsConfig,
    SimulationConfig,
    TimeConfig,
    TrajectoryRecord,
    TransformConfig,
    simulate,
)
from geometry import BoundaryTag, Mesh, generate_annulus_mesh

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SECTIONS = {
    "geometry": GeometryConfig,
    "physics": PhysicsConfig,
    "initial": InitialConfig,
    "time": TimeConfig,
    "transform": TransformConfig,
    "output": OutputConfig,
}

_COERCE = {"float": float, "int": int, "str": str, "Optional[float]": float}

TRAJECTORY_COLUMNS = (
    "t", "xc_x", "xc_y", "theta", "eta_x", "eta_y", "omega", "gap", "energy",
    "dissipation", "picard_iters", "picard_residual", "detJ_min", "detJ_max",
)

MIN_ORDER = 1.8


def _schema(section: str) -> Dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(SECTIONS[section])}


def _default(f: dataclasses.Field) -> object:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def parse_config(text: str) -> SimulationConfig:
    """Parse ``[section]`` / ``key = value`` text into a validated config.

    Blank lines and lines starting with ``#`` are skipped. Every problem is
    collected before raising.

    Raises:
        ConfigError: Lists syntax errors with line numbers, unknown and
            duplicate keys, missing required keys and range violations.
    """
    errors: List[str] = []
    values: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
    seen: Dict[Tuple[str, str], int] = {}
    section: Optional[str] = None

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            name = line[1:-1].strip() if line.endswith("]") else None
            if name not in SECTIONS:
                errors.append(f"line {number}: unknown section header {line!r}")
                section = None
            else:
                section = name
            continue
        if "=" not in line:
            errors.append(f"line {number}: expected 'key = value', got {line!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if section is None:
            errors.append(f"line {number}: key {key!r} outside of a known section")
            continue
        fields = _schema(section)
        if key not in fields:
            errors.append(f"line {number}: unknown key '{section}.{key}'")
            continue
        if (section, key) in seen:
            errors.append(
                f"line {number}: duplicate key '{section}.{key}' (first set on line {seen[section, key]})"
            )
            continue
        seen[section, key] = number
        kind = str(fields[key].type)
        try:
            values[section][key] = _COERCE[kind](value)
        except ValueError:
            errors.append(f"line {number}: {section}.{key}: cannot read {value!r} as {kind}")

    missing = [
        f"{name}.{f.name}"
        for name in SECTIONS
        for f in dataclasses.fields(SECTIONS[name])
        if _default(f) is dataclasses.MISSING and f.name not in values[name]
    ]
    if missing:
        applied = [
            f"{name}.{f.name} = {'0.1 * r_body' if f.name == 'delta0' else _default(f)}"
            for name in SECTIONS
            for f in dataclasses.fields(SECTIONS[name])
            if _default(f) is not dataclasses.MISSING and f.name not in values[name]
        ]
        errors.append(
            "missing required keys: " + ", ".join(missing)
            + ("; defaults applied: " + ", ".join(applied) if applied else "")
        )

    built: Dict[str, object] = {}
    for name, cls in SECTIONS.items():
        if any(m.startswith(f"{name}.") for m in missing):
            continue
        merged = {f.name: _default(f) for f in dataclasses.fields(cls)}
        merged.update(values[name])
        problems = [f"{name}.{problem}" for problem in cls.range_problems(SimpleNamespace(**merged))]
        if problems:
            errors.extend(problems)
            continue
        built[name] = cls(**values[name])

    if not errors:
        try:
            return SimulationConfig(**built)
        except ParameterError as exc:
            errors.append(f"transform.{exc}")
    raise ConfigError(errors)


def load_config(path: PathLike) -> SimulationConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
    return parse_config(text)


def _row(record: TrajectoryRecord) -> List[str]:
    values = (
        record.t, *record.x_c, record.theta, *record.eta, record.omega, record.gap,
        record.energy, record.dissipation,
    )
    row = [f"{float(v):.16e}" for v in values]
    row.append(str(int(record.picard_iters)))
    row += [f"{float(v):.16e}" for v in (record.picard_residual, record.detJ_min, record.detJ_max)]
    return row


def write_trajectory(records: Sequence[TrajectoryRecord], path: PathLike) -> Path:
    """CSV with 17 significant digits and LF line endings.

    Raises:
        OutputError: If the file cannot be written.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TRAJECTORY_COLUMNS)
            for record in records:
                writer.writerow(_row(record))
    except OSError as exc:
        raise OutputError(path, exc) from exc
    logger.info("wrote %d trajectory rows to %s", len(records), path)
    return path


def read_trajectory(path: PathLike) -> List[TrajectoryRecord]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as exc:
        raise OutputError(path, exc) from exc
    records = []
    for row in rows:
        v = {key: float(row[key]) for key in TRAJECTORY_COLUMNS if key != "picard_iters"}
        records.append(
            TrajectoryRecord(
                t=v["t"],
                x_c=(v["xc_x"], v["xc_y"]),
                theta=v["theta"],
                eta=(v["eta_x"], v["eta_y"]),
                omega=v["omega"],
                gap=v["gap"],
                energy=v["energy"],
                dissipation=v["dissipation"],
                picard_iters=int(row["picard_iters"]),
                picard_residual=v["picard_residual"],
                detJ_min=v["detJ_min"],
                detJ_max=v["detJ_max"],
            )
        )
    return records


def _grid_lines(mesh: Mesh, title: str) -> List[str]:
    n, t = mesh.n_nodes, mesh.n_triangles
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    lines += [f"{x:.16e} {y:.16e} 0" for x, y in mesh.nodes]
    lines.append(f"CELLS {t} {4 * t}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {t}")
    lines += ["5"] * t
    return lines


def _scalars(name: str, values: np.ndarray, kind: str = "double") -> List[str]:
    fmt = "{:d}" if kind == "int" else "{:.16e}"
    return [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"] + [fmt.format(v) for v in values]


def _write_lines(path: Path, lines: List[str]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="\n", encoding="ascii") as handle:
            handle.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OutputError(path, exc) from exc
    return path


def write_snapshot(
    mesh: Mesh,
    velocity: np.ndarray,
    pressure: np.ndarray,
    det_J: np.ndarray,
    step: int,
    directory: PathLike = ".",
) -> Path:
    """Legacy ASCII VTK file ``snap_{step:06d}.vtk`` with velocity, pressure and detJ point data.

    Raises:
        OutputError: If the file cannot be written.
    """
    lines = _grid_lines(mesh, f"slip-disk snapshot step {step}")
    lines += [f"POINT_DATA {mesh.n_nodes}", "VECTORS velocity double"]
    lines += [f"{u:.16e} {v:.16e} 0" for u, v in np.asarray(velocity, dtype=float)]
    lines += _scalars("pressure", np.asarray(pressure, dtype=float))
    lines += _scalars("detJ", np.asarray(det_J, dtype=float))
    return _write_lines(Path(directory) / f"snap_{step:06d}.vtk", lines)


def write_mesh_vtk(mesh: Mesh, path: PathLike) -> Path:
    """Mesh only, with a ``boundary`` point tag (0 interior)."""
    tags = np.zeros(mesh.n_nodes, dtype=int)
    tags[mesh.wall_nodes] = int(BoundaryTag.OUTER_WALL)
    tags[mesh.body_nodes] = int(BoundaryTag.BODY_INTERFACE)
    lines = _grid_lines(mesh, "slip-disk mesh")
    lines += [f"POINT_DATA {mesh.n_nodes}"] + _scalars("boundary", tags, "int")
    return _write_lines(Path(path), lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slipdisk", description="Rigid disk in a viscous fluid with Navier slip"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("simulate", help="run a simulation from a config file")
    run.add_argument("--config", required=True, help="config file path")
    run.add_argument("--out", help="output directory (overrides [output] directory)")
    run.add_argument("--log-every", type=int, default=0, help="log a summary every N steps")

    check = commands.add_parser("check-operators", help="operator symmetry/positivity battery")
    check.add_argument("--seed", type=int, default=1)
    check.add_argument("--samples", type=int, default=100)
    check.add_argument("--mu", type=float, default=1.0)
    check.add_argument("--beta", type=float, default=1.0)
    check.add_argument("--n-radial", type=int, default=32)
    check.add_argument("--n-angular", type=int, default=64)

    study = commands.add_parser("manufactured", help="Taylor-Couette convergence study")
    study.add_argument("--levels", type=int, default=3)
    study.add_argument("--mu", type=float, default=1.0)
    study.add_argument("--beta", type=float, default=1.0)

    validate = commands.add_parser("validate-config", help="check a config file")
    validate.add_argument("--config", required=True, help="config file path")
    return parser


def _simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    directory = Path(args.out or cfg.output.directory)
    result = simulate(cfg, log_every=args.log_every)
    path = write_trajectory(result.records, directory / cfg.output.trajectory)
    for snap in result.snapshots:
        write_snapshot(snap.mesh, snap.velocity, snap.pressure, snap.det_J, snap.step, directory)
    final = result.records[-1]
    summary = f"{len(result.records) - 1} steps, t = {final.t:.6g}, x_c = ({final.x_c[0]:.6g}, {final.x_c[1]:.6g})"
    if result.stop_reason == STOP_DEGENERACY:
        print(f"❌ {summary}", file=sys.stderr)
        print(f"stop reason: {result.stop_reason}: {result.stop_detail}", file=sys.stderr)
        print(f"trajectory: {path}", file=sys.stderr)
        return 2
    print(f"✅ {summary}")
    print(f"stop reason: {result.stop_reason}")
    print(f"trajectory: {path}")
    return 0


def _check_operators(args: argparse.Namespace) -> int:
    mesh = generate_annulus_mesh(0.5, 2.0, args.n_radial, args.n_angular)
    report = operator_selfcheck(mesh, args.mu, args.beta, args.seed, args.samples)
    print(f"symmetry        {report.symmetry:.3e}")
    print(f"positivity      {report.positivity:.3e}")
    print(f"energy identity {report.energy_identity:.3e}")
    if report.ok:
        print(f"✅ all violations <= {report.tolerance:.0e}")
        return 0
    print(f"❌ violations exceed {report.tolerance:.0e}", file=sys.stderr)
    return 1


def _manufactured(args: argparse.Namespace) -> int:
    rows = taylor_couette_study(args.levels, mu=args.mu, beta=args.beta)
    print(f"{'level':>5} {'n_radial':>8} {'n_angular':>9} {'h':>12} {'L2 error':>12} {'order':>7}")
    for row in rows:
        print(
            f"{row.level:>5} {row.n_radial:>8} {row.n_angular:>9} "
            f"{row.h:>12.4e} {row.error:>12.4e} {row.order:>7.3f}"
        )
    if len(rows) < 2 or rows[-1].order >= MIN_ORDER:
        print("✅ convergence study complete")
        return 0
    print(f"❌ observed order {rows[-1].order:.3f} below {MIN_ORDER}", file=sys.stderr)
    return 1


def _validate_config(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    print(f"✅ {args.config}: valid (delta0 = {cfg.delta0:.6g}, initial gap = {cfg.geometry.gap:.6g})")
    return 0


_COMMANDS = {
    "simulate": _simulate,
    "check-operators": _check_operators,
    "manufactured": _manufactured,
    "validate-config": _validate_config,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on validation failure, 2 on runtime error."""
    args = _build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParameterError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 1
    except SlipDiskError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
