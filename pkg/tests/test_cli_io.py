import numpy as np
import pytest

from cli_io import (
    TRAJECTORY_COLUMNS,
    load_config,
    parse_config,
    read_trajectory,
    run_cli,
    write_mesh_vtk,
    write_snapshot,
    write_trajectory,
)
from errors import ConfigError, OutputError
from fixed_point import TrajectoryRecord

MINIMAL = """
# falling disk
[geometry]
r_body = 0.5
r_outer = 2.0
n_radial = 4
n_angular = 16

[time]
t_end = 0.02
dt = 0.01
"""


def _record(t, **fields):
    base = dict(
        t=t, x_c=(0.0, -0.1 * t), theta=0.01 * t, eta=(0.0, -t / 3.0), omega=0.0, gap=1.5 - t, energy=0.5 * t,
        dissipation=0.25, picard_iters=3, picard_residual=1e-9, detJ_min=1.0 - 1e-7, detJ_max=1.0 + 2e-7,
    )
    base.update(fields)
    return TrajectoryRecord(**base)


def _config_file(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


def test_minimal_config_applies_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.geometry.n_angular == 16
    assert cfg.geometry.grading == 0.8
    assert cfg.time.dt == 0.01
    assert cfg.physics.mu == 1.0
    assert cfg.transform.delta0 is None
    assert cfg.delta0 == pytest.approx(0.05)


def test_config_values_are_typed():
    cfg = parse_config(MINIMAL + "\n[transform]\ndelta0 = 0.1\n\n[output]\ndirectory = results\nsnapshot_stride = 5\n")
    assert cfg.transform.delta0 == 0.1
    assert cfg.output.directory == "results"
    assert cfg.output.snapshot_stride == 5 and isinstance(cfg.output.snapshot_stride, int)


def test_range_violation_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + "\n[physics]\nmu = -1\n")
    assert any(error.startswith("physics.mu") for error in info.value.errors)


def test_range_violations_are_all_reported():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + "\n[physics]\nmu = -1\nbeta = -1\nrho_body = -3\n")
    errors = info.value.errors
    assert len(errors) == 3
    assert [error.split(":")[0] for error in errors] == ["physics.mu", "physics.beta", "physics.rho_body"]


def test_range_violations_across_sections_are_all_reported():
    text = MINIMAL.replace("dt = 0.01", "dt = -0.01") + "\n[physics]\nmu = 0\n[output]\nsnapshot_stride = -2\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert [error.split(":")[0] for error in info.value.errors] == [
        "physics.mu", "time.dt", "output.snapshot_stride"
    ]


def test_duplicate_key_reports_first_line():
    text = "[geometry]\nr_body = 0.5\nr_body = 0.6\nr_outer = 2\n[time]\nt_end = 1\ndt = 0.1\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.errors == ["line 3: duplicate key 'geometry.r_body' (first set on line 2)"]


def test_unknown_key_and_section_are_reported_together():
    text = MINIMAL + "\n[physics]\nviscosity = 2\n[solver]\ntol = 1\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    errors = info.value.errors
    assert any("unknown key 'physics.viscosity'" in error for error in errors)
    assert any("unknown section header '[solver]'" in error for error in errors)


def test_missing_required_keys_are_listed():
    with pytest.raises(ConfigError) as info:
        parse_config("[geometry]\nr_body = 0.5\n")
    (message,) = info.value.errors
    assert message.startswith("missing required keys: geometry.r_outer, time.t_end, time.dt")
    assert "transform.delta0 = 0.1 * r_body" in message


def test_unreadable_value():
    with pytest.raises(ConfigError, match="cannot read 'many' as int"):
        parse_config(MINIMAL.replace("n_radial = 4", "n_radial = many"))


def test_gap_too_small_for_delta0():
    with pytest.raises(ConfigError, match="2 \\* delta0"):
        parse_config(MINIMAL + "\n[transform]\ndelta0 = 1.0\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_empty_trajectory_has_only_header(tmp_path):
    path = write_trajectory([], tmp_path / "trajectory.csv")
    assert path.read_bytes() == (",".join(TRAJECTORY_COLUMNS) + "\n").encode()


def test_trajectory_row_format(tmp_path):
    path = write_trajectory([_record(0.0)], tmp_path / "out" / "trajectory.csv")
    header, row = path.read_text().splitlines()
    assert header.split(",") == list(TRAJECTORY_COLUMNS)
    cells = row.split(",")
    assert len(cells) == 14
    assert cells[0] == "0.0000000000000000e+00"
    assert cells[10] == "3"
    assert b"\r" not in path.read_bytes()


def test_trajectory_reads_back_exactly(tmp_path):
    records = [_record(0.1 * k) for k in range(4)]
    back = read_trajectory(write_trajectory(records, tmp_path / "trajectory.csv"))
    assert back == records


def test_unwritable_trajectory_raises_output_error(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(OutputError) as info:
        write_trajectory([_record(0.0)], blocker / "trajectory.csv")
    assert isinstance(info.value, OSError)


def test_snapshot_layout(tmp_path, small_mesh):
    n = small_mesh.n_nodes
    path = write_snapshot(small_mesh, np.zeros((n, 2)), np.arange(n, dtype=float), np.ones(n), 7, tmp_path)
    assert path.name == "snap_000007.vtk"
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2:5] == ["ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    assert f"CELLS {small_mesh.n_triangles} {4 * small_mesh.n_triangles}" in lines
    assert f"POINT_DATA {n}" in lines
    assert "VECTORS velocity double" in lines
    assert "SCALARS pressure double 1" in lines and "SCALARS detJ double 1" in lines
    expected = 5 + n + 1 + small_mesh.n_triangles + 1 + small_mesh.n_triangles + 2 + n + 2 * (2 + n)
    assert len(lines) == expected


def test_mesh_dump_tags_boundaries(tmp_path, small_mesh):
    lines = write_mesh_vtk(small_mesh, tmp_path / "mesh.vtk").read_text().splitlines()
    start = lines.index("SCALARS boundary int 1") + 2
    tags = np.array([int(v) for v in lines[start:]])
    assert len(tags) == small_mesh.n_nodes
    assert np.count_nonzero(tags) == len(small_mesh.body_nodes) + len(small_mesh.wall_nodes)


def test_cli_validate_config(tmp_path, capsys):
    assert run_cli(["validate-config", "--config", str(_config_file(tmp_path, MINIMAL))]) == 0
    assert "valid" in capsys.readouterr().out


def test_cli_rejects_invalid_config(tmp_path, capsys):
    path = _config_file(tmp_path, MINIMAL + "\n[physics]\nmu = -1\n")
    assert run_cli(["validate-config", "--config", str(path)]) == 1
    assert "physics.mu" in capsys.readouterr().err


def test_cli_check_operators(capsys):
    argv = ["-q", "check-operators", "--samples", "5", "--n-radial", "4", "--n-angular", "16"]
    assert run_cli(argv) == 0
    assert "symmetry" in capsys.readouterr().out


def test_cli_simulate_writes_trajectory(tmp_path, capsys):
    config = _config_file(tmp_path, MINIMAL + "\n[output]\nsnapshot_stride = 1\n")
    out = tmp_path / "results"
    assert run_cli(["-q", "simulate", "--config", str(config), "--out", str(out)]) == 0
    assert len((out / "trajectory.csv").read_text().splitlines()) == 4
    assert sorted(p.name for p in out.glob("snap_*.vtk")) == ["snap_000000.vtk", "snap_000001.vtk", "snap_000002.vtk"]
    assert "stop reason: t_end" in capsys.readouterr().out


def test_cli_simulate_reports_degeneracy_stop(tmp_path, capsys):
    text = MINIMAL + "\n[transform]\ntol_vol = 1e-15\n\n[initial]\neta_y = -3\n"
    out = tmp_path / "results"
    assert run_cli(["-q", "simulate", "--config", str(_config_file(tmp_path, text)), "--out", str(out)]) == 2
    captured = capsys.readouterr()
    assert "stop reason: transform-degeneracy: volume preservation lost" in captured.err
    assert "(step 1)" in captured.err
    assert len((out / "trajectory.csv").read_text().splitlines()) == 2
