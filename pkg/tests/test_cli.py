import numpy as np
import pytest
from scipy import io as spio

from surfgrid import shapes
from surfgrid.cli import main, read_config, UsageError
from surfgrid.mesh import load_mesh, save_mesh


def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path / "out")])


def test_missing_mesh_is_usage_error(tmp_path):
    assert _run(tmp_path, "info") == 2


def test_unknown_subcommand_is_usage_error():
    assert main(["nope"]) == 2


def test_nonexistent_file_is_input_error(tmp_path):
    assert _run(tmp_path, "info", str(tmp_path / "missing.obj")) == 3


def test_missing_colors_is_input_error(tmp_path, capsys):
    assert _run(tmp_path, "fit-color", "builtin:sphere", "--depth", "2") == 3
    assert "--synthetic-texture" in capsys.readouterr().err


def test_singular_spectrum_never_crashes(tmp_path):
    assert _run(tmp_path, "spectrum", "builtin:square", "--depth", "2", "--count", "4") in (0, 4)


def test_info_reports_dimensions(tmp_path, capsys):
    assert _run(tmp_path, "info", "builtin:cube-lattice", "--depth", "2") == 0
    text = (tmp_path / "out" / "info.csv").read_text()
    assert text.startswith("# surfgrid ")
    rows = [l for l in text.splitlines() if not l.startswith("#")]
    assert rows[0].startswith("depth,fragments,aware_dim,unaware_dim")
    d0 = rows[1].split(",")
    # 216 cubes all share the 8 corners of the root voxel
    assert int(d0[2]) > int(d0[3])


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ndepth = 2\nmode=unaware\nsynthetic-texture=checkerboard3d 2\n")
    assert read_config(cfg)["depth"] == "2"
    assert _run(tmp_path, "convergence", "builtin:cube-lattice", "--config", str(cfg),
                "--depth", "1") == 0
    text = (tmp_path / "out" / "convergence.csv").read_text()
    assert "# depth=1" in text and "# mode=unaware" in text
    assert "# texture=checkerboard3d:2" in text
    rows = [l for l in text.splitlines() if not l.startswith("#")][1:]
    assert [int(r.split(",")[0]) for r in rows] == [0, 1]


def test_bad_config(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense\n")
    with pytest.raises(UsageError):
        read_config(cfg)
    cfg.write_text("unknown_key=1\n")
    assert _run(tmp_path, "info", "builtin:sphere", "--config", str(cfg)) == 2


def test_fit_color_outputs_and_determinism(tmp_path):
    args = ["fit-color", "builtin:cube-lattice", "--depth", "2", "--synthetic-texture",
            "checkerboard3d", "2", "--cycles", "2", "--seed", "7", "--dump-matrices"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("residuals.csv", "fitted.ply"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    A = spio.mmread(str(tmp_path / "a" / "system.mtx"))
    assert A.shape[0] == A.shape[1]
    fitted = load_mesh(tmp_path / "a" / "fitted.ply")
    assert fitted.colors is not None


def test_mesh_file_with_colors(tmp_path):
    m = shapes.icosphere(1)
    m = m.replace(colors=np.tile([0.2, 0.4, 0.6], (m.vertex_count, 1)))
    save_mesh(m, tmp_path / "c.ply")
    assert _run(tmp_path, "fit-color", str(tmp_path / "c.ply"), "--depth", "2",
                "--solver", "cg") == 0


def test_flow_writes_metrics_and_trajectory(tmp_path):
    assert _run(tmp_path, "flow", "builtin:sphere", "--depth", "3", "--delta", "1",
                "--total-time", "2", "--stride", "2", "--ground-truth") == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.glob("*.ply")) == ["flow_0000.ply", "flow_0002.ply"]
    rows = [l for l in (out / "flow_metrics.csv").read_text().splitlines()
            if not l.startswith("#")]
    assert rows[0] == "step,time,rms,rms_per_vertex,sphericity"
    assert len(rows) == 4
    assert (out / "flow_timing.csv").exists()


def test_flow_needs_exactly_one_step_control(tmp_path):
    assert _run(tmp_path, "flow", "builtin:sphere", "--depth", "2") == 2


def test_sweeps(tmp_path):
    assert _run(tmp_path, "sweep-rot", "builtin:sphere", "--depth", "2", "--count", "5",
                "--rotations", "2") == 0
    assert _run(tmp_path, "sweep-res", "builtin:sphere", "--depths", "1,2",
                "--count", "5") == 0
    assert (tmp_path / "out" / "sweep_res_deviation.csv").exists()


def test_pad_flag(tmp_path):
    assert _run(tmp_path, "info", "builtin:sphere", "--depth", "1", "--pad", "0.2") == 0
    assert "# pad=0.2" in (tmp_path / "out" / "info.csv").read_text()
    assert _run(tmp_path, "info", "builtin:sphere", "--depth", "1", "--pad", "0.7") == 3
