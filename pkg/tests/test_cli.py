import os

import numpy as np
import pytest

from rheoflow import cli
from rheoflow.analysis import ErrorTable
from rheoflow.mesh import unit_square_mesh


def write_config(tmp_path, text):
    path = tmp_path / "config.ini"
    path.write_text(text)
    return str(path)


def test_parse_config_minimal(tmp_path):
    path = write_config(tmp_path, "[experiment]\nname = carreau-steady\n")
    cfg = cli.parse_config(path)
    assert cfg.experiment == "carreau-steady"
    assert cfg.levels == [2, 4, 8, 16, 32]
    assert cfg.resolved_b() == pytest.approx(2 / 1.5 - 0.99)


def test_parse_config_overrides(tmp_path):
    path = write_config(tmp_path, """
[experiment]
name = penalty-study
[mesh]
levels = 2 4
[model]
r = 1.3
[penalty]
inv_l = 1.0
[output]
dir = results
""")
    cfg = cli.parse_config(path)
    assert cfg.levels == [2, 4]
    assert cfg.r == 1.3
    assert cfg.inv_l == 1.0
    assert cfg.out_dir == "results"


def test_parse_config_errors(tmp_path):
    with pytest.raises(cli.ConfigError):
        cli.parse_config(str(tmp_path / "missing.ini"))
    path = write_config(tmp_path, "[experiment]\nname = nonsense\n")
    with pytest.raises(cli.ConfigError):
        cli.parse_config(path)
    path = write_config(tmp_path,
                        "[experiment]\nname = carreau-steady\n"
                        "[mesh]\nlevels = two four\n")
    with pytest.raises(cli.ConfigError):
        cli.parse_config(path)


def test_main_exit_codes(tmp_path):
    missing = str(tmp_path / "nope.ini")
    assert cli.main(["run", missing]) == 2
    bad = write_config(tmp_path, "[experiment]\nname = bogus\n")
    assert cli.main(["run", bad]) == 2


def test_csv_roundtrip(tmp_path):
    table = ErrorTable(norms=["F"], hs=[], expected={"F": 1.0})
    for h in (0.5, 0.25, 0.125):
        table.add_row(h, {"F": 0.3 * h ** 1.01})
    path = tmp_path / "table.csv"
    cli.write_csv_table(table, str(path))
    header, rows, expected = cli.read_csv_table(str(path))
    assert header == ["h", "err_F", "eoc_F"]
    assert len(rows) == 3
    assert rows[0][0] == 0.5
    assert rows[0][2] is None  # first row has no EOC
    assert rows[1][1] == 0.3 * 0.25 ** 1.01  # bit-exact roundtrip via repr
    assert rows[2][2] == pytest.approx(1.01)
    assert expected[0] == "Expected"


def test_csv_single_row_has_blank_eoc(tmp_path):
    table = ErrorTable(norms=["F"], hs=[])
    table.add_row(0.5, {"F": 0.1})
    path = tmp_path / "single.csv"
    cli.write_csv_table(table, str(path))
    _, rows, _ = cli.read_csv_table(str(path))
    assert rows[0][2] is None


def test_vtk_writer_roundtrip(tmp_path):
    mesh = unit_square_mesh(2)
    rng = np.random.default_rng(0)
    s = rng.normal(size=(mesh.num_cells, 3))
    mag = np.sqrt(s[:, 0]**2 + s[:, 1]**2 + 2 * s[:, 2]**2)
    path = tmp_path / "out.vtk"
    cli.write_vtk(str(path), mesh,
                  point_vectors={"velocity": np.zeros((mesh.num_vertices, 2))},
                  cell_scalars={"stress_11": s[:, 0], "stress_22": s[:, 1],
                                "stress_12": s[:, 2], "stress_mag": mag})
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert f"POINTS {mesh.num_vertices} double" in text
    assert f"CELLS {mesh.num_cells} {4 * mesh.num_cells}" in text
    # reread the arrays and verify |S| equals the Frobenius norm of comps
    def block(name):
        i = text.index(f"SCALARS {name} double") + 2
        return np.array([float(v) for v in text[i:i + mesh.num_cells]])
    s11, s22, s12 = block("stress_11"), block("stress_22"), block("stress_12")
    smag = block("stress_mag")
    assert np.allclose(smag, np.sqrt(s11**2 + s22**2 + 2 * s12**2),
                       atol=1e-15)


def test_vtk_zero_state(tmp_path):
    mesh = unit_square_mesh(1)
    path = tmp_path / "zero.vtk"
    cli.write_vtk(str(path), mesh,
                  point_vectors={"velocity": np.zeros((4, 2))},
                  point_scalars={"pressure": np.zeros(4)})
    lines = path.read_text().splitlines()
    vec_start = lines.index("VECTORS velocity double") + 1
    for ln in lines[vec_start:vec_start + 4]:
        assert [float(v) for v in ln.split()] == [0.0, 0.0, 0.0]


def test_run_carreau_steady_small(tmp_path):
    cfg = cli.RunConfig(experiment="carreau-steady", levels=[2, 4],
                        out_dir=str(tmp_path / "out"))
    table, extras = cli.run(cfg)
    assert os.path.exists(os.path.join(cfg.out_dir,
                                       "table_carreau_steady.csv"))
    assert os.path.exists(os.path.join(cfg.out_dir, "report.txt"))
    assert len(table.hs) == 2
    # errors decrease under refinement
    assert table.errors["F"][1] < table.errors["F"][0]
    report = open(os.path.join(cfg.out_dir, "report.txt")).read()
    assert "config.levels = [2, 4]" in report


def test_run_graph_check(tmp_path):
    cfg = cli.RunConfig(experiment="graph-check",
                        out_dir=str(tmp_path / "out"))
    lines, _ = cli.run(cfg)
    assert all("ok" in ln for ln in lines)


def test_run_infsup_small(tmp_path):
    cfg = cli.RunConfig(experiment="infsup-probe", levels=[2, 4],
                        out_dir=str(tmp_path / "out"))
    results, _ = cli.run(cfg)
    assert results["taylor-hood"][0] > 0.05
    assert results["p1p1"][1] < results["p1p1"][0]
    assert os.path.exists(os.path.join(cfg.out_dir, "infsup.csv"))


def test_run_couette_smoke(tmp_path):
    cfg = cli.RunConfig(experiment="couette-cessation",
                        couette_bns=[0.0, 20.0], couette_n=8,
                        couette_tau=5e-4, couette_T=0.05,
                        out_dir=str(tmp_path / "out"))
    (q0, results, cess), extras = cli.run(cfg)
    assert q0 == pytest.approx(0.5, abs=1e-12)
    assert results[20.0]["ceased"]
    qs = results[20.0]["q"]
    assert all(qs[i + 1] < qs[i] for i in range(len(qs) - 1))
    assert not results[0.0]["ceased"]
    assert os.path.exists(os.path.join(cfg.out_dir, "couette_Q_bn20.csv"))


def test_run_cavity_smoke(tmp_path):
    cfg = cli.RunConfig(experiment="cavity-activated", levels=[4],
                        m_stages=[10.0, 50.0], out_dir=str(tmp_path / "out"),
                        write_vtk=True)
    (x, problem), extras = cli.run(cfg)
    assert np.all(np.isfinite(x))
    assert os.path.exists(os.path.join(cfg.out_dir,
                                       "cavity_profile_x0.65.csv"))
    assert os.path.exists(os.path.join(cfg.out_dir, "cavity_activated.vtk"))


def test_run_via_main(tmp_path):
    path = write_config(tmp_path, f"""
[experiment]
name = carreau-steady
[mesh]
levels = 2
[output]
dir = {tmp_path / 'main_out'}
""")
    assert cli.main(["run", path]) == 0
    assert os.path.exists(tmp_path / "main_out" / "report.txt")


def test_self_check():
    assert cli.self_check()


def test_determinism_report_reruns(tmp_path):
    cfg1 = cli.RunConfig(experiment="carreau-steady", levels=[2],
                         out_dir=str(tmp_path / "a"))
    cfg2 = cli.RunConfig(experiment="carreau-steady", levels=[2],
                         out_dir=str(tmp_path / "b"))
    t1, _ = cli.run(cfg1)
    t2, _ = cli.run(cfg2)
    assert t1.errors["F"][0] == t2.errors["F"][0]  # bitwise
