import csv
import json

import numpy as np
import pytest

from fracflow.cli import main
from fracflow.experiments import (
    ConfigError,
    load_scenario,
    make_paper_scenarios,
    run_scenario,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    write_vtk_cells,
)
from fracflow.metrics import error_series, relative_error


def small_dict(**over):
    d = {
        "name": "small",
        "grid": {"nx": 20, "ny": 20, "h": 0.05},
        "fractures": "builtin:fractures_25",
        "continua": [
            {"id": 1, "kind": "matrix", "c": 0.1, "k": 1.0},
            {"id": 2, "kind": "fracture", "c": 1.0, "k": 1e4},
        ],
        "couplings": [{"pair": [1, 2], "sigma": 1.0}],
        "wells": [
            {"continuum": 2, "rect": [0.1, 0.15, 0.1, 0.15], "q_w": 100.0, "p_w": 1.2},
            {"continuum": 2, "rect": [0.6, 0.65, 0.85, 0.9], "q_w": 100.0, "p_w": 1.2},
        ],
        "time": {"T": 0.002, "n_steps": 4},
        "coarse": {"grids": [[4, 4]]},
    }
    d.update(over)
    return d


def write(tmp_path, d, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def test_relative_error_examples():
    ref = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert error_series(ref, ref).final == 0.0
    np.testing.assert_allclose(error_series(ref, 1.01 * ref).values, [1.0, 1.0])
    assert relative_error([3.0, 4.0], [3.0, 4.5]) == pytest.approx(10.0)
    assert relative_error([1.0, 1.0], [1.0, 2.0], weights=[3.0, 1.0]) == pytest.approx(50.0)
    with pytest.raises(ValueError):
        relative_error([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        error_series(ref, ref[:1])


def test_scenario_round_trip(tmp_path):
    sc = scenario_from_dict(small_dict())
    path = tmp_path / "a.json"
    save_scenario(sc, path)
    back = load_scenario(path)
    assert scenario_to_dict(back) == scenario_to_dict(sc)
    assert back.base_dir == tmp_path
    assert back.time.tau == pytest.approx(0.0005)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("grid"),
    lambda d: d["time"].update(n_steps=0),
    lambda d: d.update(schemes=["x"]),
    lambda d: d["continua"][0].pop("k"),
    lambda d: d["grid"].update(nx="many"),
    lambda d: d.update(options={"error_norm": "max"}),
])
def test_bad_scenarios_raise_config_error(mutate):
    d = small_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        scenario_from_dict(d)


def test_generated_benchmark_scenarios(tmp_path):
    files = make_paper_scenarios(tmp_path)
    names = sorted(p.name for p in files)
    assert names == ["2c_100.json", "2c_200.json", "3c_100.json", "3c_200.json", "fractures_25.txt"]
    two = load_scenario(tmp_path / "2c_200.json")
    assert [w.q_w for w in two.wells] == [1e5, 1e5]
    assert [c.k for c in two.continua] == [1.0, 1e6]
    assert two.coarse.grids == [(20, 20), (40, 40)]
    three = load_scenario(tmp_path / "3c_200.json")
    assert [c.k for c in three.continua] == [1e-3, 1.0, 1e6]
    assert [c.c for c in three.continua] == [0.05, 0.1, 1.0]
    assert three.time.T == 0.002 and three.time.n_steps == 50
    assert load_scenario(tmp_path / "3c_100.json").coarse.grids == [(20, 20)]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_scenario_outputs(tmp_path):
    sc = scenario_from_dict(small_dict())
    report = run_scenario(sc, out=tmp_path / "o", threads=1, dump_every=2)
    rows = _rows(tmp_path / "o" / "summary.csv")
    assert [(r["level"], r["scheme"]) for r in rows] == [
        (lvl, s) for lvl in ("fine", "coarse4x4") for s in ("coupled", "l", "d", "u")]
    fine = report.levels["fine"]
    assert float(rows[0]["final_error_pct"]) == 0.0
    for r in rows[1:4]:
        assert 0.0 < float(r["final_error_pct"]) < 5.0
    rec = fine.records["d"]
    its = _rows(tmp_path / "o" / "iterations_fine.csv")
    assert len(its) == 4
    total = sum(int(r["d_c1"]) for r in its)
    assert float(rows[2]["avg_iter_c1"]) == pytest.approx(total / 4)
    assert rec.average_iterations(0) == pytest.approx(total / 4)
    assert len(_rows(tmp_path / "o" / "errors_coarse4x4.csv")) == 4
    assert (tmp_path / "o" / "fields").is_dir()
    assert any(p.suffix == ".vtk" for p in (tmp_path / "o" / "fields").iterdir())
    assert report.levels["coarse4x4"].system.n < fine.system.n


def test_reports_are_byte_identical(tmp_path):
    sc = scenario_from_dict(small_dict(schemes=["coupled", "u"]))
    run_scenario(sc, out=tmp_path / "a", threads=1, cache=False)
    run_scenario(sc, out=tmp_path / "b", threads=1, cache=False)
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv") if p.name != "timing.csv")
    assert "summary.csv" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_single_step_run(tmp_path):
    sc = scenario_from_dict(small_dict(time={"T": 0.001, "n_steps": 1}, schemes=["l"]))
    report = run_scenario(sc, out=tmp_path, coarse=False)
    assert list(report.levels) == ["fine"]
    assert set(report.levels["fine"].records) == {"coupled", "l"}
    assert len(report.levels["fine"].errors["l"]) == 1


def test_vtk_writer(tmp_path):
    path = tmp_path / "f.vtk"
    write_vtk_cells(path, np.arange(6.0), 3, 2, (0.5, 0.5))
    text = path.read_text()
    assert "DIMENSIONS 4 3 1" in text
    assert "CELL_DATA 6" in text


def test_cli_run_ok(tmp_path, capsys):
    p = write(tmp_path, small_dict())
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--schemes", "coupled,u", "--coarse"]) == 0
    out = capsys.readouterr().out
    assert "coarse4x4" in out
    assert (tmp_path / "o" / "summary.csv").exists()


def test_cli_config_errors(tmp_path):
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2
    p = write(tmp_path, small_dict(coarse={"grids": []}))
    assert main(["run", str(p), "--coarse", "--out", str(tmp_path / "o")]) == 2
    assert main(["run", str(p), "--schemes", "coupled,z", "--out", str(tmp_path / "o")]) == 2
    p = write(tmp_path, small_dict(fractures="nowhere.txt"), "nf.json")
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    p = write(tmp_path, small_dict(coarse={"grids": [[3, 3]]}), "nd.json")
    assert main(["run", str(p), "--coarse", "--out", str(tmp_path / "o")]) == 2


def test_cli_solver_failure(tmp_path, capsys):
    p = write(tmp_path, small_dict(solver={"tol": 1e-12, "maxit": 1}))
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "solver failure" in capsys.readouterr().err


def test_cli_gen_and_check(tmp_path, capsys):
    assert main(["gen-paper-scenarios", str(tmp_path)]) == 0
    assert (tmp_path / "3c_200.json").exists()
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("[PASS]") == 8
