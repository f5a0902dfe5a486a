from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET

import pytest

from fracsobolev.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_domain_builtin_and_errors(tmp_path, capsys):
    code, _ = run(capsys, "domain", "slit", "--out", str(tmp_path))
    assert code == 0
    data = json.loads((tmp_path / "domain_slit.json").read_text())
    assert data["outer"] == [[-1, -1], [1, -1], [1, 1], [-1, 1]]
    assert data["slits"] == [[[0.0, 0.0], [1.0, 0.0]]]
    bad = tmp_path / "bad.json"
    bad.write_text('{"outer": [[0,0],[1,1],[1,0],[0,1]]}')
    code, io = run(capsys, "domain", str(bad), "--out", str(tmp_path))
    assert code == 2 and "not simple" in io.err


def test_seminorm_of_constant_is_zero(tmp_path, capsys):
    code, _ = run(capsys, "seminorm", "--fn", "const 3", "--s", "0.5", "--p", "2", "--levels", "2",
                  "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "results.csv").open()))
    semi = [r for r in rows if r["op"] in ("full", "restricted")]
    assert [r["level"] for r in semi] == ["0", "1", "2"] * 2
    assert all(float(r["value"]) == 0.0 and r["diverging"] == "false" for r in semi)
    assert {r["op"]: float(r["value"]) for r in rows if "norm" in r["op"]} == {"lp_norm": 3.0, "w1p_norm": 3.0}


def test_seminorm_output_is_deterministic(tmp_path, capsys):
    args = ["seminorm", "--fn", "linear 1 0 0", "--s", "0.5", "--p", "2", "--levels", "1", "--oracle",
            "--samples", "20000", "--seed", "7"]
    for d in ("a", "b"):
        assert run(capsys, *args, "--out", str(tmp_path / d))[0] == 0
        assert run(capsys, *args, "--format", "json", "--out", str(tmp_path / d))[0] == 0
    for name in ("results.csv", "seminorm.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader((tmp_path / "a" / "results.csv").open()))
    row = next(r for r in rows if r["op"] == "full" and r["oracle_power"])
    assert row["seed"] == "7" and float(row["oracle_power_std_error"]) > 0


def test_kprofile_artifacts(tmp_path, capsys):
    args = ["kprofile", "--fn", "bump 0.5 0.5 0.4", "--s", "0.5", "--p", "2", "--count", "4"]
    for d in ("a", "b"):
        assert run(capsys, *args, "--out", str(tmp_path / d))[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    data = [f for f in files if f.endswith(".json")]
    assert data and any(f.endswith(".csv") for f in files)
    for f in files:
        if not f.endswith(".svg"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    prof = json.loads((tmp_path / "a" / data[0]).read_text())
    assert {"scales", "k_opt", "k_constructive", "interp_value", "tail_bound", "head_gap",
            "surrogate_factor"} <= set(prof)
    assert prof["surrogate_factor"] == pytest.approx(2 ** 0.5)
    svg = [f for f in files if f.endswith(".svg")]
    root = ET.parse(tmp_path / "a" / svg[0]).getroot()
    assert root.tag.endswith("svg")
    assert any(el.tag.endswith("path") for el in root.iter())


def test_bad_function_and_bad_exponents_exit_2(tmp_path, capsys):
    assert run(capsys, "seminorm", "--fn", "wiggle 1", "--s", "0.5", "--p", "2", "--out", str(tmp_path))[0] == 2
    assert run(capsys, "seminorm", "--fn", "const 1", "--s", "1.5", "--p", "2", "--out", str(tmp_path))[0] == 2


@pytest.mark.parametrize("cfg, fragment", [
    ({"experiment": "custom", "domain": "square", "suite": []}, "suite empty"),
    ({"experiment": "custom", "domain": "square", "suite": ["const 1"], "levels": [1, 2]}, "levels"),
    ({"experiment": "nope"}, "unknown experiment"),
    ({"experiment": "custom", "suite": ["const 1"]}, "domain"),
])
def test_experiment_config_errors(tmp_path, capsys, cfg, fragment):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code, io = run(capsys, "experiment", "--config", str(path), "--out", str(tmp_path))
    assert code == 2 and fragment in io.err


def test_config_json_line_diagnostic(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text('{"experiment": "custom",\n "suite": [,]}')
    code, io = run(capsys, "experiment", "--config", str(path), "--out", str(tmp_path))
    assert code == 2 and "line 2" in io.err


def test_custom_experiment_report(tmp_path, capsys):
    cfg = {"experiment": "custom", "domain": "square", "suite": ["const 1", "linear 1 0 0"],
           "exponents": [[0.5, 2]], "levels": [1, 2, 3], "seed": 3}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    for d in ("a", "b"):
        code, io = run(capsys, "experiment", "--config", str(path), "--out", str(tmp_path / d), "--no-plot")
        assert code == 0 and "C1=" in io.out
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rep = json.loads((tmp_path / "a" / next(f for f in files if f.endswith(".json"))).read_text())
    assert "version" in rep and "environment" in rep
    assert len(rep["rows"]) == 2 and rep["errors"] == []
    assert rep["C1"] >= 0 and rep["C2"] >= 0
