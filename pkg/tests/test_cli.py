import json

import numpy as np
import pytest
from conftest import random_race_edu, small_layout

from homogamy.cli import dumps, main
from homogamy.tables import ContingencyTable, write_table_csv

LAY = small_layout()


def _write(path, table, layout=None):
    path.write_text(write_table_csv(table, layout))
    return str(path)


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_dumps_fixed_point():
    text = dumps({"b": 1 / 3, "a": float("nan"), "c": [-0.0, 2]})
    assert text.index('"b"') < text.index('"a"')
    assert "0.333333333" in text and "null" in text and "-0.000" not in text


def test_measure(tmp_path, capsys):
    f = _write(tmp_path / "t.csv", ContingencyTable([[30, 10], [10, 50]]))
    code, out, _ = _run(capsys, ["measure", f])
    assert code == 0
    rep = json.loads(out)
    assert rep["schema_version"] == "1"
    assert rep["result"]["ll_simple"]["value"] == pytest.approx(7 / 12, abs=1e-9)
    assert len(rep["inputs"]["table"]["sha256"]) == 64


def test_measure_race_edu(tmp_path, capsys):
    k = random_race_edu(np.random.default_rng(0))
    f = _write(tmp_path / "k.csv", k, LAY)
    rep = json.loads(_run(capsys, ["measure", f])[1])
    assert set(rep["result"]) >= {"sehc", "sirm", "ll_generalized"}


def test_nm_targets(tmp_path, capsys):
    f = _write(tmp_path / "s.csv", ContingencyTable([[30, 10], [10, 50]]))
    code, out, _ = _run(capsys, ["nm", f, "--rows", "50,50", "--cols", "50,50"])
    assert code == 0
    counts = json.loads(out)["result"]["table"]["counts"]
    assert counts[0][0] == pytest.approx(39.583333, abs=1e-6)


def test_nm_degenerate_exit_code(tmp_path, capsys):
    f = _write(tmp_path / "s.csv", ContingencyTable([[5, 0], [0, 0]]))
    code, _, err = _run(capsys, ["nm", f, "--rows", "2,3", "--cols", "2,3"])
    assert code == 3
    assert "Degenerate" in err


def test_nm_needs_targets(tmp_path, capsys):
    f = _write(tmp_path / "s.csv", ContingencyTable([[1, 2], [3, 4]]))
    assert _run(capsys, ["nm", f])[0] == 2


def test_parse_error_location(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text(",a,b\nx,1,2\ny,3,oops\n")
    code, _, err = _run(capsys, ["measure", str(bad)])
    assert code == 2
    assert "line 3" in err


def test_missing_file(tmp_path, capsys):
    assert _run(capsys, ["measure", str(tmp_path / "nope.csv")])[0] == 2


def test_gnm_and_repeatability(tmp_path, capsys):
    rng = np.random.default_rng(5)
    paths = [_write(tmp_path / f"k{i}.csv", random_race_edu(rng), LAY) for i in range(3)]
    first = _run(capsys, ["gnm", *paths, "--objective", "sirm"])
    second = _run(capsys, ["gnm", *paths, "--objective", "sirm"])
    assert first[0] == 0 and first[1] == second[1]
    iv = json.loads(first[1])["result"]["interval"]
    assert iv["min"] <= iv["max"]
    obs = json.loads(_run(capsys, ["gnm", paths[0], paths[0], paths[0], "--mode", "observed"])[1])
    assert obs["result"]["interval"]["min"] == obs["result"]["interval"]["max"]


def test_gnm_needs_layout(tmp_path, capsys):
    f = _write(tmp_path / "s.csv", ContingencyTable(np.ones((4, 4))))
    assert _run(capsys, ["gnm", f, f, f])[0] == 2


def test_gnm_infeasible_exit_code(tmp_path, capsys):
    def t(c):
        return ContingencyTable(np.array(c, float), LAY.row_labels(), LAY.col_labels())

    mild = [[3, 2, 1, 1], [2, 3, 1, 1], [1, 1, 3, 2], [1, 1, 2, 3]]
    skewed = [[2, 0, 1, 5], [3, 5, 0, 2], [0, 0, 3, 4], [4, 4, 3, 3]]
    anti = [[1, 9, 1, 9], [9, 1, 9, 1], [1, 9, 1, 9], [9, 1, 9, 1]]
    paths = [_write(tmp_path / f"{n}.csv", t(c), LAY)
             for n, c in (("tr", mild), ("ta", skewed), ("te", anti))]
    code, _, err = _run(capsys, ["gnm", *paths])
    assert code == 4
    assert "NoFeasiblePoint" in err


def test_decompose_modes(tmp_path, capsys):
    rng = np.random.default_rng(8)
    a = _write(tmp_path / "a.csv", random_race_edu(rng), LAY)
    b = _write(tmp_path / "b.csv", random_race_edu(rng), LAY)
    one = json.loads(_run(capsys, ["decompose", a, b])[1])["result"]["decomposition"]
    assert set(one["effects"]) == {"availability", "preferences"}
    code, out, _ = _run(capsys, ["decompose", a, b, "--mode", "two-dim"])
    assert code == 0
    two = json.loads(out)["result"]
    assert set(two["corners"]) == {"001", "010", "011", "100", "101", "110"}
    assert "residuum" in two["decomposition"]


def test_ingest(tmp_path, capsys):
    micro = tmp_path / "m.csv"
    micro.write_text(
        "husband_race,husband_edu,wife_race,wife_edu,weight,year\n"
        "B,L,B,L,2,1980\n"
        "W,H,W,H,1.5,1980\n"
        "B,H,W,L,1,1990\n"
        "W,L,B,H,1,1980\n"
    )
    out = tmp_path / "t.csv"
    code = main(["ingest", str(micro), "--edu", "L,H", "--where", "year=1980", "-o", str(out)])
    assert code == 0
    rep = json.loads(_run(capsys, ["measure", str(out)])[1])
    assert rep["result"]["sirm"] == pytest.approx(1 / 4.5)


def test_bad_log_level(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HOMOGAMY_LOG", "chatty")
    f = _write(tmp_path / "t.csv", ContingencyTable([[1, 2], [3, 4]]))
    assert _run(capsys, ["measure", f])[0] == 0
