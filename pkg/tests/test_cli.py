import json

from gbp_planner import cli


def test_parse_seeds_and_overrides():
    assert cli.parse_seeds("0..3") == [0, 1, 2, 3]
    assert cli.parse_seeds("5,2") == [5, 2]
    assert cli.expand_overrides(["comm.gamma=0,0.5", "scenario.K=8"]) == [
        ["comm.gamma=0", "scenario.K=8"], ["comm.gamma=0.5", "scenario.K=8"]]


SETS = ["custom.robots=[{'start': [0, 0, 10, 0], 'goal': [20, 0, 0, 0]}]", "scenario.horizon=4",
        "scenario.max_speed=10"]


def test_run_writes_outputs(tmp_path):
    args = ["run", "--scenario", "custom", "--seeds", "0..1", "--out", str(tmp_path)]
    for s in SETS + ["comm.r_c=20,30"]:
        args += ["--set", s]
    assert cli.main(args) == 0
    assert len(list(tmp_path.glob("*.trace.csv"))) == 4
    assert len(list(tmp_path.glob("*.metrics.json"))) == 4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary


def test_incomplete_run_exit_code(tmp_path):
    args = ["run", "--scenario", "custom", "--out", str(tmp_path), "--max-ticks", "3"]
    for s in SETS:
        args += ["--set", s]
    assert cli.main(args) == 2


def test_bad_override_is_error(tmp_path, capsys):
    assert cli.main(["run", "--scenario", "circle", "--set", "circle.bogus=1", "--out", str(tmp_path)]) == 1
    assert "circle.bogus" in capsys.readouterr().err


def test_table_marks_missing_cells(tmp_path, capsys):
    args = ["run", "--scenario", "custom", "--out", str(tmp_path)]
    for s in SETS + ["comm.r_c=20"]:
        args += ["--set", s]
    assert cli.main(args) == 0
    assert cli.main(["table", "table1", str(tmp_path), "--grid", "20,40"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert any(line.startswith("40") and "absent" in line for line in out)
    assert any(line.startswith("20") and "absent" not in line for line in out)
