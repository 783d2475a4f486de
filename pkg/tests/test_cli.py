import csv
import json
import subprocess
import sys

import pytest

from helpers import INIT, three_outcome_params, three_outcome_spec, two_outcome_params, two_outcome_spec
from markovem.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_OK, main
from markovem.datagen import generate_panel
from markovem.model import dump_params, dump_spec, write_panel_csv


@pytest.fixture
def small(tmp_path):
    spec = three_outcome_spec(5)
    dump_spec(spec, tmp_path / "spec.json")
    dump_params(three_outcome_params(), spec, tmp_path / "params.json")
    return spec, tmp_path


def test_missing_spec_file_message(tmp_path, capsys):
    code = main(["estimate", "--spec", str(tmp_path / "nope.json"), "--panel", "x.csv", "--out", str(tmp_path)])
    assert code == EXIT_INPUT
    assert f"spec file not found: {tmp_path / 'nope.json'}" in capsys.readouterr().err


def test_invalid_spec_is_an_input_error(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"outcomes": [], "covariates": [], "time_steps": 3}))
    code = main(["generate", "--spec", str(tmp_path / "bad.json"), "--params", "p.json", "--out", str(tmp_path)])
    assert code == EXIT_INPUT
    assert "no mortality outcome" in capsys.readouterr().err


def test_generate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["generate", "--preset", "fem-mini", "-n", "60", "--seed", "5",
                     "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("panel.csv", "truth.csv", "mask.csv", "spec.json", "true_params.json", "plan.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["generate", "--preset", "fem-mini", "-n", "60", "--seed", "6",
                 "--out", str(tmp_path / "c")]) == EXIT_OK
    assert (tmp_path / "a" / "panel.csv").read_bytes() != (tmp_path / "c" / "panel.csv").read_bytes()


def test_generate_from_spec_files_with_plan(small):
    spec, d = small
    (d / "plan.json").write_text(json.dumps({"mechanisms": [{"kind": "item_nonresponse", "rate": 0.2}]}))
    assert main(["generate", "--spec", str(d / "spec.json"), "--params", str(d / "params.json"),
                 "--plan", str(d / "plan.json"), "-n", "30", "--out", str(d / "g")]) == EXIT_OK
    text = (d / "g" / "panel.csv").read_text()
    assert "NA" in text and text.splitlines()[0].startswith("id,time")


def test_complete_panel_converges_in_one_iteration(small):
    spec, d = small
    panel = generate_panel(spec, three_outcome_params(), 400, INIT, 3)
    write_panel_csv(panel, spec, d / "panel.csv")
    code = main(["estimate", "--spec", str(d / "spec.json"), "--panel", str(d / "panel.csv"),
                 "--out", str(d / "fit")])
    assert code == EXIT_OK
    fitted = json.loads((d / "fit" / "fitted.json").read_text())
    assert fitted["converged"] is True and fitted["iterations"] == 2
    trace = list(csv.DictReader(open(d / "fit" / "trace.csv")))
    assert len(trace) == 2 and float(trace[1]["q_gain"]) == 0.0


def test_safety_cap_gives_nonconverged_exit(small):
    spec, d = small
    assert main(["generate", "--spec", str(d / "spec.json"), "--params", str(d / "params.json"),
                 "--plan", _plan(d, 0.3), "-n", "80", "--out", str(d / "g")]) == EXIT_OK
    code = main(["estimate", "--spec", str(d / "spec.json"), "--panel", str(d / "g" / "panel.csv"),
                 "--R-init", "5", "--R-max", "10", "--em-max-iter", "3", "--out", str(d / "fit")])
    assert code == EXIT_NONCONVERGED
    assert json.loads((d / "fit" / "fitted.json").read_text())["converged"] is False


def _plan(d, rate):
    path = d / f"plan_{rate}.json"
    path.write_text(json.dumps({"mechanisms": [{"kind": "item_nonresponse", "rate": rate}]}))
    return str(path)


def test_exact_estep_refuses_over_budget(small, capsys):
    spec, d = small
    assert main(["generate", "--spec", str(d / "spec.json"), "--params", str(d / "params.json"),
                 "--plan", _plan(d, 0.6), "-n", "40", "--out", str(d / "g")]) == EXIT_OK
    code = main(["estimate", "--spec", str(d / "spec.json"), "--panel", str(d / "g" / "panel.csv"),
                 "--exact-estep", "--max-missing-cells", "2", "--out", str(d / "fit")])
    assert code == EXIT_INFEASIBLE
    assert "EnumerationBudget" in capsys.readouterr().err


def test_oracle_command_prints_loglik(small, capsys):
    spec, d = small
    write_panel_csv(generate_panel(spec, three_outcome_params(), 20, INIT, 1), spec, d / "panel.csv")
    assert main(["oracle", "--spec", str(d / "spec.json"), "--params", str(d / "params.json"),
                 "--panel", str(d / "panel.csv")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["loglik"] < 0


def _states(path, rows, header=("id", "time", "smk", "dead")):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(map(str, r)) + "\n")
    return str(path)


@pytest.fixture
def two(tmp_path):
    spec = two_outcome_spec(4)
    dump_spec(spec, tmp_path / "spec.json")
    dump_params(two_outcome_params(), spec, tmp_path / "params.json")
    return tmp_path


def test_simulate_writes_trajectories(two):
    d = two
    init = _states(d / "init.csv", [("a", 1, 1, 0), ("b", 1, 0, 0)])
    assert main(["simulate", "--spec", str(d / "spec.json"), "--params", str(d / "params.json"),
                 "--initial", init, "-M", "7", "--horizon", "4", "--out", str(d / "sim.csv")]) == EXIT_OK
    rows = list(csv.DictReader(open(d / "sim.csv")))
    assert len(rows) == 2 * 7 * 4 and list(rows[0]) == ["id", "m", "time", "smk", "dead"]


def test_bridge_writes_weights_and_ess(two):
    d = two
    init = _states(d / "ends.csv", [("a", 1, 1, 0), ("a", 4, "NA", 1)])
    assert main(["bridge", "--spec", str(d / "spec.json"), "--params", str(d / "params.json"),
                 "--initial", init, "-M", "50", "--horizon", "4", "--out", str(d / "br.csv")]) == EXIT_OK
    rows = list(csv.DictReader(open(d / "br.csv")))
    assert {"weight", "norm_weight", "ess"} <= set(rows[0])
    assert 1 <= float(rows[0]["ess"]) <= 50


def test_infeasible_bridge_exit_code(tmp_path, capsys):
    spec = three_outcome_spec(3)
    dump_spec(spec, tmp_path / "spec.json")
    dump_params(three_outcome_params(), spec, tmp_path / "params.json")
    init = _states(tmp_path / "ends.csv", [("a", 1, 1940, 0, 0, 1, 0), ("a", 3, 1940, 0, 0, 0, 0)],
                   ("id", "time", "birth_year", "male", "smk", "dis", "dead"))
    code = main(["bridge", "--spec", str(tmp_path / "spec.json"), "--params", str(tmp_path / "params.json"),
                 "--initial", init, "-M", "20", "--horizon", "3", "--out", str(tmp_path / "br.csv")])
    assert code == EXIT_INFEASIBLE
    assert "unreachable" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "markovem", "generate", "--preset", "fem-mini", "-n", "5",
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    bad = subprocess.run([sys.executable, "-m", "markovem", "estimate", "--panel", "x"], capture_output=True,
                         text=True)
    assert bad.returncode == 2
