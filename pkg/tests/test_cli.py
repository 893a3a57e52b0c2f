import json

import pytest

from nearopt import cli


def write_spec(tmp_path, **kw):
    d = {"problem": {"name": "double_well"}, "criterion": "discounted",
         "grid": {"lower": [-3.0], "upper": [3.0], "spacing": 0.1},
         "solver": {"n_controls": 9, "tolerance": 1e-8}, "eta_ladder": [0.8, 0.4, 0.2], "seed": 1}
    d.update(kw)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(d))
    return str(path)


def test_solve_writes_outputs(tmp_path, capsys):
    spec = write_spec(tmp_path)
    assert cli.main(["solve", spec, "--out", str(tmp_path / "o")]) == cli.EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["criterion"] == "discounted" and info["value_at_x0"] > 0
    assert {p.name for p in (tmp_path / "o").iterdir()} == {"value.txt", "selector.txt", "residuals.csv"}


def test_mollify_from_policy_file(tmp_path, capsys):
    spec = write_spec(tmp_path)
    cli.main(["solve", spec, "--out", str(tmp_path / "o")])
    capsys.readouterr()
    assert cli.main(["mollify", spec, "--policy", str(tmp_path / "o" / "selector.txt"),
                     "--out", str(tmp_path / "m")]) == cli.EXIT_OK
    assert capsys.readouterr().out.count("lipschitz=") == 3
    assert len(list((tmp_path / "m").iterdir())) == 3


def test_evaluate(tmp_path, capsys):
    spec = write_spec(tmp_path, evaluation="both", mc={"dt": 0.05, "horizon": 5.0, "paths": 20})
    assert cli.main(["evaluate", spec]) == cli.EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert {"pde_cost", "mc_cost", "mc_std_error"} <= res.keys()


def test_near_opt_pass_and_miss(tmp_path, capsys):
    spec = write_spec(tmp_path)
    assert cli.main(["near-opt", spec, "--set", "epsilon=1.0", "--out", str(tmp_path / "r")]) == cli.EXIT_OK
    assert (tmp_path / "r" / "gap_report.csv").exists()
    assert cli.main(["near-opt", spec, "--set", "epsilon=0", "--set", "relative_epsilon=false"]) == cli.EXIT_MISS
    assert "MISS" in capsys.readouterr().out


def test_sweep(tmp_path, capsys):
    spec = write_spec(tmp_path, problem={"name": "ou"}, solver={"n_controls": 1})
    assert cli.main(["sweep", spec]) == cli.EXIT_OK
    assert capsys.readouterr().out.startswith("eta,pairing_gap,cost_gap")


def test_check_assumptions(tmp_path, capsys):
    spec = write_spec(tmp_path)
    code = cli.main(["check-assumptions", spec, "--rho", "0.1"])
    assert code in (cli.EXIT_OK, cli.EXIT_MISS)
    assert "A1" in capsys.readouterr().out


@pytest.mark.parametrize("override", ["eta_ladder=[0.1,0.2,0.3]", "criterion=\"bogus\"", "problem.name=\"heat\"",
                                      "grid.lower=[-1,-1]"])
def test_invalid_spec_exit_code(tmp_path, override, capsys):
    spec = write_spec(tmp_path)
    assert cli.main(["solve", spec, "--set", override]) == cli.EXIT_SPEC
    assert "invalid spec" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert cli.main(["solve", str(tmp_path / "nope.json")]) == cli.EXIT_SPEC


def test_solver_failure_exit_code(tmp_path, capsys):
    spec = write_spec(tmp_path)
    assert cli.main(["solve", spec, "--set", "solver.max_iters=3"]) == cli.EXIT_SOLVER
    assert "last residuals" in capsys.readouterr().err
