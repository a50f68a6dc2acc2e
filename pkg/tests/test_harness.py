import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfbsde import cli
from hetfbsde.control import ControlField
from hetfbsde.errors import ScenarioError
from hetfbsde.scenario import build_atlas, build_control, build_model, load_scenario, parse_scenario

MINIMAL = """
N = 50
[model]
family = "zero"
[grid]
T = 1.0
steps = 4
"""

COUPLED = """
seed = 3
N = 120
[model]
family = "graphon_linear"
[model.params]
beta = 1.0
c_b = 0.5
gamma = 1.0
g_x = 0.5
c_G = 0.1
kappa = {{ base = 1.0, decay = 0.5 }}
[atlas]
count = 2
[grid]
T = 1.0
steps = 5
[initial]
mean = 1.0
[solver]
max_outer = {max_outer}
tol = {tol}
"""

LQ = """
seed = 1
N = 200
[model]
family = "lq_forward"
[atlas]
count = 2
[grid]
T = 1.0
steps = 10
[initial]
mean = -1.0
mean_slope = 2.0
[control]
kind = "feedback"
[optimizer]
rate = 0.5
max_iters = 5
bootstrap = 10
rivals = 3
"""


def write(tmp_path, text, name="scenario.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(tmp_path, *argv, out="out"):
    d = tmp_path / out
    code = cli.run_cli(list(argv) + ["--out", str(d)])
    return code, d


# --- scenario schema ------------------------------------------------------------------


def test_minimal_scenario_defaults(tmp_path):
    sc = load_scenario(write(tmp_path, MINIMAL))
    assert sc.seed == 0 and sc.atlas.count == 1 and sc.solver.basis == "quadratic"
    assert sc.control.kind == "open_loop" and sc.output.dir == "out"
    assert build_model(sc).measure_free
    ctl = build_control(sc, build_model(sc), build_atlas(sc))
    assert ctl.params.shape == (1, 5, 1)


def test_smallest_scenario_solves(tmp_path):
    text = 'N = 1\n[model]\nfamily = "zero"\n[grid]\nT = 1.0\nsteps = 1\n'
    sc = load_scenario(write(tmp_path, text))
    assert sc.N == 1 and sc.grid.steps == 1
    code, out = run(tmp_path, "solve", "--scenario", write(tmp_path, text))
    assert code == 0
    assert json.loads((out / "diagnostics.json").read_text())["defects"]["forward"] == 0.0


def test_missing_grid_horizon_names_the_field(tmp_path):
    text = MINIMAL.replace("T = 1.0\n", "")
    with pytest.raises(ScenarioError, match=r"grid\.T: Field required"):
        load_scenario(write(tmp_path, text))


@pytest.mark.parametrize(
    "edit, pattern",
    [
        (("N = 50", "N = 50\nturbo = true"), "turbo"),
        (("steps = 4", "steps = 0"), r"grid\.steps"),
        (('family = "zero"', 'family = "heston"'), r"model\.family"),
    ],
)
def test_schema_errors(tmp_path, edit, pattern):
    with pytest.raises(ScenarioError, match=pattern):
        load_scenario(write(tmp_path, MINIMAL.replace(*edit)))


def test_toml_syntax_error_reports_position(tmp_path):
    with pytest.raises(ScenarioError, match="line"):
        load_scenario(write(tmp_path, MINIMAL + "\n[grid\n"))
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(str(tmp_path / "nope.toml"))


def test_model_parameter_errors(tmp_path):
    sc = load_scenario(write(tmp_path, MINIMAL.replace('family = "zero"', 'family = "zero"\nparams = { beta = 1 }')))
    with pytest.raises(ScenarioError):
        build_model(sc)
    sc = load_scenario(write(tmp_path, MINIMAL.replace('family = "zero"', 'family = "graphon_linear"\nparams = { zeta = 1 }')))
    with pytest.raises(ScenarioError, match="zeta"):
        build_model(sc)


def test_box_validation(tmp_path):
    with pytest.raises(ScenarioError, match="upper"):
        load_scenario(write(tmp_path, MINIMAL + "[control]\nlower = 1.0\nupper = 0.0\n"))


def test_hash_ignores_key_order_and_output_dir(tmp_path):
    a = load_scenario(write(tmp_path, MINIMAL, "a.toml"))
    permuted = """
[grid]
steps = 4
T = 1.0
[model]
family = "zero"
[output]
dir = "elsewhere"
"""
    b = load_scenario(write(tmp_path, "N = 50\n" + permuted, "b.toml"))
    assert a.hash == b.hash


def _shuffled(data, rng):
    if not isinstance(data, dict):
        return data
    keys = list(data)
    rng.shuffle(keys)
    return {k: _shuffled(data[k], rng) for k in keys}


@settings(max_examples=50, deadline=None)
@given(st.randoms(use_true_random=False))
def test_hash_invariant_under_random_permutations(rnd):
    data = json.loads(parse_scenario(BASE).model_dump_json())
    assert parse_scenario(_shuffled(data, rnd)).hash == parse_scenario(BASE).hash


BASE = {"N": 10, "model": {"family": "zero"}, "grid": {"T": 1.0, "steps": 4}}
FIELDS = [("N",), ("seed",), ("grid", "T"), ("grid", "steps"), ("solver", "tol"), ("optimizer", "rate")]


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(FIELDS), st.integers(1, 7))
def test_any_semantic_edit_changes_hash(path, bump):
    base = parse_scenario(BASE)
    data = json.loads(base.model_dump_json())
    node = data
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = node[path[-1]] + bump
    assert parse_scenario(data).hash != base.hash


# --- control tables -----------------------------------------------------------------


def test_control_table_roundtrip(tmp_path):
    ctl = ControlField.zeros("feedback", 2, 3, features="x_chi0", lower=-1.0)
    ctl.params[...] = np.random.default_rng(0).normal(size=ctl.params.shape)
    cli.write_control(ctl, tmp_path / "c.csv")
    back = cli.read_control(tmp_path / "c.csv", lower=-1.0)
    assert back.kind == "feedback" and back.features == "x_chi0"
    assert np.array_equal(back.params, ctl.params)
    ol = ControlField.zeros("open_loop", 2, 3)
    cli.write_control(ol, tmp_path / "o.csv")
    assert cli.read_control(tmp_path / "o.csv").params.shape == (2, 4, 1)


# --- CLI --------------------------------------------------------------------------------


def test_check_command(tmp_path):
    sc = write(tmp_path, MINIMAL + "[conditions]\nsheet = { lam1 = -1.0, lam2 = -1.0, rho4 = 1.0 }\n")
    code, out = run(tmp_path, "check", "--scenario", sc)
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["feasible"] and abs(rep["theta"] - 2 / 3) < 1e-12
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "check" and man["outputs"] == ["report.json"] and len(man["scenario_hash"]) == 64


def test_check_without_sheet_uses_derived_constants(tmp_path):
    code, out = run(tmp_path, "check", "--scenario", write(tmp_path, COUPLED.format(max_outer=5, tol=1e-4)))
    assert code == 0 and json.loads((out / "report.json").read_text())["status"] == "feasible"


def test_invalid_scenario_exit_code(tmp_path):
    code, out = run(tmp_path, "solve", "--scenario", write(tmp_path, MINIMAL.replace("T = 1.0\n", "")))
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert err["code"] == 1 and err["stage"] == "scenario" and "grid.T" in err["message"]


def test_bad_arguments_exit_code(tmp_path):
    assert cli.run_cli(["solve"]) == 1
    assert cli.run_cli(["frobnicate"]) == 1


def test_solve_command(tmp_path):
    code, out = run(tmp_path, "solve", "--scenario", write(tmp_path, MINIMAL))
    assert code == 0
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["defects"]["forward"] == 0.0 and diag["picard"]["converged"]
    assert (out / "trajectories_type0.csv").exists()


def test_solve_nonconvergence_exit_code(tmp_path):
    code, out = run(tmp_path, "solve", "--scenario", write(tmp_path, COUPLED.format(max_outer=1, tol=1e-12)))
    assert code == 2
    assert json.loads((out / "error.json").read_text())["stage"] == "solve"
    assert "error.json" in json.loads((out / "manifest.json").read_text())["outputs"]


def test_solve_outputs_are_deterministic(tmp_path):
    sc = write(tmp_path, COUPLED.format(max_outer=6, tol=1e-4))
    _, a = run(tmp_path, "solve", "--scenario", sc, out="a")
    _, b = run(tmp_path, "solve", "--scenario", sc, out="b")
    for name in ("trajectories_type0.csv", "trajectories_type1.csv", "diagnostics.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    _, c = run(tmp_path, "solve", "--scenario", sc, "--seed", "4", out="c")
    assert (a / "trajectories_type0.csv").read_bytes() != (c / "trajectories_type0.csv").read_bytes()


@pytest.mark.parametrize("argv", [["check"], ["optimize", "--iters", "2"], ["verify"]])
def test_other_commands_are_deterministic(tmp_path, argv):
    sc = write(tmp_path, LQ + "[conditions]\nsheet = { lam1 = -1.0, lam2 = -1.0, rho4 = 1.0 }\n")
    _, a = run(tmp_path, argv[0], "--scenario", sc, *argv[1:], out="a")
    _, b = run(tmp_path, argv[0], "--scenario", sc, *argv[1:], out="b")
    names = sorted(p.name for p in a.iterdir() if p.name != "manifest.json")
    assert names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    for m in (ma, mb):
        m.pop("started"), m.pop("finished")
    assert ma == mb


def test_optimize_and_verify(tmp_path):
    sc = write(tmp_path, LQ)
    code, out = run(tmp_path, "optimize", "--scenario", sc, "--iters", "0", out="zero")
    assert code == 0
    with open(out / "history.csv") as fh:
        assert len(list(csv.reader(fh))) == 2
    code, out = run(tmp_path, "optimize", "--scenario", sc)
    assert code == 0
    mp = json.loads((out / "mp_report.json").read_text())
    assert set(mp) >= {"norm", "stderr", "verdict"}
    code, vout = run(tmp_path, "verify", "--scenario", sc, "--control", str(out / "control.csv"), out="v")
    assert code == 0
    cert = json.loads((vout / "certificate.json").read_text())
    assert len(cert["rivals"]) == 3 and cert["verdict"] in ("verified (empirical)", "not verified")
    code, _ = run(tmp_path, "optimize", "--scenario", sc, "--rate", "0", out="bad")
    assert code == 1


def test_benchmark_noise_floor(tmp_path):
    code, out = run(tmp_path, "benchmark-lq", "--N", "10", "--steps", "5")
    assert code == 2
    rep = json.loads((out / "benchmark.json").read_text())
    assert not rep["checks"]["noise_floor"] and any("noise floor" in n for n in rep["notes"])
    assert json.loads((out / "manifest.json").read_text())["seed"] == 7


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_check", boom)
    code, out = run(tmp_path, "check", "--scenario", write(tmp_path, MINIMAL))
    assert code == 3 and "kaput" in json.loads((out / "error.json").read_text())["message"]
