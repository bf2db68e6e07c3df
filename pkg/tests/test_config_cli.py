import json

import numpy as np
import pytest

from pomfg import oracles
from pomfg.cli import main, r12
from pomfg.config import BUNDLED, ConfigError, bundled_path, load_config, model_digest
from pomfg.flow import recursive_from_initial
from pomfg.model import ModelValidationError
from pomfg.solver import solve_pomdp

COST_ONE = bundled_path("cost_one")


def _variant(tmp_path, old, new, name="m.toml", src=COST_ONE):
    text = src.read_text()
    assert old in text
    p = tmp_path / name
    p.write_text(text.replace(old, new))
    return p


def test_bundled_configs_load():
    for name in BUNDLED:
        L = load_config(bundled_path(name))
        assert L.horizon is not None
        assert len(L.digest) == 64


def test_digest_tracks_content(tmp_path):
    a = load_config(COST_ONE).digest
    b = load_config(_variant(tmp_path, "discount = 0.8", "discount = 0.80")).digest
    c = load_config(_variant(tmp_path, "discount = 0.8", "discount = 0.81", "c.toml")).digest
    assert a == b != c
    assert model_digest("tabular", 0.5, [1.0], {}) != model_digest("gaussian", 0.5, [1.0], {})


def test_csv_tensor_matches_inline():
    L = load_config(bundled_path("coupled_toy"))
    K = L.resolved["K"]
    assert K.shape == (2, 2, 2, 2)
    np.testing.assert_allclose(K.sum(axis=-1), 1.0)
    np.testing.assert_allclose(K[1, 1, 0], [0.35, 0.65])
    np.testing.assert_allclose(K[1, 1, 1], [0.6, 0.4])


@pytest.mark.parametrize("old,new,match", [
    ("schema_version = 1", "schema_version = 2", "schema_version"),
    ('family = "tabular"', 'family = "other"', "family"),
    ("discount = 0.8", "discount = 1.0", "discount"),
    ("r = [[0.7, 0.3], [0.4, 0.6]]", "r = [[0.7, 0.3], [0.4]]", "'r'"),
    ("[tabular]", "[tabularx]", "tabular"),
])
def test_malformed_configs(tmp_path, old, new, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_variant(tmp_path, old, new))


def test_unparseable_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("schema_version = = 1\n")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(p)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.toml")


def test_csv_errors_name_the_line(tmp_path):
    src = bundled_path("coupled_toy")
    (tmp_path / "coupled_toy_K.csv").write_text(
        (src.parent / "coupled_toy_K.csv").read_text().replace("0.93", "abc", 1))
    p = tmp_path / "toy.toml"
    p.write_text(src.read_text())
    with pytest.raises(ConfigError, match=r"coupled_toy_K.csv:\d+"):
        load_config(p)


def test_invalid_kernel_rejected(tmp_path):
    p = _variant(tmp_path, "[[0.6, 0.4], [0.3, 0.7]]", "[[0.6, 0.3], [0.3, 0.7]]")
    with pytest.raises(ModelValidationError):
        load_config(p)
    assert load_config(p, check=False).model is not None


def test_committed_oracle_values():
    ref = json.loads(bundled_path("cost_one").with_name("oracle_values.json").read_text())
    T = ref["horizon"]
    for name, entry in ref["values"].items():
        m = load_config(bundled_path(name)).model
        flow = recursive_from_initial(m, T)
        table, policy = solve_pomdp(m, flow, T)
        assert table.root_value == pytest.approx(entry["value"], abs=1e-9)
        assert int(policy.actions[0][0]) == entry["root_action"]
        best, _, values = oracles.exhaustive_minimum(m, flow, T)
        assert values.shape[0] == entry["policies"]
        assert best == pytest.approx(entry["value"], abs=1e-12)


def test_r12():
    assert r12({"a": [np.float64(1 / 3), np.int64(2), np.bool_(True)]}) == {"a": [0.333333333333, 2, True]}


# command line

def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", "--model", str(COST_ONE)]) == 0
    assert "valid" in capsys.readouterr().out
    bad = _variant(tmp_path, "[[0.6, 0.4], [0.3, 0.7]]", "[[0.6, 0.3], [0.3, 0.7]]")
    assert main(["validate", "--model", str(bad)]) == 1
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("violation")]
    assert len(lines) == 1
    garbled = tmp_path / "g.toml"
    garbled.write_text("not toml [[[")
    assert main(["validate", "--model", str(garbled)]) == 2
    assert main(["validate"]) == 2
    assert main(["nonsense"]) == 2


def test_solve_outputs(tmp_path, capsys):
    out = tmp_path / "solve"
    assert main(["solve", "--model", str(COST_ONE), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["root_value"] == pytest.approx(2.952)
    assert rep["value_bracket"][1] == pytest.approx(5.0)
    man = json.loads((out / "manifest.json").read_text())
    assert man["subcommand"] == "solve" and len(man["model_digest"]) == 64
    assert (out / "policy.csv").read_text().startswith("t,belief_key,action")
    # a flow written by one run can be fed back in
    assert main(["solve", "--model", str(COST_ONE), "--out", str(tmp_path / "again"),
                 "--flow", str(out / "flow.csv")]) == 0


def test_solve_horizon_zero_is_greedy(tmp_path):
    out = tmp_path / "s"
    toy = bundled_path("coupled_toy")
    assert main(["solve", "--model", str(toy), "--horizon", "0", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    m = load_config(toy).model
    C = m.initial @ m.cost_matrix(m.initial)
    assert rep["root_action"] == int(np.argmin(C))
    assert rep["root_value"] == pytest.approx(C.min())


def test_solve_input_errors(tmp_path):
    args = ["solve", "--model", str(COST_ONE), "--out", str(tmp_path)]
    assert main(args + ["--horizon", "-1"]) == 2
    assert main(args + ["--flow", str(tmp_path / "missing.csv")]) == 2
    assert main(args + ["--terminal-mode", "bogus"]) == 2


def test_node_budget_exit(tmp_path):
    assert main(["solve", "--model", str(bundled_path("gaussian")), "--horizon", "6",
                 "--node-budget", "500", "--out", str(tmp_path)]) == 3


def test_equilibrium_command(tmp_path):
    out = tmp_path / "eq"
    assert main(["equilibrium", "--model", str(bundled_path("coupled_toy")), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["converged"] and rep["residual"] <= 1e-6
    assert (out / "residuals.csv").exists()
    assert main(["equilibrium", "--model", str(bundled_path("coupled_toy")), "--out", str(out),
                 "--max-iters", "1", "--damping", "0.01"]) == 1
    assert main(["equilibrium", "--model", str(COST_ONE), "--damping", "slow", "--out", str(out)]) == 2


def test_simulate_single_agent(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--model", str(bundled_path("coupled_toy")), "--N", "1", "--reps", "20",
                 "--deviations", "myopic", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    meas = np.array(rep["empirical_measures_replication_0"]["measures"])
    assert np.all(meas.max(axis=1) == 1.0)
    assert rep["eps_is_lower_bound"] is True
    for name in ("convergence.csv", "onestep.csv", "eps_curve.csv", "manifest.json"):
        assert (out / name).exists()
    assert main(["simulate", "--model", str(bundled_path("coupled_toy")), "--deviations", "nope",
                 "--out", str(out)]) == 2


def test_simulate_refuses_mean_field_observations(tmp_path):
    p = _variant(tmp_path, '"mean_field_free"', '"coupled"', src=bundled_path("gaussian"))
    assert main(["simulate", "--model", str(p), "--N", "2", "--reps", "2", "--out", str(tmp_path)]) == 1


def test_oracle_filter(capsys):
    code = main(["oracle", "--model", str(COST_ONE), "--filter", "--actions", "0", "1",
                 "--observations", "1", "0"])
    assert code == 0
    for line in capsys.readouterr().out.splitlines():
        parts = line.split()
        f = np.array(parts[2:4], dtype=float)
        e = np.array(parts[5:7], dtype=float)
        np.testing.assert_allclose(f, e, atol=1e-11)
    assert main(["oracle", "--model", str(COST_ONE), "--filter", "--actions", "0",
                 "--observations"]) == 2


def test_oracle_solver(tmp_path):
    assert main(["oracle", "--model", str(bundled_path("decoupled")), "--solver", "--horizon", "2",
                 "--out", str(tmp_path)]) == 0
    payload = json.loads((tmp_path / "oracle.json").read_text())
    assert payload["solver"]["abs_diff"] <= 1e-9
    assert main(["oracle", "--model", str(bundled_path("decoupled")), "--solver", "--horizon", "5"]) == 2


def test_verify_subset(tmp_path, capsys):
    assert main(["verify", "--criteria", "3", "4", "--no-determinism", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2
    assert (tmp_path / "criteria.csv").read_text().count("\n") == 3
