"""Tests for config resolution, experiment commands, and run manifests."""

import hashlib
import json
import subprocess
import sys
import textwrap

import pytest

from dnlspde import __version__
from dnlspde.cli import main, resolve_config
from dnlspde.errors import ConfigError


def write_config(tmp_path, body, name="exp.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body), encoding="utf-8")
    return str(p)


SMALL_MC = """
    [grid]
    n_interior = 6
    [time]
    T = 0.25
    N = 5
    [coefficients]
    flux = "custom"
    c_lin = 1.0
    c_plap = 1.0
    p = 4.0
    b = "wave"
    sigma = "quadratic"
    sigma_lipschitz = 0.6
    [initial]
    kind = "sine"
    amplitude = 0.5
    [montecarlo]
    M_paths = 6
    base_seed = 3
    eps_list = [0.5, 0.1]
"""


# -- config resolution ------------------------------------------------------


def test_defaults_fill_every_section():
    cfg = resolve_config({})
    assert cfg["grid"] == {"n_interior": 32, "length": 1.0}
    assert cfg["time"] == {"T": 1.0, "N": 64}
    assert cfg["coefficients"]["flux"] == "p_laplacian"
    assert cfg["montecarlo"]["eps_list"] == [1.0]
    assert cfg["optimizer"]["penalty_schedule"] == [10.0, 100.0, 1000.0, 10000.0]
    assert cfg["output"] == {"directory": "out", "dump_interval": 1}
    assert cfg["experiment"]["kind"] == ""


def test_unknown_key_gets_suggestion():
    with pytest.raises(ConfigError, match="did you mean 'n_interior'"):
        resolve_config({"grid": {"n_interor": 4}})


def test_unknown_section_gets_suggestion():
    with pytest.raises(ConfigError, match=r"did you mean \[time\]"):
        resolve_config({"tme": {"T": 1.0}})


def test_errors_are_collected_not_first_only():
    try:
        resolve_config({"grid": {"n_interior": -3}, "time": {"T": -1.0}})
    except ConfigError as e:
        msg = str(e)
        assert "grid.n_interior" in msg and "time.T" in msg
    else:
        pytest.fail("expected ConfigError")


def test_type_errors_reported():
    with pytest.raises(ConfigError, match="expected an integer"):
        resolve_config({"time": {"N": "many"}})
    with pytest.raises(ConfigError, match="entries must be positive"):
        resolve_config({"montecarlo": {"eps_list": [0.1, -1.0]}})
    with pytest.raises(ConfigError, match="expected a nonempty list"):
        resolve_config({"montecarlo": {"eps_list": []}})


def test_tabulated_initial_length_checked():
    with pytest.raises(ConfigError, match="expected 4 entries"):
        resolve_config({"grid": {"n_interior": 4},
                        "initial": {"kind": "tabulated", "values": [1.0, 2.0]}})


def test_tabulated_control_length_checked():
    with pytest.raises(ConfigError, match="expected 3 entries"):
        resolve_config({"time": {"N": 3},
                        "control": {"kind": "tabulated", "values": [0.0]}})


def test_sup_tube_requires_skeleton_target():
    with pytest.raises(ConfigError, match="sup_tube"):
        resolve_config({"event": {"kind": "sup_tube", "target": "scaled_initial"}})


def test_wave_parameter_ordering_checked():
    with pytest.raises(ConfigError, match="beta > gamma"):
        resolve_config({"coefficients": {"b": "wave", "beta": 1.0, "gamma": 2.0}})


def test_p_must_exceed_two_for_nonlinear_flux():
    with pytest.raises(ConfigError, match="must exceed 2"):
        resolve_config({"coefficients": {"flux": "p_laplacian", "p": 2.0}})


def test_constructor_guards_surface_as_config_errors():
    with pytest.raises(ConfigError, match="coefficients"):
        resolve_config({"coefficients": {"flux": "custom", "c_lin": -2.0}})


def test_experiment_kind_typo_gets_suggestion():
    with pytest.raises(ConfigError, match="did you mean 'skeleton'"):
        resolve_config({"experiment": {"kind": "skelton"}})


def test_unknown_sigma_kind_suggested():
    with pytest.raises(ConfigError, match="sigma"):
        resolve_config({"coefficients": {"sigma": "multiplicative"}})


# -- exit codes and manifest ------------------------------------------------


def test_missing_config_flag_is_config_error(capsys):
    assert main(["skeleton"]) == 2
    assert "config" in capsys.readouterr().err


def test_unreadable_config_is_config_error(tmp_path, capsys):
    assert main(["skeleton", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_bad_toml_is_config_error(tmp_path, capsys):
    path = write_config(tmp_path, "= garbage\n")
    assert main(["skeleton", "--config", path]) == 2
    assert "config error" in capsys.readouterr().err


def test_no_experiment_selected(tmp_path, capsys):
    path = write_config(tmp_path, "[grid]\nn_interior = 4\n")
    assert main(["--config", path]) == 2
    assert "no experiment selected" in capsys.readouterr().err


def test_kind_from_config_used_without_subcommand(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, f"""
        [experiment]
        kind = "validate"
        [validation]
        sample_count = 2000
        [output]
        directory = "{out}"
    """)
    assert main(["--config", path]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "validate"
    assert manifest["status"] == "ok"
    assert (out / "validation.json").exists()


def test_skeleton_artifacts_and_manifest_digests(tmp_path):
    out = tmp_path / "run"
    path = write_config(tmp_path, """
        [grid]
        n_interior = 8
        [time]
        T = 0.5
        N = 10
        [control]
        kind = "sine"
        amplitude = 0.5
        [output]
        dump_interval = 5
    """)
    assert main(["skeleton", "--config", path, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["code_version"] == __version__
    assert manifest["error"] is None
    names = {o["path"] for o in manifest["outputs"]}
    assert names == {"skeleton_summary.csv", "skeleton_fields.csv",
                     "skeleton_diagnostics.json"}
    for entry in manifest["outputs"]:
        data = (out / entry["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == entry["sha256"]
    # dump interval 5 on 10 steps: rows at k = 0, 5, 10 plus header
    fields = (out / "skeleton_fields.csv").read_text().strip().split("\n")
    assert len(fields) == 4


def test_simulate_deterministic_across_worker_counts(tmp_path):
    path = write_config(tmp_path, SMALL_MC)
    digests = {}
    for workers, tag in ((1, "w1"), (3, "w3")):
        out = tmp_path / tag
        assert main(["simulate", "--config", path, "--out", str(out),
                     "--workers", str(workers)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        digests[tag] = {o["path"]: o["sha256"] for o in manifest["outputs"]}
        if workers == 1:
            hash_w1 = manifest["config_hash"]
        else:
            assert manifest["config_hash"] == hash_w1
            assert manifest["workers"] == 3
    assert digests["w1"] == digests["w3"]
    assert set(digests["w1"]) == {"ensemble_00.csv", "ensemble_01.csv",
                                  "simulate_summary.json"}


def test_seed_flag_overrides_base_seed(tmp_path):
    path = write_config(tmp_path, SMALL_MC)
    out = tmp_path / "seeded"
    assert main(["simulate", "--config", path, "--out", str(out),
                 "--seed", "42"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"]["base_seed"] == 42
    first = (out / "ensemble_00.csv").read_text().split("\n")[1].split(",")
    # path 0 seed is base_seed XOR 0
    assert first[1] == "42"


def test_workers_env_var_and_flag_priority(tmp_path, monkeypatch):
    path = write_config(tmp_path, SMALL_MC)
    monkeypatch.setenv("DNLSPDE_WORKERS", "2")
    out1 = tmp_path / "env"
    assert main(["simulate", "--config", path, "--out", str(out1)]) == 0
    assert json.loads((out1 / "manifest.json").read_text())["workers"] == 2
    out2 = tmp_path / "flag"
    assert main(["simulate", "--config", path, "--out", str(out2),
                 "--workers", "1"]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["workers"] == 1
    monkeypatch.setenv("DNLSPDE_WORKERS", "zero")
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "x")]) == 2


def test_ldp_run_writes_rate_and_ladder(tmp_path):
    out = tmp_path / "ldp"
    path = write_config(tmp_path, SMALL_MC + """
        [event]
        kind = "endpoint_ball"
        radius = 0.05
        target = "scaled_skeleton_endpoint"
        scale = 1.3
        [optimizer]
        n_control = 3
        gd_max_iter = 20
    """)
    code = main(["ldp", "--config", path, "--out", str(out)])
    assert code == 0
    stages = (out / "rate_stages.csv").read_text().strip().split("\n")
    assert stages[0] == "lambda,I,constraint_residual,converged"
    assert len(stages) == 1 + 4
    ladder = (out / "ldp_empirical.csv").read_text().strip().split("\n")
    assert ladder[0] == "epsilon,p_hat,ci_low,ci_high,eps2_log_p"
    assert len(ladder) == 1 + 2
    summary = json.loads((out / "ldp_summary.json").read_text())
    assert summary["converged"] is True
    assert summary["rate"] >= 0.0


def test_ldp_nonconverged_exits_one(tmp_path, capsys):
    # zero noise decouples the control from the dynamics, so no control
    # can steer the skeleton into a far-away ball
    out = tmp_path / "stuck"
    path = write_config(tmp_path, """
        [grid]
        n_interior = 4
        [time]
        T = 0.25
        N = 3
        [coefficients]
        sigma = "zero"
        [initial]
        kind = "sine"
        amplitude = 0.3
        [montecarlo]
        M_paths = 4
        eps_list = [0.5]
        [event]
        kind = "endpoint_ball"
        radius = 0.001
        target = "scaled_initial"
        scale = 10.0
        [optimizer]
        n_control = 3
        gd_max_iter = 5
    """)
    assert main(["ldp", "--config", path, "--out", str(out)]) == 1
    assert "feasibility" in capsys.readouterr().err
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "feasibility" in manifest["error"]
    # artifacts still written for post-mortem
    assert (out / "rate_stages.csv").exists()


def test_invariant_run_with_passing_dissipativity(tmp_path):
    out = tmp_path / "inv"
    path = write_config(tmp_path, SMALL_MC + """
        [invariant]
        T_long = 0.6
        window = 0.2
        dt = 0.05
        sample_count = 8
    """)
    assert main(["invariant", "--config", path, "--out", str(out)]) == 0
    diss = json.loads((out / "dissipativity.json").read_text())
    assert diss["passed"] is True
    bound = json.loads((out / "moment_bound.json").read_text())
    assert bound["passed"] is True
    occ = (out / "occupation.csv").read_text().strip().split("\n")
    assert occ[0] == "window_index,observable_id,average,discrepancy_prev"
    assert len(occ) == 1 + 3 * 5  # 3 windows x 5 observables


def test_invariant_skips_moment_bound_when_dissipativity_fails(tmp_path):
    out = tmp_path / "inv_fail"
    path = write_config(tmp_path, """
        [grid]
        n_interior = 4
        [coefficients]
        sigma = "linear"
        sigma_lipschitz = 1.0
        [initial]
        kind = "sine"
        amplitude = 0.3
        [invariant]
        T_long = 0.4
        window = 0.2
        dt = 0.1
        sample_count = 4
    """)
    with pytest.warns(UserWarning, match="dissipativity"):
        code = main(["invariant", "--config", path, "--out", str(out)])
    assert code == 0
    diss = json.loads((out / "dissipativity.json").read_text())
    assert diss["passed"] is False
    bound = json.loads((out / "moment_bound.json").read_text())
    assert "skipped" in bound
    assert (out / "occupation.csv").exists()


def test_convergence_rows(tmp_path):
    out = tmp_path / "conv"
    path = write_config(tmp_path, """
        [grid]
        n_interior = 6
        [time]
        T = 0.25
        N = 8
        [convergence]
        freqs = [1, 2, 4]
        [initial]
        kind = "sine"
        amplitude = 0.4
    """)
    assert main(["convergence", "--config", path, "--out", str(out)]) == 0
    rows = (out / "convergence.csv").read_text().strip().split("\n")
    assert rows[0] == "n,sup_b_deviation"
    assert len(rows) == 1 + 3
    assert all(float(r.split(",")[1]) >= 0 for r in rows[1:])


def test_console_entry_point_runs(tmp_path):
    path = write_config(tmp_path, "[validation]\nsample_count = 2000\n")
    out = tmp_path / "ep"
    proc = subprocess.run(
        [sys.executable, "-m", "dnlspde.cli", "validate", "--config", path,
         "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "validation.json").exists()


def test_rerun_is_byte_identical(tmp_path):
    path = write_config(tmp_path, SMALL_MC)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["simulate", "--config", path, "--out", str(out)]) == 0
        outs.append(out)
    for name in ("ensemble_00.csv", "ensemble_01.csv", "simulate_summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
