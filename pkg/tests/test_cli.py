import csv
import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from misscausal.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION, ConfigError, dump_config, load_run_config,
                            main, parse_config)
from misscausal.data import ColumnRoles, write_csv
from misscausal.simulate import generate, scenario_ii

ESTIMATE = """\
command: estimate
seed: 5
output:
  dir: out
  formats: [csv, json, text-table]
roster: [cc, tmle_a, ipw_a]
bootstrap: {b: 100}
estimate:
  input: data.csv
  columns: {outcome: y, exposure: a, observed: [lo], missing: [lm1, lm2]}
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("MISSCAUSAL_SEED", raising=False)
    monkeypatch.delenv("MISSCAUSAL_OUT", raising=False)
    d = generate(scenario_ii(n=500), seed=1)
    write_csv(d, tmp_path / "data.csv", ColumnRoles("y", "a", ("lo",), ("lm1", "lm2")))
    (tmp_path / "run.yaml").write_text(ESTIMATE)
    return tmp_path


def test_estimate_writes_all_formats(workdir):
    assert main(["--config", "run.yaml"]) == 0
    out = workdir / "out"
    assert sorted(p.name for p in out.iterdir()) == ["estimate.csv", "estimate.json", "estimate.txt"]
    rows = list(csv.DictReader((out / "estimate.csv").open()))
    assert [r["estimator"] for r in rows] == ["cc", "tmle_a", "ipw_a"]
    for r in rows:
        assert float(r["ci_low"]) < float(r["estimate"]) < float(r["ci_high"])
    payload = json.loads((out / "estimate.json").read_text())
    assert payload["n"] == 500 and payload["config"]["seed"] == 5
    assert "TMLE_A" in (out / "estimate.txt").read_text()


def test_difference_contrast(workdir):
    text = ESTIMATE.replace("columns:", "contrast: difference\n  columns:").replace("[cc, tmle_a, ipw_a]",
                                                                                  "[tmle_a]")
    (workdir / "c.yaml").write_text(text)
    assert main(["--config", "c.yaml", "--out", "cdir"]) == 0
    assert "E(Y^1) - E(Y^0)" in (workdir / "cdir" / "estimate.txt").read_text()


def test_precedence_config_env_flag(workdir):
    env = {"MISSCAUSAL_SEED": "7", "MISSCAUSAL_OUT": "envdir"}
    cfg = load_run_config(workdir / "run.yaml", env={})
    assert (cfg.seed, cfg.out) == (5, "out")
    cfg = load_run_config(workdir / "run.yaml", env=env)
    assert (cfg.seed, cfg.out) == (7, "envdir")
    cfg = load_run_config(workdir / "run.yaml", seed=9, out="flagdir", env=env)
    assert (cfg.seed, cfg.out) == (9, "flagdir")
    with pytest.raises(ConfigError):
        load_run_config(workdir / "run.yaml", env={"MISSCAUSAL_SEED": "x"})


@pytest.mark.parametrize("text, line, fragment", [
    ("command: estimate\nseed: -1\n", 2, "nonnegative"),
    ("command: simulate\nseed: 1\nbogus: 2\n", 3, "unknown key"),
    ("command: launch\n", 1, "must be one of"),
    (ESTIMATE.replace("[cc, tmle_a, ipw_a]", "[cc, tmle_z]"), 6, "unknown estimator"),
    (ESTIMATE.replace("b: 100", "b: 10"), 7, "at least 100"),
    (ESTIMATE.replace("text-table]", "xml]"), 5, "unknown output format"),
    ("command: simulate\nsimulate:\n  reps: 0\n  scenario: {scenario: I_MAR}\n", 3, "at least 1"),
    ("command: simulate\nsimulate:\n  scenario: {scenario: IV}\n", 3, "must be one of"),
    ("command: estimate\nseed: [\n", 3, "malformed YAML"),
    ("command: estimate\nseed: 1\nseed: 2\n", 3, "duplicate key"),
])
def test_config_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert fragment in str(err.value)
    assert str(err.value).startswith(f"line {line}:")


def test_exit_codes(workdir, capsys):
    (workdir / "bad.yaml").write_text("command: nope\n")
    assert main(["--config", "bad.yaml"]) == EXIT_CONFIG
    assert "line 1" in capsys.readouterr().err
    assert main(["--config", "missing.yaml"]) == EXIT_CONFIG
    (workdir / "gone.yaml").write_text(ESTIMATE.replace("data.csv", "absent.csv"))
    assert main(["--config", "gone.yaml"]) == EXIT_DATA
    (workdir / "bad.csv").write_text("y,a,lo,lm1,lm2\n,1,0,1,1\n")
    (workdir / "badrow.yaml").write_text(ESTIMATE.replace("data.csv", "bad.csv"))
    assert main(["--config", "badrow.yaml"]) == EXIT_DATA
    # nobody has the target exposure: estimation cannot proceed
    (workdir / "noa.csv").write_text("y,a,lo,lm1,lm2\n" + "1,0,0,1,1\n0,0,1,0,1\n" * 10)
    (workdir / "noa.yaml").write_text(ESTIMATE.replace("data.csv", "noa.csv"))
    assert main(["--config", "noa.yaml"]) == EXIT_ESTIMATION
    assert not (workdir / "out").exists()
    assert main(["--config", "run.yaml", "--threads", "-1"]) == EXIT_CONFIG


def test_failed_run_leaves_no_partial_outputs(workdir):
    (workdir / "noa.csv").write_text("y,a,lo,lm1,lm2\n" + "1,0,0,1,1\n" * 5)
    (workdir / "noa.yaml").write_text(ESTIMATE.replace("data.csv", "noa.csv").replace("[cc, tmle_a, ipw_a]",
                                                                                       "[ipw_a, tmle_a]"))
    assert main(["--config", "noa.yaml", "--out", "partial"]) != 0
    assert not (workdir / "partial").exists()


def test_simulate_command(workdir):
    (workdir / "sim.yaml").write_text(
        "command: simulate\nseed: 3\noutput: {dir: simout, formats: [csv]}\nbootstrap: {b: 0}\n"
        "roster: [cc, tmle_a]\nsimulate:\n  reps: 3\n  arms: [i]\n  scenario: {scenario: II_MNAR_A, n: 300}\n")
    assert main(["--config", "sim.yaml"]) == 0
    rows = list(csv.DictReader((workdir / "simout" / "simulation.csv").open()))
    assert [(r["estimator_id"], r["arm"]) for r in rows] == [("cc", "i"), ("tmle_a", "i")]
    assert all(r["reps"] == "3" for r in rows)


def test_replicate_table_smoke(workdir):
    (workdir / "rep.yaml").write_text(
        "command: replicate-table\nseed: 1\noutput: {dir: tab, formats: [text-table, csv]}\nbootstrap: {b: 0}\n"
        "imputation: {m: 2, max_sweeps: 2}\nsimulate:\n  reps: 2\n")
    assert main(["--config", "rep.yaml"]) == 0
    rows = list(csv.DictReader((workdir / "tab" / "replicate_table.csv").open()))
    assert len(rows) == 45
    table = (workdir / "tab" / "replicate_table.txt").read_text()
    for label in ("I_MAR", "II_MNAR_A", "III_MNAR_B", "TMLE-A", "TMLE-B", "IPW-B"):
        assert label in table


def test_config_round_trip_examples(workdir):
    for text in (ESTIMATE, "command: simulate\nsimulate:\n  scenario: {scenario: III_MNAR_B, n: 100}\n",
                 "command: replicate-table\nsimulate: {reps: 20}\n"):
        cfg = parse_config(text)
        assert parse_config(dump_config(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), b=st.sampled_from([100, 500, 1000]), m=st.integers(2, 30),
       roster=st.lists(st.sampled_from(["cc", "mi", "ice_a", "tmle_b", "ipw_b"]), min_size=1, max_size=4,
                       unique=True),
       contrast=st.sampled_from([None, "difference", "observed_vs_counterfactual"]),
       scheme=st.sampled_from(["simultaneous_block", "separate_block", "sequential_covariates"]),
       saturated=st.booleans())
def test_config_round_trip_property(seed, b, m, roster, contrast, scheme, saturated):
    doc = yaml.safe_load(ESTIMATE)
    doc.update(seed=seed, roster=roster, bootstrap={"b": b}, imputation={"m": m},
               models={"default": {"saturated": saturated}})
    doc["estimate"].update(contrast=contrast, scheme=scheme)
    cfg = parse_config(yaml.safe_dump(doc))
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_threads_do_not_change_estimate_outputs(workdir):
    outs = []
    for t in ("1", "2"):
        assert main(["--config", "run.yaml", "--out", "same", "--threads", t]) == 0
        outs.append((workdir / "same" / "estimate.csv").read_bytes())
    assert outs[0] == outs[1]
    vals = np.array([float(r["estimate"]) for r in csv.DictReader((workdir / "same" / "estimate.csv").open())])
    assert np.all(np.isfinite(vals))
