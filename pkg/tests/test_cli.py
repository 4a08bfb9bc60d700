import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from geocal import cli, federation
from geocal.config import ConfigError, ExperimentConfig, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMOKE = {
    "world": {"num_classes": 5, "dim": 8, "samples_per_class_domain": 20, "test_samples_per_class_domain": 10},
    "partition": {"scheme": "dirichlet_label_skew", "beta": 0.5, "num_clients": 3},
    "session": {"rounds": 1},
    "seeds": [0],
    "cells": [{"name": "uncalibrated", "calibration": False}],
}


def write_config(tmp_path, data, name="cfg.yaml", out="out"):
    data = {**data, "output_dir": str(tmp_path / out)}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# --- config --------------------------------------------------------------------------


def test_canonical_round_trip():
    cfg = ExperimentConfig.model_validate(SMOKE)
    again = ExperimentConfig.model_validate(yaml.safe_load(cfg.dump_yaml()))
    assert again == cfg
    assert again.dump_yaml() == cfg.dump_yaml()


@settings(max_examples=25, deadline=None)
@given(
    rounds=st.integers(0, 30),
    seeds=st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=4, unique=True),
    beta=st.floats(0.001, 10.0),
    lr=st.floats(0.0, 1.0),
    top_k=st.one_of(st.none(), st.integers(1, 8)),
)
def test_round_trip_property(rounds, seeds, beta, lr, top_k):
    raw = {
        **SMOKE,
        "session": {"rounds": rounds},
        "seeds": seeds,
        "partition": {**SMOKE["partition"], "beta": beta},
        "train": {"learning_rate": lr},
        "gpcl": {"top_k": top_k},
    }
    cfg = ExperimentConfig.model_validate(raw)
    assert ExperimentConfig.model_validate(yaml.safe_load(cfg.dump_yaml())) == cfg


@pytest.mark.parametrize(
    "patch",
    [
        {"sede": [0]},
        {"world": {"num_clases": 5}},
        {"train": {"learning_rate": 0.1, "lr": 0.1}},
        {"cells": [{"name": "x", "calibraton": True}]},
    ],
)
def test_unknown_keys_rejected(patch):
    with pytest.raises(ValueError):
        ExperimentConfig.model_validate({**SMOKE, **patch})


@pytest.mark.parametrize(
    "patch",
    [
        {"seeds": []},
        {"seeds": [1, 1]},
        {"seeds": [-1]},
        {"session": {"rounds": -1}},
        {"cells": [{"name": "a"}, {"name": "a"}]},
        {"partition": {"scheme": "dirichlet_label_skew", "beta": 0.0}},
        {"gpcl": {"top_k": 99}},
        {"cells": [{"name": "p", "prototypes": True}]},
        {"world": {"num_domains": 2, "domain_spread": [1.0]}},
    ],
)
def test_invalid_configs_rejected(patch):
    with pytest.raises(ValueError):
        ExperimentConfig.model_validate({**SMOKE, **patch})


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.yaml")):
        load_config(path)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seeds: [0\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_beta_sweep_expands_cells():
    cfg = ExperimentConfig.model_validate({**SMOKE, "betas": [0.5, 0.01], "cells": [{"name": "a"}, {"name": "b"}]})
    assert [(r.run_id, r.beta) for r in cfg.runs()] == [
        ("a-beta0.5", 0.5),
        ("b-beta0.5", 0.5),
        ("a-beta0.01", 0.01),
        ("b-beta0.01", 0.01),
    ]


def test_session_config_mapping():
    cfg = ExperimentConfig.model_validate(SMOKE)
    (run,) = cfg.runs()
    s = cfg.session_config(run, 0)
    assert s.calibration is False and s.rounds == 1 and s.world.num_classes == 5
    assert s.partition.beta == 0.5 and s.partition.seed == 0


# --- run ----------------------------------------------------------------------------


def test_missing_config_names_the_path(tmp_path, capsys):
    path = tmp_path / "missing.yaml"
    assert cli.main(["run", str(path)]) != 0
    assert str(path) in capsys.readouterr().err


def test_invalid_config_fails_before_running(tmp_path, capsys):
    path = write_config(tmp_path, {**SMOKE, "sessio": {}})
    assert cli.main(["run", str(path)]) == 2
    assert not (tmp_path / "out").exists()
    assert "sessio" in capsys.readouterr().err


def test_single_seed_single_round(tmp_path):
    path = write_config(tmp_path, SMOKE)
    assert cli.main(["--quiet", "run", str(path)]) == 0
    out = tmp_path / "out"
    rows = read_csv(out / "summary.csv")
    assert rows[0] == cli.SUMMARY_COLUMNS and len(rows) == 2
    assert (out / "COMPLETE").exists() and not (out / "INCOMPLETE").exists()
    first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "timings.jsonl"}
    assert cli.main(["--quiet", "run", str(path)]) == 0
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "timings.jsonl"}
    assert first == second


def test_round_csv_layout(tmp_path):
    path = write_config(tmp_path, {**SMOKE, "session": {"rounds": 3}})
    cli.main(["--quiet", "run", str(path)])
    rows = read_csv(tmp_path / "out" / "uncalibrated" / "seed_0" / "rounds.csv")
    assert rows[0] == cli.ROUND_COLUMNS + ["acc_domain_0"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    recs = federation.read_records(tmp_path / "out" / "uncalibrated" / "seed_0" / "rounds.jsonl")
    for row, rec in zip(rows[1:], recs):
        assert row[1] == f"{rec['accuracy']:.9g}" and row[3] == f"{rec['center_distance']:.9g}"


def test_every_cell_and_seed_has_all_rounds(tmp_path):
    data = {
        **SMOKE,
        "seeds": [3, 4],
        "session": {"rounds": 2},
        "cells": [{"name": "on"}, {"name": "off", "calibration": False}],
    }
    path = write_config(tmp_path, data)
    assert cli.main(["--quiet", "run", str(path)]) == 0
    for cell in ("on", "off"):
        for seed in (3, 4):
            rows = read_csv(tmp_path / "out" / cell / f"seed_{seed}" / "rounds.csv")
            assert len(rows) == 1 + 2
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert [r["run_id"] for r in summary] == ["on", "off"] and all(r["seeds"] == 2 for r in summary)


def test_single_cell_and_seed_override(tmp_path):
    data = {**SMOKE, "seeds": [0, 1], "cells": [{"name": "on"}, {"name": "off", "calibration": False}]}
    path = write_config(tmp_path, data)
    assert cli.main(["--quiet", "run", str(path), "--cell", "off", "--seed-override", "7"]) == 0
    out = tmp_path / "out"
    assert (out / "off" / "seed_7" / "rounds.csv").exists()
    assert not (out / "on").exists()
    assert (out / "INCOMPLETE").exists()
    assert yaml.safe_load((out / "config.yaml").read_text())["seeds"] == [7]
    assert cli.main(["run", str(path), "--cell", "nosuch"]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    path = write_config(tmp_path, SMOKE, out="nested/exp")
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["--quiet", "run", str(path)]) == 0
    assert (tmp_path / "root" / "exp" / "COMPLETE").exists()


def test_runtime_failure_leaves_incomplete_marker(tmp_path, monkeypatch, capsys):
    path = write_config(tmp_path, SMOKE)

    def broken(*a, **kw):
        raise federation.RoundError("client 0 failed in round 0: boom")

    monkeypatch.setattr(federation, "run_session", broken)
    assert cli.main(["--quiet", "run", str(path)]) == 1
    assert (tmp_path / "out" / "INCOMPLETE").exists()
    assert "boom" in capsys.readouterr().err
    assert cli.main(["report", str(tmp_path / "out")]) == 1


def test_validate_prints_canonical_form(tmp_path, capsys):
    path = write_config(tmp_path, SMOKE)
    assert cli.main(["validate", str(path)]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert ExperimentConfig.model_validate(printed) == load_config(path)
    bad = write_config(tmp_path, {**SMOKE, "extra": 1}, name="bad.yaml")
    assert cli.main(["validate", str(bad)]) == 2


# --- report ------------------------------------------------------------------------------


def test_report_on_empty_directory(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) != 0
    err = capsys.readouterr().err
    for name in cli.REPORT_FILES:
        assert name in err


def test_report_single_row_and_projection(tmp_path, capsys):
    path = write_config(tmp_path, SMOKE)
    cli.main(["--quiet", "run", str(path)])
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "out")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3  # header, rule, one data row
    assert lines[2].startswith("uncalibrated")
    proj = read_csv(tmp_path / "out" / "projection" / "uncalibrated_seed0.csv")
    n_test, classes = 5 * 10, 5
    assert len(proj) - 1 == n_test + 2 * classes
    kinds = [r[0] for r in proj[1:]]
    assert kinds.count("test") == n_test and kinds.count("mean") == classes and kinds.count("prompt") == classes


def test_report_projection_shares_basis_across_cells(tmp_path):
    data = {**SMOKE, "cells": [{"name": "on"}, {"name": "off", "calibration": False}]}
    cli.main(["--quiet", "run", str(write_config(tmp_path, data))])
    cli.main(["--quiet", "report", str(tmp_path / "out")])
    a = read_csv(tmp_path / "out" / "projection" / "on_seed0.csv")
    b = read_csv(tmp_path / "out" / "projection" / "off_seed0.csv")
    # test points and centers coincide; only the prompt rows differ
    assert [r for r in a if r[0] != "prompt"] == [r for r in b if r[0] != "prompt"]
    assert [r for r in a if r[0] == "prompt"] != [r for r in b if r[0] == "prompt"]


def test_beta_sweep_gap_grows_with_skew(tmp_path):
    # sampling noise of a 5-seed mean is larger than the step from beta=0.5 to 0.1,
    # so the trend is checked on 40 seeds
    data = yaml.safe_load((CONFIGS / "beta_sweep.yaml").read_text())
    data["seeds"] = list(range(40))
    assert data["betas"] == [0.5, 0.1, 0.01]
    path = write_config(tmp_path, data)
    assert cli.main(["--quiet", "run", str(path)]) == 0
    rows = {r["run_id"]: r for r in json.loads((tmp_path / "out" / "summary.json").read_text())}
    gaps = [rows[f"calibrated-beta{b:g}"]["accuracy_mean"] - rows[f"uncalibrated-beta{b:g}"]["accuracy_mean"] for b in data["betas"]]
    print("calibrated - uncalibrated accuracy by beta:", dict(zip(data["betas"], np.round(gaps, 4))))
    assert gaps[0] <= gaps[1] <= gaps[2]
