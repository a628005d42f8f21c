import csv
import json
import subprocess
import sys
import time
from collections import defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcd import harness as H
from fedcd.cli import main

TINY = {
    "name": "tiny",
    "data": {
        "synthetic": {"schools": 3, "students_per_school": 8, "exercises": 20, "concepts": 3,
                      "school_ability_offsets": [-1.0, 0.0, 1.0], "logs_per_student": 12},
        "min_school_logs": 10,
    },
    "training": {"rounds": 2, "local_epochs": 1, "batch_size": 32},
    "seeds": [0, 1],
}


def tiny(**changes):
    values = json.loads(json.dumps(TINY))
    for dotted, v in changes.items():
        node = values
        *head, last = dotted.split("__")
        for p in head:
            node = node.setdefault(p, {})
        node[last] = v
    return values


def write_config(tmp_path, values, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(values))
    return path


def test_defaults():
    cfg = H.ExperimentConfig().validate()
    assert (cfg.strategy.gamma, cfg.training.rounds, cfg.training.local_epochs) == (0.1, 100, 5)
    assert (cfg.training.learning_rate, cfg.training.batch_size, cfg.model.dim) == (0.001, 128, None)
    assert cfg.seeds == [0, 1, 2, 3, 4]


@settings(max_examples=50)
@given(
    st.sampled_from(["full", "no_pdp", "none"]),
    st.sampled_from(["fairness_softmax", "uniform", "data_size", "attention"]),
    st.floats(0, 5), st.floats(0, 1), st.integers(1, 200),
    st.lists(st.integers(0, 99), min_size=1, max_size=5),
)
def test_config_roundtrip(mode, agg, gamma, dp, rounds, seeds):
    cfg = H.config_from_dict({
        "strategy": {"personalization": mode, "aggregator": agg, "gamma": gamma, "dp_scale": dp},
        "training": {"rounds": rounds}, "seeds": seeds,
    })
    again = H.parse_config(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_unknown_key_is_named():
    with pytest.raises(H.ConfigError, match="'training.epochz'"):
        H.config_from_dict({"training": {"epochz": 3}})
    with pytest.raises(H.ConfigError, match="'colour'"):
        H.config_from_dict({"colour": "red"})


@pytest.mark.parametrize("values, field", [
    ({"data": {"train_fraction": 1.0}}, "data.train_fraction"),
    ({"training": {"rounds": 0}}, "training.rounds"),
    ({"strategy": {"personalization": "partial"}}, "strategy"),
    ({"model": {"kind": "irt"}}, "model.kind"),
    ({"data": {"source": "files"}}, "data.log_file"),
])
def test_invalid_values_name_field(values, field):
    with pytest.raises(H.ConfigError, match=field):
        H.config_from_dict(values)


def test_overrides():
    values = H.apply_overrides({}, ["training.rounds=7", "strategy.aggregator=uniform", "seeds=[3]"])
    cfg = H.config_from_dict(values)
    assert (cfg.training.rounds, cfg.strategy.aggregator, cfg.seeds) == (7, "uniform", [3])


def test_dim_must_match_concepts():
    cfg = H.config_from_dict(tiny(model__dim=5))
    with pytest.raises(H.StageError) as e:
        H.run_seed(cfg, 0)
    assert e.value.stage == "train"


def test_run_experiment_files_and_reproducibility(tmp_path):
    cfg = H.config_from_dict(tiny())
    record = H.run_experiment(cfg, tmp_path / "a")
    assert sorted(record["reports"]) == ["0", "1"] and record["seeds"] == [0, 1]
    for s in (0, 1):
        seed_dir = tmp_path / "a" / f"seed_{s}"
        for name in ("report.json", "per_client.csv", "loss_trace.csv", "predictions.csv"):
            assert (seed_dir / name).is_file()
        trace = H.read_trace(seed_dir / "loss_trace.csv")
        assert len(trace) == 2 * 3
    # the record alone reproduces the run
    echoed = H.config_from_dict(json.loads((tmp_path / "a" / "run_record.json").read_text())["config"])
    again = H.run_experiment(echoed, tmp_path / "b")
    assert again["reports"] == record["reports"]
    for s in (0, 1):
        for name in ("report.json", "per_client.csv", "loss_trace.csv", "predictions.csv"):
            assert (tmp_path / "a" / f"seed_{s}" / name).read_bytes() == (tmp_path / "b" / f"seed_{s}" / name).read_bytes()


def test_concurrent_seeds_match_sequential(tmp_path):
    seq = H.run_experiment(H.config_from_dict(tiny()), tmp_path / "seq")
    par = H.run_experiment(H.config_from_dict(tiny(training__workers=2)), tmp_path / "par")
    assert seq["reports"] == par["reports"]


def test_centralized_run(tmp_path):
    record = H.run_experiment(H.config_from_dict(tiny(training__centralized=True)), tmp_path)
    report = record["reports"]["0"]
    assert len(report["per_client"]) == 3
    assert 0.0 <= report["pooled"]["acc"] <= 1.0


def test_predictions_roundtrip(tmp_path):
    res = H.run_seed(H.config_from_dict(tiny()), 0)
    H.write_predictions(tmp_path / "p.csv", res.records)
    back = H.read_predictions(tmp_path / "p.csv")
    for f in ("school", "student", "exercise", "label", "score"):
        assert getattr(back, f).tolist() == getattr(res.records, f).tolist()


def test_file_source_pipeline(tmp_path):
    assert main(["generate", "--config", str(write_config(tmp_path, TINY["data"]["synthetic"], "s.json")),
                 "--seed", "2", "--out", str(tmp_path / "d")]) == 0
    cfg = H.config_from_dict(tiny(data__source="files", data__log_file=str(tmp_path / "d" / "logs.csv"),
                                  data__qmatrix_file=str(tmp_path / "d" / "qmatrix.csv")))
    res = H.run_seed(cfg, 0)
    assert set(res.report.per_client) == {0, 1, 2}


def test_missing_file_reports_ingest_stage(tmp_path):
    cfg = H.config_from_dict(tiny(data__source="files", data__log_file=str(tmp_path / "nope.csv"),
                                  data__qmatrix_file=str(tmp_path / "nope_q.csv")))
    with pytest.raises(H.StageError) as e:
        H.run_seed(cfg, 0)
    assert e.value.stage == "ingest"


# --------------------------------------------------------------------------
# CLI


def test_cli_generate_files(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text((__import__("pathlib").Path(__file__).parents[1] / "configs" / "synthetic_spec.json").read_text())
    assert main(["generate", "--config", str(spec), "--seed", "5", "--out", str(tmp_path / "a")]) == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(tmp_path / "a" / n) for n in ("logs.csv", "qmatrix.csv", "latents.csv")]
    main(["generate", "--config", str(spec), "--seed", "5", "--out", str(tmp_path / "b")])
    for n in ("logs.csv", "qmatrix.csv", "latents.csv"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    counts = defaultdict(lambda: [0, 0])
    with open(tmp_path / "a" / "logs.csv", newline="") as f:
        for row in csv.DictReader(f):
            counts[row["school_id"]][0] += int(row["correct"])
            counts[row["school_id"]][1] += 1
    assert len(counts) == 4
    rates = [c / n for c, n in (counts[k] for k in sorted(counts, key=lambda s: int(s.removeprefix("school"))))]
    assert rates[0] < rates[1] and rates[0] < rates[2] and rates[1] < rates[3] and rates[2] < rates[3]


def test_cli_run_and_compare(tmp_path, capsys):
    cfg = write_config(tmp_path, tiny())
    assert main(["run", "--config", str(cfg), "--seeds", "0", "--set", "name=fedcd", "--out", str(tmp_path / "fedcd")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "fedcd" / "run_record.json")
    assert main(["run", "--config", str(cfg), "--seeds", "0", "--set", "name=fedavg",
                 "--set", "strategy.personalization=none", "--set", "strategy.aggregator=data_size",
                 "--out", str(tmp_path / "fedavg")]) == 0
    capsys.readouterr()

    assert main(["compare", str(tmp_path / "fedcd"), str(tmp_path / "fedavg" / "run_record.json")]) == 0
    text = capsys.readouterr().out
    table = H.parse_table(text)
    assert set(table["acc"]) == {"fedcd", "fedavg"}
    assert {"acc", "rmse", "auc", "gf", "doa", "acc_school_0", "acc_school_2"} <= set(table)
    rec = H.load_record(tmp_path / "fedcd")
    assert table["acc"]["fedcd"] == pytest.approx(rec["summary"]["acc"]["mean"], abs=5e-5)
    assert H.format_table(H.compare_records([rec, H.load_record(tmp_path / "fedavg")])) == text

    assert main(["compare", str(tmp_path / "fedcd"), "--out", str(tmp_path / "t.csv")]) == 0
    single = H.parse_table((tmp_path / "t.csv").read_text())
    assert all(list(v) == ["fedcd"] for v in single.values())


def test_compare_rejects_mismatched_data(tmp_path):
    a = H.run_experiment(H.config_from_dict(tiny(seeds=[0])), tmp_path / "a")
    b = H.run_experiment(H.config_from_dict(tiny(seeds=[0], data__train_fraction=0.7)), tmp_path / "b")
    with pytest.raises(ValueError, match="different data"):
        H.compare_records([a, b])


def test_cli_error_line(tmp_path, capsys):
    bad = write_config(tmp_path, {"training": {"epochz": 1}})
    assert main(["run", "--config", str(bad)]) != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["stage"] == "config" and "training.epochz" in err["error"]

    assert main(["compare", str(tmp_path / "missing")]) != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["stage"] == "compare"


def test_cli_module_entry_point(tmp_path):
    bad = write_config(tmp_path, {"seeds": []})
    proc = subprocess.run([sys.executable, "-m", "fedcd", "run", "--config", str(bad)],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert json.loads(proc.stderr.strip().splitlines()[-1])["stage"] == "config"


@pytest.mark.slow
def test_default_config_runtime(tmp_path):
    start = time.perf_counter()
    record = H.run_experiment(H.ExperimentConfig(), tmp_path)
    elapsed = time.perf_counter() - start
    assert len(record["reports"]) == 5
    assert elapsed < 300, f"default config took {elapsed:.0f}s"
