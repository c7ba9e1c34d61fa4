import csv
import json
import re

import numpy as np
import pytest

from ecgunlearn import cli
from ecgunlearn.harness.config import ConfigError, ExperimentConfig, config_from_dict, parse_config
from ecgunlearn.harness.pipeline import STAGE_NAMES, Pipeline, StageError
from ecgunlearn.harness.report import (
    CURVE_COLUMNS,
    ReportMetrics,
    emit_report,
    histogram_counts,
    histogram_svg,
)

TINY_RAW = {"data": {"n_patients": 8, "n_leads": 3}, "target": {"records": 2, "finetune_records": 1},
            "model": {"stage_blocks": [1, 1], "stage_channels": [4, 8]},
            "train": {"epochs": 2}, "finetune": {"epochs": 1}, "unlearn": {"epochs": 1},
            "gkt": {"rounds": 2, "student_steps": 1, "pseudo_batch": 8}}


def tiny_cfg(out, **over):
    cfg = config_from_dict({**TINY_RAW, **over})
    cfg.out = str(out)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pipe = Pipeline(tiny_cfg(out))
    pipe.run_all()
    return pipe


# config --------------------------------------------------------------------------------

def test_defaults_validate():
    cfg = config_from_dict(None)
    assert cfg.seed == 0 and cfg.task == "binary" and cfg.n_classes == 2
    assert cfg.attack_config().epsilon == 0.001
    assert cfg.model_config().in_leads == cfg.data.n_leads == 12


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match=r"unknown key 'attack\.epslon'"):
        config_from_dict({"attack": {"epslon": 0.1}})


def test_negative_epsilon_names_attack_config():
    with pytest.raises(ConfigError, match="attack: .*AttackConfig"):
        config_from_dict({"attack": {"epsilon": -0.1}})


@pytest.mark.parametrize("raw, msg", [
    ({"task": "multiclass"}, "task"),
    ({"data": {"train_fraction": 1.0}}, "data"),
    ({"target": {"records": 2, "finetune_records": 2}}, "target"),
    ({"train": {"epochs": "ten"}}, "train.epochs"),
    ({"finetune": {"bn_stats": 1}}, "finetune.bn_stats"),
    ({"gkt": {"epsilon_f": 1.5}}, "unlearn"),
    ({"audit": {"bins": 0}}, "audit"),
    ({"attack": {"physical_range": [0.0]}}, "physical_range"),
])
def test_config_range_errors(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(raw)


def test_yaml_syntax_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: 1\nattack:\n  epsilon: [0.1\n  iterations: 3\n")
    with pytest.raises(ConfigError, match=r"line \d+"):
        parse_config(p)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        parse_config(tmp_path / "list.yaml")


def test_yaml_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 7\nattack:\n  label_source: prediction\n  alpha: null\n")
    cfg = parse_config(p)
    assert cfg.seed == 7 and cfg.attack.alpha is None and cfg.attack.label_source == "prediction"
    assert cfg.train == ExperimentConfig().train


# report ------------------------------------------------------------------------------

def test_empty_curves_write_header_only(tmp_path):
    paths = emit_report(ReportMetrics(), tmp_path)
    assert (tmp_path / "curves.csv").read_text() == ",".join(CURVE_COLUMNS) + "\n"
    assert not list(tmp_path.glob("*.svg")) and len(paths) == 1


def test_histogram_svg_counts_and_bytes():
    rng = np.random.default_rng(0)
    samples = {"a": rng.exponential(size=50), "b": rng.exponential(size=30) + 1}
    svg = histogram_svg(samples, "t", bins=10)
    assert svg == histogram_svg(samples, "t", bins=10)
    _, counts = histogram_counts(samples, 10)
    for name in samples:
        bars = [int(c) for c in re.findall(rf'data-series="{name}" data-bin="\d+" data-count="(\d+)"', svg)]
        assert bars == counts[name].tolist() and sum(bars) == len(samples[name])


def test_report_histogram_recounts_from_loss_csv(tiny_run):
    rep = tiny_run.path("report")
    losses = {}
    for model in ("personalized", "unlearned"):
        with open(rep / f"audit_{model}_losses.csv") as fh:
            losses[model] = [float(r["loss"]) for r in csv.DictReader(fh)
                             if r["split"] == "forget" and r["model"] == model]
    _, counts = histogram_counts(losses)
    svg = (rep / "hist_forget_personalized_vs_unlearned.svg").read_text()
    for name, c in counts.items():
        bars = [int(v) for v in re.findall(rf'data-series="{name}" data-bin="\d+" data-count="(\d+)"', svg)]
        assert bars == c.tolist()


def test_report_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="not writable"):
        emit_report(ReportMetrics(), blocker / "sub")


# pipeline ---------------------------------------------------------------------------------

def test_tiny_run_outputs(tiny_run):
    man = json.loads(tiny_run.path("manifest.json").read_text())
    assert set(man["stages"]) == set(STAGE_NAMES)
    assert "timings.json" in json.dumps(man)
    for name in STAGE_NAMES:
        assert tiny_run.is_current(name)
    for model in ("general", "personalized", "baseline", "unlearned", "gkt_student"):
        assert tiny_run.path(f"models/{model}.ckpt").exists()
    rows = list(csv.DictReader(tiny_run.path("report/summary.csv").open()))
    assert [r["model"] for r in rows][:2] == ["generalized", "personalized"]


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    other = Pipeline(tiny_cfg(tmp_path))
    other.run_all()
    for rel in ["manifest.json", "report/summary.csv", "report/loss_curve.svg", "tables/attack.csv",
                "report/hist_test_general_vs_unlearned.svg", "models/unlearned.ckpt"]:
        assert tiny_run.path(rel).read_bytes() == other.path(rel).read_bytes(), rel


def test_resume_runs_only_stale_stages(tmp_path):
    pipe = Pipeline(tiny_cfg(tmp_path))
    pipe.run_all()
    before = {n: pipe._record_path(n).stat().st_mtime_ns for n in STAGE_NAMES}
    pipe.path("models/baseline.ckpt").unlink()
    assert not pipe.is_current("baseline") and not pipe.is_current("audit")
    assert pipe.is_current("unlearn-gkt")
    pipe.run_all()
    after = {n: pipe._record_path(n).stat().st_mtime_ns for n in STAGE_NAMES}
    rerun = {n for n in STAGE_NAMES if after[n] != before[n]}
    # the regenerated baseline is byte-identical, so its dependents stay current
    assert rerun == {"baseline"}


def test_config_change_invalidates_dependents(tmp_path):
    Pipeline(tiny_cfg(tmp_path)).run_all()
    pipe = Pipeline(tiny_cfg(tmp_path, audit={"bins": 10}))
    assert pipe.is_current("unlearn-finetune") and not pipe.is_current("audit")


def test_stage_error_names_stage(tmp_path):
    pipe = Pipeline(tiny_cfg(tmp_path, target={"patient_id": "NOPE", "records": 2, "finetune_records": 1}))
    with pytest.raises(StageError, match="stage gen-data failed"):
        pipe.run("gen-data")


# cli ------------------------------------------------------------------------------------

def test_cli_config_error(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("attack:\n  epslon: 0.1\n")
    assert cli.main(["attack", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "unknown key 'attack.epslon'" in capsys.readouterr().err


def test_cli_stage_failure(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("target:\n  patient_id: NOPE\n  records: 2\n  finetune_records: 1\n")
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "stage gen-data failed" in capsys.readouterr().err


def test_cli_single_stage(tmp_path, capsys):
    import yaml
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(TINY_RAW))
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["stage"] == "train"
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["seed"] == 3 and set(man["stages"]) == {"gen-data", "train"}


def test_cli_parser_routes():
    args = cli.build_parser().parse_args(["unlearn", "--route", "gkt"])
    assert cli.stage_for(args) == "unlearn-gkt"
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["unlearn", "--route", "retrain"])
