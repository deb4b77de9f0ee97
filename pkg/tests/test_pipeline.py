import json
import shutil

import pytest
from click.testing import CliRunner
from hypothesis import given, strategies as st

from depflow import pipeline as P
from depflow.cli import main
from conftest import TINY


@given(st.integers(0, 10**6), st.text(min_size=1, max_size=12))
def test_stream_seed_stable_and_bounded(base, name):
    s = P.stream_seed(base, name)
    assert s == P.stream_seed(base, name) and 0 <= s < 2**31


def test_stream_seeds_separate_stages():
    assert len({P.stream_seed(0, s) for s in P.STAGES}) == len(P.STAGES)


def test_config_roundtrip_and_section_digests():
    cfg = P.ExperimentConfig.from_text(TINY)
    again = P.ExperimentConfig.from_text(cfg.to_text())
    assert all(cfg.section_digest(s) == again.section_digest(s) for s in P.STAGES)
    edited = P.ExperimentConfig.from_text(TINY.replace("detector.epochs = 1", "detector.epochs = 2"))
    changed = [s for s in P.STAGES if cfg.section_digest(s) != edited.section_digest(s)]
    assert changed == ["detector"]


def test_unknown_config_key():
    with pytest.raises(P.PreconditionError, match="dae.learning"):
        P.ExperimentConfig.from_text("dae.learning = 3\n")
    with pytest.raises(P.PreconditionError, match="nosuch"):
        P.ExperimentConfig.from_text("nosuch.x = 3\n")


def test_prerequisite_named(tmp_path):
    (tmp_path / "experiment.cfg").write_text(TINY)
    exp = P.Experiment.create(tmp_path)
    with pytest.raises(P.PreconditionError, match="dae"):
        P.run_stage("proto", exp)
    P.run_stage("world", exp)
    with pytest.raises(P.PreconditionError, match="dae"):
        P.run_stage("proto", exp)


def test_all_stages_and_reports(tiny_experiment):
    exp = tiny_experiment
    assert all(exp.done(s) for s in P.STAGES)
    for kind in P.REPORT_KINDS:
        body = json.loads((exp.path / "reports" / f"{kind}.json").read_text())
        assert body["kind"] == kind and body["seeds"]["experiment"] == 0
        assert set(body["digests"]) == set(P.STAGES)
        assert (exp.path / "reports" / f"{kind}.csv").read_text().startswith("metric,value")


def test_rerun_is_noop(tiny_experiment):
    exp = P.Experiment(tiny_experiment.path)
    before = (exp.path / "experiment.json").read_text()
    for s in P.STAGES:
        assert P.run_stage(s, exp)["skipped"]
    assert json.loads((exp.path / "experiment.json").read_text()) == json.loads(before)


def test_reproduce_verifies(tiny_experiment):
    res = P.reproduce(P.Experiment(tiny_experiment.path))
    assert res["verified"], res


def test_perturbed_config_flags_only_that_stage(tiny_experiment, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(tiny_experiment.path, dst)
    cfg = dst / "experiment.cfg"
    cfg.write_text(cfg.read_text().replace("report.sweep_base = 3", "report.sweep_base = 4"))
    exp = P.Experiment(dst)
    res = P.reproduce(exp)
    assert not res["verified"]
    assert [s for s in P.STAGES if res["stages"][s]["digest"] != "ok"] == ["report"]
    with pytest.raises(P.PreconditionError, match="--force"):
        P.run_stage("report", exp)


def test_missing_artifact_named(tiny_experiment, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(tiny_experiment.path, dst)
    (dst / "proto" / "bank.json").unlink()
    with pytest.raises(P.PreconditionError, match="proto/bank.json"):
        P.reproduce(P.Experiment(dst))


def test_cli_exit_codes(tiny_experiment, tmp_path):
    runner = CliRunner()
    root = tiny_experiment.path.parent
    ok = runner.invoke(main, ["reproduce", "--exp", "tiny", "--root", str(root)])
    assert ok.exit_code == 0, ok.output
    (tmp_path / "fresh").mkdir()
    (tmp_path / "fresh" / "experiment.cfg").write_text(TINY)
    bad = runner.invoke(main, ["run", "proto", "--exp", "fresh", "--root", str(tmp_path)])
    assert bad.exit_code == 2 and "dae" in bad.output
    unknown = runner.invoke(main, ["run", "nosuch", "--exp", "fresh", "--root", str(tmp_path)])
    assert unknown.exit_code == 2


def test_cli_world_gen(tmp_path):
    runner = CliRunner()
    cfg = tmp_path / "w.cfg"
    cfg.write_text("n_subjects = 6\nutterances_per_subject = 4\n")
    res = runner.invoke(main, ["world", "gen", "--config", str(cfg), "--out", str(tmp_path / "w"), "--seed", "1"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "w" / "manifest.jsonl").exists()


def test_cli_dae_encode_jsonl(tiny_experiment, tmp_path):
    out = tmp_path / "embeddings.jsonl"
    res = CliRunner().invoke(main, ["dae", "encode", "--ckpt", str(tiny_experiment.path / "dae" / "dae.pt"),
                                    "--manifest", str(tiny_experiment.path / "world" / "manifest.jsonl"),
                                    "--out", str(out)])
    assert res.exit_code == 0, res.output
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == json.loads(res.output)["n"]
    assert {"id", "subject", "d", "d_norm"} <= set(rows[0]) and len(rows[0]["d"]) == 32
