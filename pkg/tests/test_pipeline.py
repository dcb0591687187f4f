from __future__ import annotations

import json

import pytest
import torch
import yaml

from tiny import TINY, tiny_config
from evosearch.checkpoint import load_checkpoint
from evosearch.cli import main
from evosearch.pipeline import read_jsonl, run_pipeline


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    result = run_pipeline(tiny_config(out))
    return out, result


def test_pipeline_layout_and_metrics(full_run):
    out, result = full_run
    for rel in ("config.yaml", "init.ckpt", "cycle1/grpo.ckpt", "cycle1/pool.jsonl", "cycle1/pairs.jsonl",
                "cycle1/opsd.ckpt", "cycle1/grpo_steps/step2.ckpt", "metrics.jsonl", "world/corpus.jsonl"):
        assert (out / rel).exists(), rel
    rows = read_jsonl(out / "metrics.jsonl")
    assert rows[0] == {"schema": "metrics", "version": 1}
    evals = [r["after"] for r in rows if r.get("stage") == "eval"]
    assert evals == ["init", "cycle1/grpo", "cycle1/opsd", "final"]
    assert [r["step"] for r in rows if r.get("stage") == "grpo"] == [0, 1, 2]
    final = [r for r in rows if r.get("after") == "final"][0]
    assert final["split"] == "test"
    assert result["checkpoint"].endswith("cycle1/opsd.ckpt")


def test_opsd_never_lowers_validation_em(full_run):
    out, _ = full_run
    rows = read_jsonl(out / "metrics.jsonl")
    em = {r["after"]: r["em"] for r in rows if r.get("stage") == "eval"}
    assert em["cycle1/opsd"] >= em["cycle1/grpo"]


def test_resume_matches_uninterrupted(full_run, tmp_path):
    out, _ = full_run
    cfg = tiny_config(tmp_path)
    run_pipeline(cfg, stop_after="cycle1/grpo")
    assert not (tmp_path / "cycle1" / "opsd.ckpt").exists()
    run_pipeline(cfg)
    assert (tmp_path / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()


def test_zero_opsd_steps_returns_grpo_checkpoint(tmp_path):
    run_pipeline(tiny_config(tmp_path, **{"opsd.opsd_steps": 0}))
    grpo, _ = load_checkpoint(tmp_path / "cycle1" / "grpo.ckpt")
    opsd, header = load_checkpoint(tmp_path / "cycle1" / "opsd.ckpt")
    assert header["meta"]["selected_step"] == 0
    assert all(torch.equal(grpo.params[k], opsd.params[k]) for k in grpo.params)


def test_failure_record_names_stage(tmp_path):
    cfg = tiny_config(tmp_path, **{"pipeline.init_checkpoint": str(tmp_path / "nope.ckpt")})
    with pytest.raises(Exception):
        run_pipeline(cfg)
    failure = json.loads((tmp_path / "failure.json").read_text())
    assert failure["stage"] == "cycle1/grpo"
    assert failure["error"] == "CheckpointError"


# command line ----------------------------------------------------------------

@pytest.fixture()
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_cli_pipeline_eval_inspect(tmp_path, tiny_yaml, capsys):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    assert main(["eval", "--config", str(tiny_yaml), "--out", str(out), "--checkpoint",
                 str(out / "cycle1" / "opsd.ckpt"), "--split", "test"]) == 0
    report = json.loads((out / "eval_test.json").read_text())
    assert set(report) == {"split", "em", "mean_n_srch", "mean_length", "n"} and report["split"] == "test"
    capsys.readouterr()
    pool = read_jsonl(out / "cycle1" / "pool.jsonl")
    qid = pool[0]["question_id"]
    number = qid.lstrip("q").lstrip("0")
    assert main(["inspect", "--pool", str(out / "cycle1" / "pool.jsonl"), "--question-id", number]) == 0
    text = capsys.readouterr().out
    assert text.startswith(f"== {qid}: 3 trajectories")
    assert main(["inspect", "--checkpoint", str(out / "init.ckpt")]) == 0
    assert "model_config" in capsys.readouterr().out


def test_cli_stage_commands(tmp_path, tiny_yaml):
    out = tmp_path / "stages"
    common = ["--config", str(tiny_yaml), "--out", str(out)]
    assert main(["gen-data", *common, "--out", str(out / "world")]) == 0
    assert main(["init", *common]) == 0
    assert main(["grpo", *common, "--checkpoint", str(out / "init.ckpt")]) == 0
    assert main(["opsd", *common, "--checkpoint", str(out / "grpo.ckpt")]) == 0
    assert (out / "opsd.ckpt").exists() and (out / "pairs.jsonl").exists()


def test_cli_exit_codes(tmp_path, tiny_yaml):
    assert main(["pipeline", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["pipeline", "--set", "grpo.unknown=1", "--out", str(tmp_path)]) == 2
    assert main(["pipeline", "--set", "grpo.clip_ratio=3", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["pipeline", "--no-such-flag"])
    assert exc.value.code == 2
    assert main(["eval", "--config", str(tiny_yaml), "--out", str(tmp_path), "--checkpoint",
                 str(tmp_path / "missing.ckpt")]) == 3
    assert main(["inspect", "--pool", str(tmp_path / "missing.jsonl")]) == 3
    assert main(["inspect"]) == 2
