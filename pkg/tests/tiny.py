"""A pipeline configuration small enough to run end to end in a few seconds."""

from __future__ import annotations

from pathlib import Path

from evosearch.config import PipelineConfig, from_mapping

TINY = {
    "world": {"seed": 3, "n_entities": 200, "n_questions_1hop": 60, "n_questions_2hop": 30},
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "context_length": 512},
    "warmstart": {"steps": 8, "expert_only_steps": 4, "batch_size": 4},
    "rollout": {"max_new_tokens": 40, "group_size": 3},
    "grpo": {"steps_per_round": 3, "questions_per_step": 4, "checkpoint_every": 2},
    "opsd": {"pool_size": 3, "opsd_steps": 4, "validation_every": 2, "batch_size": 4},
    "pipeline": {"n_cycles": 1, "train_eval_questions": 10},
}


def tiny_config(out: Path, **dotted) -> PipelineConfig:
    cfg = from_mapping(TINY).replace(**{"pipeline.out_dir": str(out)})
    return cfg.replace(**dotted) if dotted else cfg
