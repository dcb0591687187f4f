"""Self-evolution driver: warm start, then [GRPO -> pool -> pairs -> OPSD] x n_cycles.

Each stage reads only files written by earlier stages and writes its own
outputs atomically, so a run can be killed at a stage boundary and resumed
with identical downstream numbers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import serialize_trajectory
from .config import PipelineConfig, dump_config
from .environment import Corpus, Question, World, generate_world, load_world, save_world
from .grpo import grpo_round
from .model import Policy
from .opsd import DistillPair, mine_pairs, opsd_round
from .rollout import (
    PromptTemplate, RolloutConfig, collect_pool, evaluate_greedy, group_jobs, read_pool, run_rollouts, write_pool,
)
from .warmstart import warm_start

log = logging.getLogger(__name__)

METRICS_SCHEMA = {"schema": "metrics", "version": 1}


@dataclass(frozen=True)
class EvalReport:
    split: str
    em: float
    mean_n_srch: float
    mean_length: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(policy: Policy, questions: Sequence[Question], corpus: Corpus, rollout_cfg: RolloutConfig,
             split: str = "validation", templates: PromptTemplate = PromptTemplate(),
             dump: Path | None = None) -> EvalReport:
    """Greedy decoding through the same rollout loop; EM averaged over questions."""
    if not questions:
        raise ValueError("evaluation needs at least one question")
    recs = evaluate_greedy(questions, policy, corpus, rollout_cfg, templates)
    if dump is not None:
        dump_trajectories(dump, recs)
    return EvalReport(
        split=split,
        em=round(float(np.mean([r.reward for r in recs])), 6),
        mean_n_srch=round(float(np.mean([r.n_srch for r in recs])), 6),
        mean_length=round(float(np.mean([r.length for r in recs])), 6),
        n=len(recs),
    )


def sampled_reward(policy: Policy, questions: Sequence[Question], corpus: Corpus, rollout_cfg: RolloutConfig,
                   seed: int, templates: PromptTemplate = PromptTemplate()) -> float:
    """Mean reward of temperature sampling, one rollout per question."""
    recs = run_rollouts(policy, group_jobs(questions, seed, 1, templates), corpus, rollout_cfg, templates)
    return round(float(np.mean([r.reward for r in recs])), 6)


def dump_trajectories(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"# {r.question_id} reward={r.reward} n_srch={r.n_srch} length={r.length}\n")
            fh.write(serialize_trajectory(r.trajectory) + "\n\n")


def stage_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


class MetricsLog:
    """Line-delimited metric records; each stage owns one file, merged at the end."""

    def __init__(self, path: Path):
        self.path = path
        self.rows: list[dict] = []

    def add(self, row: dict) -> None:
        self.rows.append(row)

    def write(self) -> None:
        write_jsonl(self.path, [METRICS_SCHEMA] + self.rows)


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def write_pairs(path: Path, pairs: Sequence[DistillPair]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")
    tmp.replace(path)


def ensure_world(cfg: PipelineConfig) -> World:
    d = cfg.data_dir
    if not (d / "corpus.jsonl").exists():
        w = cfg.world
        world = generate_world(w.seed, w.n_entities, w.n_relations, w.n_questions_1hop, w.n_questions_2hop,
                               k=cfg.rollout.retriever_k)
        save_world(world, d)
    return load_world(d)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, dump_trajectories: bool = False):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.dump = dump_trajectories
        torch.set_num_threads(1)

    # stage helpers -------------------------------------------------------

    def _eval_row(self, policy: Policy, world: World, after: str, split: str = "validation") -> dict:
        questions = world.splits[split]
        dump = self.out / "trajectories" / f"{after.replace('/', '_')}_{split}.txt" if self.dump else None
        report = evaluate(policy, questions, world.corpus, self.cfg.rollout, split, self.cfg.templates, dump)
        return {"stage": "eval", "after": after, **report.to_dict()}

    def init_stage(self, world: World) -> Path:
        path = self.out / "init.ckpt"
        if self.cfg.pipeline.init_checkpoint:
            return Path(self.cfg.pipeline.init_checkpoint)
        if path.exists():
            return path
        seed = stage_seed(self.cfg.pipeline.seed, 0, 0)
        policy = Policy.initialize(self.cfg.model, seed=seed)
        history = warm_start(policy, world.train, world.corpus, self.cfg.warmstart, seed, self.cfg.templates)
        metrics = MetricsLog(self.out / "metrics" / "init.jsonl")
        for row in history:
            metrics.add(row)
        metrics.add(self._train_reward_row(policy, world, "init"))
        metrics.add(self._eval_row(policy, world, "init"))
        metrics.write()
        save_checkpoint(path, policy, meta={"stage": "init", "validation_em": metrics.rows[-1]["em"]})
        return path

    def _train_reward_row(self, policy: Policy, world: World, after: str) -> dict:
        n = min(self.cfg.pipeline.train_eval_questions, len(world.train))
        qs = world.train[:: max(1, len(world.train) // n)][:n]
        reward = sampled_reward(policy, qs, world.corpus, self.cfg.rollout, stage_seed(self.cfg.pipeline.seed, 9, 9),
                                self.cfg.templates)
        return {"stage": "train_reward", "after": after, "mean_reward": reward, "n": len(qs)}

    def grpo_stage(self, cycle: int, start: Path, world: World) -> Path:
        path = self.out / f"cycle{cycle}" / "grpo.ckpt"
        if path.exists():
            return path
        policy, _ = load_checkpoint(start)
        grpo_cfg = self.cfg.grpo
        if cycle > 1 and self.cfg.pipeline.later_grpo_steps:
            grpo_cfg = replace(grpo_cfg, steps_per_round=self.cfg.pipeline.later_grpo_steps)
        metrics = MetricsLog(self.out / "metrics" / f"cycle{cycle}_grpo.jsonl")
        ckpt_dir = self.out / f"cycle{cycle}" / "grpo_steps"

        def checkpoint(pol, opt, step):
            save_checkpoint(ckpt_dir / f"step{step}.ckpt", pol, opt, meta={"stage": "grpo", "cycle": cycle, "step": step})

        grpo_round(policy, world.train, world.corpus, grpo_cfg, self.cfg.rollout,
                   stage_seed(self.cfg.pipeline.seed, cycle, 1), self.cfg.templates,
                   on_step=metrics.add, checkpoint=checkpoint, dump_dir=self.out / "failures")
        metrics.add(self._train_reward_row(policy, world, f"cycle{cycle}/grpo"))
        row = self._eval_row(policy, world, f"cycle{cycle}/grpo")
        metrics.add(row)
        metrics.write()
        save_checkpoint(path, policy, meta={"stage": "grpo", "cycle": cycle, "validation_em": row["em"]})
        return path

    def pool_stage(self, cycle: int, start: Path, world: World) -> Path:
        pairs_path = self.out / f"cycle{cycle}" / "pairs.jsonl"
        pool_path = self.out / f"cycle{cycle}" / "pool.jsonl"
        if pairs_path.exists():
            return pool_path
        policy, _ = load_checkpoint(start)
        pool = collect_pool(world.train, policy, world.corpus, self.cfg.rollout, self.cfg.opsd.pool_size,
                            stage_seed(self.cfg.pipeline.seed, cycle, 2), self.cfg.templates)
        write_pool(pool_path, pool)
        pool = read_pool(pool_path)
        pairs = mine_pairs(pool, self.cfg.opsd.distance_mode)
        write_pairs(pairs_path, pairs)
        return pool_path

    def opsd_stage(self, cycle: int, start: Path, pool_path: Path, world: World) -> Path:
        path = self.out / f"cycle{cycle}" / "opsd.ckpt"
        if path.exists():
            return path
        policy, _ = load_checkpoint(start)
        pool = read_pool(pool_path)
        pairs = mine_pairs(pool, self.cfg.opsd.distance_mode)
        questions = {q.id: q for q in world.train}
        metrics = MetricsLog(self.out / "metrics" / f"cycle{cycle}_opsd.jsonl")
        metrics.add({"stage": "pool", "cycle": cycle, "n_questions": len(pool),
                     "n_records": sum(len(v) for v in pool.values()), "n_pairs": len(pairs),
                     "pool_mean_reward": round(float(np.mean([r.reward for v in pool.values() for r in v])), 6)})
        result = opsd_round(policy, pairs, questions, world.validation, world.corpus, self.cfg.opsd, self.cfg.rollout,
                            stage_seed(self.cfg.pipeline.seed, cycle, 3), self.cfg.templates,
                            on_validation=metrics.add)
        metrics.add(self._train_reward_row(result.policy, world, f"cycle{cycle}/opsd"))
        row = self._eval_row(result.policy, world, f"cycle{cycle}/opsd")
        row["selected_step"] = result.selected_step
        metrics.add(row)
        metrics.write()
        save_checkpoint(path, result.policy, meta={"stage": "opsd", "cycle": cycle, "validation_em": row["em"],
                                                   "selected_step": result.selected_step})
        return path

    # driver --------------------------------------------------------------

    def run(self, stop_after: str | None = None) -> dict:
        """Run every missing stage; ``stop_after`` (e.g. "cycle1/grpo") halts early for resume tests."""
        self.out.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, self.out / "config.yaml")
        current_stage = "world"
        try:
            world = ensure_world(self.cfg)
            current_stage = "init"
            ckpt = self.init_stage(world)
            if stop_after == "init":
                return {"checkpoint": str(ckpt)}
            for cycle in range(1, self.cfg.pipeline.n_cycles + 1):
                current_stage = f"cycle{cycle}/grpo"
                ckpt = self.grpo_stage(cycle, ckpt, world)
                if stop_after == current_stage:
                    return {"checkpoint": str(ckpt)}
                current_stage = f"cycle{cycle}/pool"
                pool_path = self.pool_stage(cycle, ckpt, world)
                current_stage = f"cycle{cycle}/opsd"
                ckpt = self.opsd_stage(cycle, ckpt, pool_path, world)
                if stop_after == current_stage:
                    return {"checkpoint": str(ckpt)}
            current_stage = "final"
            final_path = self.out / "metrics" / "final.jsonl"
            if not final_path.exists():
                policy, _ = load_checkpoint(ckpt)
                rows = [METRICS_SCHEMA, self._eval_row(policy, world, "final", "test")]
                write_jsonl(final_path, rows)
        except Exception as exc:
            failure = {"stage": current_stage, "error": type(exc).__name__, "message": str(exc),
                       "last_checkpoint": str(locals().get("ckpt", ""))}
            (self.out / "failure.json").write_text(json.dumps(failure, sort_keys=True) + "\n")
            raise
        merged = self.merge_metrics()
        return {"checkpoint": str(ckpt), "metrics": str(merged)}

    def stage_files(self) -> list[Path]:
        files = [self.out / "metrics" / "init.jsonl"]
        for cycle in range(1, self.cfg.pipeline.n_cycles + 1):
            files.append(self.out / "metrics" / f"cycle{cycle}_grpo.jsonl")
            files.append(self.out / "metrics" / f"cycle{cycle}_opsd.jsonl")
        files.append(self.out / "metrics" / "final.jsonl")
        return [f for f in files if f.exists()]

    def merge_metrics(self) -> Path:
        rows = [METRICS_SCHEMA]
        for f in self.stage_files():
            rows.extend(r for r in read_jsonl(f) if r.get("schema") != "metrics")
        path = self.out / "metrics.jsonl"
        write_jsonl(path, rows)
        return path


def run_pipeline(cfg: PipelineConfig, dump_trajectories: bool = False, stop_after: str | None = None) -> dict:
    return Pipeline(cfg, dump_trajectories).run(stop_after)
