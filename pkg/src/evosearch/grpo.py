"""GRPO round: group-normalized advantages, clipped token-level surrogate, KL penalty."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import RolloutRecord, serialize_trajectory
from .environment import Corpus, Question
from .model import Adam, NonFiniteError, Policy, PolicySnapshot, backward
from .rollout import PromptTemplate, RolloutConfig, group_jobs, run_rollouts, student_prompt
from .sequences import build_batch, gather_token_logprobs, microbatches

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    clip_ratio: float = 0.2
    kl_coeff: float = 0.001
    steps_per_round: int = 200
    questions_per_step: int = 32
    lr: float = 3e-4
    # "round_start" compares against the policy entering the round, "old" against the per-step snapshot
    kl_reference: str = "round_start"
    checkpoint_every: int = 50
    max_batch_tokens: int = 16384
    degenerate_group_policy: str = "zero-advantage"

    def __post_init__(self):
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be non-negative")
        if self.kl_reference not in ("round_start", "old"):
            raise ValueError(f"unknown kl_reference {self.kl_reference!r}")
        if self.degenerate_group_policy != "zero-advantage":
            raise ValueError("only the zero-advantage policy is supported for degenerate groups")


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(R - mean) / population std; an all-equal group (including G=1) gets zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty reward group")
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def surrogate_terms(ratio: torch.Tensor, advantages: torch.Tensor, clip_ratio: float) -> torch.Tensor:
    clipped = ratio.clamp(1.0 - clip_ratio, 1.0 + clip_ratio)
    return torch.minimum(ratio * advantages, clipped * advantages)


def clipped_mask(ratio: torch.Tensor, advantages: torch.Tensor, clip_ratio: float) -> torch.Tensor:
    """Tokens whose objective takes the clipped branch strictly."""
    return ((advantages > 0) & (ratio > 1 + clip_ratio)) | ((advantages < 0) & (ratio < 1 - clip_ratio))


def grpo_loss(live: torch.Tensor, old: torch.Tensor, advantages: torch.Tensor, mask: torch.Tensor,
              clip_ratio: float = 0.2, n_tokens: int | None = None) -> tuple[torch.Tensor, dict]:
    """Negative token-mean of the clipped surrogate over masked positions.

    ``live``, ``old`` and ``advantages`` are aligned per position; ``n_tokens``
    overrides the normalizer when the batch is split into micro-batches.
    """
    if live.shape != old.shape or live.shape != mask.shape:
        raise ValueError(f"position sets differ: live {tuple(live.shape)}, old {tuple(old.shape)}, mask {tuple(mask.shape)}")
    denom = n_tokens if n_tokens is not None else int(mask.sum())
    if denom == 0:
        return live.sum() * 0.0, {"clip_fraction": 0.0, "n_tokens": 0, "n_clipped": 0}
    # masked-out positions get ratio 1 so that padding never produces inf * 0
    logratio = torch.where(mask, live - old, torch.zeros_like(live))
    ratio = logratio.exp()
    adv = advantages.to(live.dtype)
    terms = surrogate_terms(ratio, adv, clip_ratio)
    loss = -(terms * mask).sum() / denom
    n_clipped = int((clipped_mask(ratio.detach(), adv, clip_ratio) & mask).sum())
    return loss, {"clip_fraction": n_clipped / max(int(mask.sum()), 1), "n_tokens": int(mask.sum()),
                  "n_clipped": n_clipped}


def kl_terms(live: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """k(rho) = rho - 1 - log rho with rho = pi_ref / pi_live at the sampled token."""
    log_rho = ref - live
    return torch.expm1(log_rho) - log_rho


def kl_penalty(live: torch.Tensor, ref: torch.Tensor, mask: torch.Tensor, n_tokens: int | None = None) -> torch.Tensor:
    denom = n_tokens if n_tokens is not None else int(mask.sum())
    if denom == 0:
        return live.sum() * 0.0
    log_rho = torch.where(mask, ref - live, torch.zeros_like(live))
    return ((torch.expm1(log_rho) - log_rho) * mask).sum() / denom


@dataclass
class GroupBatch:
    question: Question
    records: list[RolloutRecord]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_records(cls, question: Question, records: list[RolloutRecord]) -> "GroupBatch":
        rewards = np.array([r.reward for r in records], dtype=np.float64)
        return cls(question, records, rewards, group_advantages(rewards))


def _prefix_and_masks(groups: Sequence[GroupBatch], templates: PromptTemplate):
    prefixes, trajs, masks, advs = [], [], [], []
    for g in groups:
        prompt = student_prompt(g.question, templates)
        for rec, adv in zip(g.records, g.advantages):
            prefixes.append(prompt)
            trajs.append(rec.trajectory.tokens)
            masks.append(rec.trajectory.policy_mask())
            advs.append(adv)
    return prefixes, trajs, masks, advs


def grpo_objective(policy: Policy, old: PolicySnapshot, ref: PolicySnapshot | None, groups: Sequence[GroupBatch],
                   cfg: GrpoConfig, templates: PromptTemplate = PromptTemplate(),
                   tensors: dict[str, torch.Tensor] | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    """Gradients of surrogate + beta * KL with respect to ``tensors`` (default: all base parameters).

    Micro-batches are accumulated so that the result equals the token-mean over
    the whole batch.
    """
    tensors = policy.params if tensors is None else tensors
    prefixes, trajs, masks, advs = _prefix_and_masks(groups, templates)
    total = int(sum(m.sum() for m in masks))
    stats = {"loss": 0.0, "surrogate": 0.0, "kl": 0.0, "n_clipped": 0, "n_tokens": total}
    grads = {k: torch.zeros_like(v) for k, v in tensors.items()}
    if total == 0:
        stats["clip_fraction"] = 0.0
        return grads, stats
    lengths = [len(p) + len(t) for p, t in zip(prefixes, trajs)]
    for idx in microbatches(lengths, cfg.max_batch_tokens):
        batch = build_batch([prefixes[i] for i in idx], [trajs[i] for i in idx], [masks[i] for i in idx],
                            [advs[i] for i in idx])
        with torch.no_grad():
            old_lp = gather_token_logprobs(old.logprobs(batch.tokens), batch.tokens)
            ref_lp = None
            if ref is not None and cfg.kl_coeff > 0:
                ref_lp = gather_token_logprobs(ref.logprobs(batch.tokens), batch.tokens)
        live_lp = gather_token_logprobs(policy.logprobs(batch.tokens), batch.tokens)
        surrogate, st = grpo_loss(live_lp, old_lp, batch.weights, batch.mask, cfg.clip_ratio, n_tokens=total)
        kl = kl_penalty(live_lp, ref_lp if ref_lp is not None else old_lp, batch.mask, n_tokens=total)
        loss = surrogate + cfg.kl_coeff * kl
        if not torch.isfinite(loss):
            raise NumericFailure(f"non-finite GRPO loss in micro-batch of {len(idx)} sequences")
        for k, g in backward(loss, tensors).items():
            grads[k] += g
        stats["loss"] += float(loss.detach())
        stats["surrogate"] += float(surrogate.detach())
        stats["kl"] += float(kl.detach())
        stats["n_clipped"] += st["n_clipped"]
    stats["clip_fraction"] = stats["n_clipped"] / total
    return grads, stats


@dataclass
class RoundResult:
    policy: Policy
    metrics: list[dict]


def _dump_batch(path: Path, groups: Sequence[GroupBatch]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            for rec, adv in zip(g.records, g.advantages):
                fh.write(json.dumps({"question_id": rec.question_id, "advantage": float(adv), "reward": rec.reward,
                                     "trajectory_text": serialize_trajectory(rec.trajectory)}) + "\n")


def grpo_round(
    policy: Policy,
    questions: Sequence[Question],
    corpus: Corpus,
    cfg: GrpoConfig,
    rollout_cfg: RolloutConfig,
    seed: int,
    templates: PromptTemplate = PromptTemplate(),
    on_step: Callable[[dict], None] | None = None,
    checkpoint: Callable[[Policy, Adam, int], None] | None = None,
    dump_dir: Path | None = None,
) -> RoundResult:
    """Run ``cfg.steps_per_round`` GRPO updates in place on ``policy``."""
    if not questions:
        raise ValueError("GRPO round needs training questions")
    for t in policy.params.values():
        t.requires_grad_(True)
    ref = policy.snapshot() if cfg.kl_reference == "round_start" else None
    opt = Adam(cfg.lr)
    metrics = []
    for step in range(cfg.steps_per_round):
        rng = np.random.default_rng([seed, step])
        n = min(cfg.questions_per_step, len(questions))
        picked = [questions[int(i)] for i in np.sort(rng.choice(len(questions), size=n, replace=False))]
        old = policy.snapshot()
        records = run_rollouts(old_policy_view(policy), group_jobs(picked, int(rng.integers(2**31)), rollout_cfg.group_size, templates),
                               corpus, rollout_cfg, templates)
        groups = []
        for j, q in enumerate(picked):
            groups.append(GroupBatch.from_records(q, records[j * rollout_cfg.group_size:(j + 1) * rollout_cfg.group_size]))
        try:
            grads, st = grpo_objective(policy, old, ref if ref is not None else old, groups, cfg, templates)
        except (NumericFailure, NonFiniteError) as exc:
            if dump_dir is not None:
                _dump_batch(Path(dump_dir) / f"grpo_failure_step{step}.jsonl", groups)
            raise NumericFailure(f"step {step}: {exc}") from exc
        opt.step(policy.params, grads)
        rewards = np.concatenate([g.rewards for g in groups])
        advs = np.concatenate([g.advantages for g in groups])
        row = {
            "stage": "grpo",
            "step": step,
            "mean_reward": round(float(rewards.mean()), 6),
            "loss": round(st["loss"], 6),
            "kl": round(st["kl"], 8),
            "clip_fraction": round(st["clip_fraction"], 6),
            "mean_n_srch": round(float(np.mean([r.n_srch for r in records])), 6),
            "mean_abs_advantage": round(float(np.abs(advs).mean()), 6),
            "mean_length": round(float(np.mean([r.length for r in records])), 3),
        }
        metrics.append(row)
        log.info("grpo step %d reward %.3f n_srch %.2f loss %.4f", step, row["mean_reward"], row["mean_n_srch"], row["loss"])
        if on_step is not None:
            on_step(row)
        if checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint(policy, opt, step + 1)
    for t in policy.params.values():
        t.requires_grad_(False)
    return RoundResult(policy, metrics)


def old_policy_view(policy: Policy) -> Policy:
    """Detached view of the live tensors for sampling (no autograd graph while decoding)."""
    return Policy(policy.cfg, {k: v.detach() for k, v in policy.params.items()}, policy.adapters)
