"""On-policy self-distillation round.

The policy is its own teacher: with adapters disabled and a prompt that
exposes a correct, search-efficient sibling trajectory, it scores every
position of a contrasting sibling; the adapter-active student, conditioned
only on the question, is pulled toward those rows by a clipped forward KL.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .codec import RolloutRecord, serialize_trajectory, trajectory_distance
from .environment import Corpus, Question, exact_match
from .model import Adam, AdapterSet, Policy, backward, merge_adapters
from .rollout import PromptTemplate, RolloutConfig, evaluate_greedy, student_prompt
from .codec import BOS, DEFAULT_VOCAB, encode
from .sequences import build_batch, microbatches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OpsdConfig:
    pool_size: int = 8
    tau_clip: float = 10.0
    adapter_rank: int = 4
    adapter_alpha: float = 8.0
    lr: float = 1e-4
    batch_size: int = 16
    opsd_steps: int = 300
    validation_every: int = 50
    distance_mode: str = "full"
    max_batch_tokens: int = 16384
    include_round_start_checkpoint: bool = True

    def __post_init__(self):
        if self.pool_size < 2:
            raise ValueError("pool_size must be at least 2")
        if not self.tau_clip > 0:
            raise ValueError("tau_clip must be positive")
        if not self.include_round_start_checkpoint:
            raise ValueError("the round-start candidate is always included")


@dataclass(frozen=True)
class DistillPair:
    question_id: str
    reference: RolloutRecord
    student: RolloutRecord
    distance: int

    def to_json(self) -> str:
        return json.dumps({
            "question_id": self.question_id,
            "ref_text": self.reference.text,
            "stu_text": self.student.text,
            "ref_n_srch": self.reference.n_srch,
            "stu_reward": self.student.reward,
            "char_distance": self.distance,
        }, sort_keys=True)


def mine_pair(records: Sequence[RolloutRecord], distance_mode: str = "full") -> DistillPair | None:
    """Pick (reference, student) from one question's pool, or None to discard.

    Reference: correct record with fewest searches, then shortest, then lowest
    index. Student: the incorrect record farthest from the reference in edit
    distance; without incorrect records, the farthest remaining correct one.
    """
    correct = [i for i, r in enumerate(records) if r.reward == 1]
    if not correct:
        return None
    ref_i = min(correct, key=lambda i: (records[i].n_srch, records[i].length, i))
    wrong = [i for i, r in enumerate(records) if r.reward != 1]
    candidates = wrong if wrong else [i for i in correct if i != ref_i]
    if not candidates:
        return None
    ref = records[ref_i]
    dists = {i: trajectory_distance(ref.trajectory, records[i].trajectory, distance_mode) for i in candidates}
    stu_i = min(candidates, key=lambda i: (-dists[i], i))
    return DistillPair(ref.question_id, ref, records[stu_i], dists[stu_i])


def mine_pairs(pool: dict[str, list[RolloutRecord]], distance_mode: str = "full") -> list[DistillPair]:
    pairs = []
    for qid in pool:
        pair = mine_pair(pool[qid], distance_mode)
        if pair is not None:
            pairs.append(pair)
    return pairs


def build_prompts(question: Question, reference: RolloutRecord | str,
                  templates: PromptTemplate = PromptTemplate()) -> tuple[list[int], list[int]]:
    """Student prompt (instruction + question) and privileged teacher prompt.

    Both end right before the first trajectory token, so position p of the
    student trajectory sits at ``len(P_S) + p`` and ``len(P_T) + p``.
    """
    ref_text = reference if isinstance(reference, str) else serialize_trajectory(reference.trajectory)
    p_s = student_prompt(question, templates)
    body = templates.instruction + question.text + "\n" + templates.privileged_preamble
    tail = templates.retry_cue
    p_t = [DEFAULT_VOCAB.id(BOS)] + encode(body, DEFAULT_VOCAB) + encode(ref_text, DEFAULT_VOCAB) + encode(tail, DEFAULT_VOCAB)
    return p_s, p_t


def clipped_forward_kl(teacher_logprobs: torch.Tensor, student_logprobs: torch.Tensor,
                       tau_clip: float = 10.0) -> torch.Tensor:
    """Per-row sum over the vocabulary of min(P_t log(P_t / P_s), tau_clip)."""
    p_t = teacher_logprobs.exp()
    # 0 * log 0 is 0; keeps -inf teacher entries from producing nan
    terms = torch.where(p_t > 0, p_t * (teacher_logprobs - student_logprobs), torch.zeros_like(p_t))
    if math.isfinite(tau_clip):
        terms = torch.clamp(terms, max=tau_clip)
    return terms.sum(-1)


@dataclass
class PreparedPair:
    pair: DistillPair
    p_s: list[int]
    p_t: list[int]


def prepare_pairs(pairs: Sequence[DistillPair], questions: dict[str, Question], context_length: int,
                  templates: PromptTemplate = PromptTemplate()) -> tuple[list[PreparedPair], dict]:
    kept, skipped_context, skipped_empty = [], 0, 0
    for pair in pairs:
        p_s, p_t = build_prompts(questions[pair.question_id], pair.reference, templates)
        traj = pair.student.trajectory
        if not traj.distill_positions:
            skipped_empty += 1
            continue
        if len(p_t) + len(traj.tokens) > context_length:
            skipped_context += 1
            continue
        kept.append(PreparedPair(pair, p_s, p_t))
    if skipped_context or skipped_empty:
        log.info("opsd: skipped %d pairs over context, %d with no distill positions", skipped_context, skipped_empty)
    return kept, {"skipped_context": skipped_context, "skipped_empty": skipped_empty}


def opsd_objective(policy: Policy, prepared: Sequence[PreparedPair], tau_clip: float,
                   tensors: dict[str, torch.Tensor], max_batch_tokens: int = 16384) -> tuple[dict, float]:
    """Gradients of the mean (over pairs) of the per-pair OPSD loss.

    The teacher pass runs with adapters disabled and without gradient; the
    student pass runs with the live adapters.
    """
    grads = {k: torch.zeros_like(v) for k, v in tensors.items()}
    total = 0.0
    n = len(prepared)
    if n == 0:
        return grads, 0.0
    lengths = [len(pp.p_t) + len(pp.pair.student.trajectory.tokens) for pp in prepared]
    for idx in microbatches(lengths, max_batch_tokens):
        loss = opsd_loss_batch(policy, [prepared[i] for i in idx], tau_clip) * (len(idx) / n)
        for k, g in backward(loss, tensors).items():
            grads[k] += g
        total += float(loss.detach())
    return grads, total


def opsd_loss_batch(policy: Policy, prepared: Sequence[PreparedPair], tau_clip: float) -> torch.Tensor:
    """Mean over the given pairs of (1/|R|) sum_p sum_v min(P_t log(P_t/P_s), tau_clip)."""
    trajs = [pp.pair.student.trajectory.tokens for pp in prepared]
    masks = [pp.pair.student.trajectory.distill_mask() for pp in prepared]
    tch = build_batch([pp.p_t for pp in prepared], trajs, masks)
    stu = build_batch([pp.p_s for pp in prepared], trajs, masks)
    with torch.no_grad():
        t_rows = policy.logprobs(tch.tokens, adapters=False)
    s_rows = policy.logprobs(stu.tokens, adapters=True)
    losses = []
    for b in range(len(prepared)):
        t_sel = t_rows[b, :-1][tch.mask[b]]
        s_sel = s_rows[b, :-1][stu.mask[b]]
        losses.append(clipped_forward_kl(t_sel, s_sel, tau_clip).mean())
    return torch.stack(losses).mean()


def opsd_loss(pair: PreparedPair, policy: Policy, tau_clip: float = 10.0) -> torch.Tensor:
    return opsd_loss_batch(policy, [pair], tau_clip)


def validation_em(policy: Policy, questions: Sequence[Question], corpus: Corpus, rollout_cfg: RolloutConfig,
                  templates: PromptTemplate = PromptTemplate()) -> float:
    if not questions:
        return 0.0
    recs = evaluate_greedy(questions, policy, corpus, rollout_cfg, templates)
    return float(np.mean([r.reward for r in recs]))


@dataclass
class OpsdResult:
    policy: Policy
    metrics: list[dict]
    selected_step: int
    best_em: float


def opsd_round(
    policy: Policy,
    pairs: Sequence[DistillPair],
    questions: dict[str, Question],
    validation: Sequence[Question],
    corpus: Corpus,
    cfg: OpsdConfig,
    rollout_cfg: RolloutConfig,
    seed: int,
    templates: PromptTemplate = PromptTemplate(),
    on_validation: Callable[[dict], None] | None = None,
) -> OpsdResult:
    """Train adapters on the pairs, keep the best-validation-EM candidate, merge it."""
    base = {k: v.detach().clone() for k, v in policy.params.items()}
    prepared, skipped = prepare_pairs(pairs, questions, policy.cfg.context_length, templates)
    start_em = validation_em(Policy(policy.cfg, base), validation, corpus, rollout_cfg, templates)
    metrics = [{"stage": "opsd", "step": 0, "validation_em": round(start_em, 6), "loss": None,
                "n_pairs": len(prepared), **skipped}]
    if on_validation is not None:
        on_validation(metrics[-1])
    if not prepared or cfg.opsd_steps == 0:
        return OpsdResult(Policy(policy.cfg, base), metrics, 0, start_em)

    adapters = AdapterSet.create(policy.cfg, cfg.adapter_rank, cfg.adapter_alpha, seed=seed, dtype=policy.dtype)
    adapters.requires_grad_(True)
    student = Policy(policy.cfg, base, adapters)
    tensors = adapters.tensors()
    opt = Adam(cfg.lr)
    rng = np.random.default_rng(seed)
    order: list[int] = []
    best = (start_em, 0, None)
    running = []
    for step in range(1, cfg.opsd_steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(int(i) for i in rng.permutation(len(prepared)))
        batch = [prepared[i] for i in order[:cfg.batch_size]]
        del order[:cfg.batch_size]
        grads, loss = opsd_objective(student, batch, cfg.tau_clip, tensors, cfg.max_batch_tokens)
        opt.step(tensors, grads)
        running.append(loss)
        if step % cfg.validation_every == 0 or step == cfg.opsd_steps:
            em = validation_em(student, validation, corpus, rollout_cfg, templates)
            row = {"stage": "opsd", "step": step, "validation_em": round(em, 6),
                   "loss": round(float(np.mean(running)), 6), "n_pairs": len(prepared), **skipped}
            running = []
            metrics.append(row)
            log.info("opsd step %d loss %.4f validation EM %.4f", step, row["loss"], em)
            if on_validation is not None:
                on_validation(row)
            if em > best[0]:
                best = (em, step, adapters.clone())
    best_em, best_step, best_adapters = best
    if best_adapters is None:
        merged = base
    else:
        best_adapters.requires_grad_(False)
        merged = merge_adapters(base, best_adapters)
    return OpsdResult(Policy(policy.cfg, merged), metrics, best_step, best_em)
