"""Behavior-cloning warm start that stands in for a pretrained backbone.

The first ``expert_only_steps`` clone a competent searcher so the model learns
to copy names into queries and answers. The remaining steps mix in shortcut
behaviors (answering from a guess, stopping a two-hop chain after the first
hop), so the cloned policy can use the tools but does not yet prefer them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .codec import encode, parse_trajectory
from .environment import Corpus, Question, expert_queries
from .model import Adam, Policy, backward
from .rollout import PromptTemplate, render_information, student_prompt
from .sequences import build_batch, gather_token_logprobs, microbatches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WarmStartConfig:
    steps: int = 2300
    expert_only_steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    # cosine decay from lr to lr * lr_floor over all steps
    lr_floor: float = 0.05
    p_expert: float = 0.3
    p_shallow: float = 0.3
    retriever_k: int = 3
    max_batch_tokens: int = 16384


def demonstration(q: Question, corpus: Corpus, mode: str, rng: np.random.Generator, k: int = 3) -> str:
    """Trajectory text for one of the demonstration behaviors: expert, shallow, guess."""
    answer_type_pool = [e for es in corpus.entities.values() for e in es]
    parts = []
    if mode in ("expert", "shallow"):
        hops = len(q.chain) - 1 if mode == "expert" else 1
        for query in expert_queries(q)[:hops]:
            parts.append(f"<search>{query}</search><information>{render_information(query, corpus, k)}</information>")
        answer = q.chain[hops]
    elif mode == "guess":
        answer = answer_type_pool[int(rng.integers(len(answer_type_pool)))]
    else:
        raise ValueError(f"unknown demonstration mode {mode!r}")
    parts.append(f"<answer>{answer}</answer>")
    return "".join(parts)


def cosine_lr(cfg: WarmStartConfig, step: int) -> float:
    frac = step / max(1, cfg.steps)
    return cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def sample_mode(q: Question, rng: np.random.Generator, cfg: WarmStartConfig, step: int = -1) -> str:
    u = rng.random()
    if step < cfg.expert_only_steps and step >= 0:
        return "expert"
    if u < cfg.p_expert:
        return "expert"
    if u < cfg.p_expert + cfg.p_shallow:
        return "shallow" if q.hops > 1 else "guess"
    return "guess"


def warm_start(policy: Policy, questions: Sequence[Question], corpus: Corpus, cfg: WarmStartConfig, seed: int,
               templates: PromptTemplate = PromptTemplate()) -> list[dict]:
    """Cross-entropy on the policy-written positions of sampled demonstrations; updates in place."""
    rng = np.random.default_rng(seed)
    opt = Adam(cfg.lr)
    for t in policy.params.values():
        t.requires_grad_(True)
    history = []
    for step in range(cfg.steps):
        picked = [questions[int(i)] for i in rng.integers(len(questions), size=cfg.batch_size)]
        prefixes, trajs, masks = [], [], []
        for q in picked:
            text = demonstration(q, corpus, sample_mode(q, rng, cfg, step), rng, cfg.retriever_k)
            traj = parse_trajectory(encode(text))
            prefixes.append(student_prompt(q, templates))
            trajs.append(traj.tokens)
            masks.append(traj.policy_mask())
        total = int(sum(m.sum() for m in masks))
        lengths = [len(p) + len(t) for p, t in zip(prefixes, trajs)]
        grads = {k: torch.zeros_like(v) for k, v in policy.params.items()}
        loss_value = 0.0
        for idx in microbatches(lengths, cfg.max_batch_tokens):
            batch = build_batch([prefixes[i] for i in idx], [trajs[i] for i in idx], [masks[i] for i in idx])
            lp = gather_token_logprobs(policy.logprobs(batch.tokens), batch.tokens)
            loss = -(lp * batch.mask).sum() / total
            for k, g in backward(loss, policy.params).items():
                grads[k] += g
            loss_value += float(loss.detach())
        opt.lr = cosine_lr(cfg, step)
        opt.step(policy.params, grads)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("warm start step %d loss %.4f", step, loss_value)
            history.append({"stage": "warmstart", "step": step, "loss": round(loss_value, 6)})
    for t in policy.params.values():
        t.requires_grad_(False)
    return history
