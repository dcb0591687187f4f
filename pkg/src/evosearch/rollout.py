"""Agentic generation loop: sample, search, inject retrieved passages, force an answer."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch

from .codec import (
    ANSWER, ANSWER_END, BOS, DEFAULT_VOCAB, INFO, INFO_END, PAD, SEARCH, SEARCH_END, THINK, THINK_END,
    RolloutRecord, Vocabulary, encode, parse_trajectory,
)
from .environment import Corpus, Question, exact_match, retrieve
from .model import KVCache, sample_batch


@dataclass(frozen=True)
class RolloutConfig:
    group_size: int = 5
    temperature: float = 1.0
    t_max: int = 4
    max_new_tokens: int = 480
    retriever_k: int = 3
    batch_size: int = 160

    def __post_init__(self):
        if min(self.group_size, self.t_max, self.max_new_tokens, self.retriever_k, self.batch_size) < 1:
            raise ValueError("rollout sizes must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str = "Answer the question. Search if needed.\n"
    privileged_preamble: str = "Here is an expert reference solution.\n"
    retry_cue: str = "\nNow solve the problem in your own words.\n"
    forcing_suffix: str = "\nSearch limit reached. Answer now.\n"

    def __post_init__(self):
        for name in ("instruction", "privileged_preamble", "retry_cue", "forcing_suffix"):
            text = getattr(self, name)
            if any(tag in text for tag in DEFAULT_VOCAB.special_tokens):
                raise ValueError(f"template {name} contains a tag token")


class DecodingPolicy(Protocol):
    cfg: object

    def new_cache(self, batch: int, length: int) -> KVCache: ...

    def step(self, tokens: torch.Tensor, pos: int, cache: KVCache) -> torch.Tensor: ...


def student_prompt(question: Question, templates: PromptTemplate = PromptTemplate(),
                   vocab: Vocabulary = DEFAULT_VOCAB) -> list[int]:
    return [vocab.id(BOS)] + encode(templates.instruction + question.text + "\n", vocab)


def member_rng(seed: int, question_id: str, member: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(question_id.encode()), member])


@dataclass
class _Seq:
    question: Question
    tokens: list[int]
    prompt_len: int
    rng: np.random.Generator | None
    state: str = "top"
    span_start: int = 0
    n_info: int = 0
    done: bool = False
    truncated: bool = False


class _Grammar:
    """Allowed-next-token masks for each decoding state."""

    def __init__(self, vocab: Vocabulary):
        V = vocab.size
        n_ord = len(vocab.ordinary_symbols)
        self.ids = {t: vocab.id(t) for t in vocab.special_tokens}
        top = np.zeros(V, dtype=bool)
        for t in (THINK, SEARCH, ANSWER):
            top[self.ids[t]] = True
        self.top = top
        self.top_forced = top.copy()
        self.top_forced[self.ids[SEARCH]] = False
        self.inside = {}
        for state, close in (("think", THINK_END), ("search", SEARCH_END), ("answer", ANSWER_END)):
            m = np.zeros(V, dtype=bool)
            m[:n_ord] = True
            m[self.ids[close]] = True
            self.inside[state] = m
        self.opens = {self.ids[THINK]: "think", self.ids[SEARCH]: "search", self.ids[ANSWER]: "answer"}
        self.closes = {self.ids[THINK_END]: "think", self.ids[SEARCH_END]: "search", self.ids[ANSWER_END]: "answer"}

    def mask(self, seq: _Seq, t_max: int) -> np.ndarray:
        if seq.state == "top":
            return self.top_forced if seq.n_info >= t_max else self.top
        return self.inside[seq.state]


def render_information(query: str, corpus: Corpus, k: int) -> str:
    return retrieve(query, corpus, k).render()


def run_rollouts(
    policy: DecodingPolicy,
    jobs: Sequence[tuple[Question, list[int], np.random.Generator | None]],
    corpus: Corpus,
    cfg: RolloutConfig,
    templates: PromptTemplate = PromptTemplate(),
    greedy: bool = False,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> list[RolloutRecord]:
    """Decode every job to completion; jobs are processed in fixed-size batches in order."""
    records: list[RolloutRecord] = []
    for lo in range(0, len(jobs), cfg.batch_size):
        records.extend(_run_batch(policy, jobs[lo:lo + cfg.batch_size], corpus, cfg, templates, greedy, vocab))
    return records


def _run_batch(policy, jobs, corpus, cfg, templates, greedy, vocab) -> list[RolloutRecord]:
    grammar = _Grammar(vocab)
    ctx = policy.cfg.context_length
    seqs = [_Seq(q, list(prompt), len(prompt), rng) for q, prompt, rng in jobs]
    for s in seqs:
        if s.prompt_len >= ctx:
            raise ValueError(f"prompt for {s.question.id} does not fit the context")
    limit = min(ctx, max(s.prompt_len for s in seqs) + cfg.max_new_tokens + 1)
    cache = policy.new_cache(len(seqs), limit)
    pad = vocab.id(PAD)
    search_end = vocab.id(SEARCH_END)
    forcing = encode(templates.forcing_suffix, vocab)
    temperature = 1e-9 if greedy else cfg.temperature

    active = list(range(len(seqs)))  # cache row r holds seqs[active[r]]
    pos = 0
    while pos < limit and active:
        inp = torch.tensor([seqs[i].tokens[pos] if pos < len(seqs[i].tokens) else pad for i in active],
                           dtype=torch.long)
        logprobs = policy.step(inp, pos, cache)
        live_rows = []
        for r, i in enumerate(active):
            s = seqs[i]
            if s.done or len(s.tokens) > pos + 1:
                continue  # prompt or injected tokens still to feed
            if len(s.tokens) - s.prompt_len >= cfg.max_new_tokens or pos + 1 >= limit:
                s.done = True
                s.truncated = pos + 1 >= ctx
            else:
                live_rows.append(r)
        if live_rows:
            masks = np.stack([grammar.mask(seqs[active[r]], cfg.t_max) for r in live_rows])
            if greedy:
                u = np.zeros(len(live_rows))
            else:
                u = np.array([seqs[active[r]].rng.random() for r in live_rows])
            chosen = sample_batch(logprobs[live_rows], temperature, u, masks)
            for r, tok in zip(live_rows, chosen):
                _advance(seqs[active[r]], int(tok), grammar, corpus, cfg, search_end, forcing, vocab)
        n_done = sum(seqs[i].done for i in active)
        if n_done and (n_done * 4 >= len(active) or n_done == len(active)):
            keep = [r for r, i in enumerate(active) if not seqs[i].done]
            active = [active[r] for r in keep]
            if keep:
                cache.select(keep)
        pos += 1

    records = []
    for s in seqs:
        toks = s.tokens[: min(len(s.tokens), limit)][s.prompt_len:]
        traj = parse_trajectory(toks, vocab)
        reward = exact_match(traj.answer, s.question.gold_aliases) if traj.complete else 0
        records.append(RolloutRecord.build(s.question.id, traj, reward))
    return records


def _advance(s: _Seq, tok: int, grammar: _Grammar, corpus, cfg, search_end, forcing, vocab) -> None:
    s.tokens.append(tok)
    if s.state == "top":
        s.state = grammar.opens[tok]
        s.span_start = len(s.tokens) - 1
        return
    if tok in grammar.closes:
        if s.state == "answer":
            s.done = True
        elif tok == search_end:
            query = vocab.decode(s.tokens[s.span_start + 1:-1])
            info = [vocab.id(INFO)] + encode(render_information(query, corpus, cfg.retriever_k), vocab) + [vocab.id(INFO_END)]
            s.n_info += 1
            if s.n_info >= cfg.t_max:
                info += forcing
            s.tokens.extend(info)
        s.state = "top"


def rollout_one(question: Question, policy: DecodingPolicy, corpus: Corpus, cfg: RolloutConfig,
                rng: np.random.Generator | None, templates: PromptTemplate = PromptTemplate(),
                greedy: bool = False) -> RolloutRecord:
    job = (question, student_prompt(question, templates), rng)
    return run_rollouts(policy, [job], corpus, cfg, templates, greedy)[0]


def group_jobs(questions: Iterable[Question], seed: int, n: int, templates: PromptTemplate = PromptTemplate()):
    jobs = []
    for q in questions:
        prompt = student_prompt(q, templates)
        for member in range(n):
            jobs.append((q, prompt, member_rng(seed, q.id, member)))
    return jobs


def rollout_group(question: Question, policy: DecodingPolicy, corpus: Corpus, cfg: RolloutConfig, seed: int,
                  templates: PromptTemplate = PromptTemplate()) -> list[RolloutRecord]:
    return run_rollouts(policy, group_jobs([question], seed, cfg.group_size, templates), corpus, cfg, templates)


def collect_pool(questions: Sequence[Question], policy: DecodingPolicy, corpus: Corpus, cfg: RolloutConfig,
                 k: int, seed: int, templates: PromptTemplate = PromptTemplate()) -> dict[str, list[RolloutRecord]]:
    """K fresh samples per question from a fixed policy."""
    records = run_rollouts(policy, group_jobs(questions, seed, k, templates), corpus, cfg, templates)
    pool: dict[str, list[RolloutRecord]] = {q.id: [] for q in questions}
    for rec in records:
        pool[rec.question_id].append(rec)
    return pool


def evaluate_greedy(questions: Sequence[Question], policy: DecodingPolicy, corpus: Corpus, cfg: RolloutConfig,
                    templates: PromptTemplate = PromptTemplate()) -> list[RolloutRecord]:
    jobs = [(q, student_prompt(q, templates), None) for q in questions]
    return run_rollouts(policy, jobs, corpus, cfg, templates, greedy=True)


def write_pool(path: str | Path, pool: dict[str, list[RolloutRecord]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for qid in pool:
                for rec in pool[qid]:
                    fh.write(rec.to_json() + "\n")
    except OSError as exc:
        raise OSError(f"cannot write rollout pool {path}: {exc}") from exc


def read_pool(path: str | Path) -> dict[str, list[RolloutRecord]]:
    path = Path(path)
    pool: dict[str, list[RolloutRecord]] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = RolloutRecord.from_json(line)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                pool.setdefault(rec.question_id, []).append(rec)
    except OSError as exc:
        raise OSError(f"cannot read rollout pool {path}: {exc}") from exc
    return pool
