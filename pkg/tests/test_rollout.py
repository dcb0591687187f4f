from __future__ import annotations

import numpy as np
import pytest
import torch

from scripted import ScriptedPolicy, SearchHappyPolicy
from evosearch.codec import SpanKind
from evosearch.environment import Question, exact_match, generate_world, retrieve
from evosearch.model import ModelConfig, Policy
from evosearch.rollout import (
    PromptTemplate, RolloutConfig, collect_pool, evaluate_greedy, group_jobs, member_rng, read_pool, rollout_group,
    rollout_one, run_rollouts, student_prompt, write_pool,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(5, n_entities=300, n_questions_1hop=120, n_questions_2hop=60)


def paris_question() -> Question:
    return Question("q99999", "what is the capital of franz?", ("paris", "Paris"), 1, ("p00000",), ("capital",),
                    ("franz", "paris"))


def test_no_search_path(world):
    rec = rollout_one(paris_question(), ScriptedPolicy("<answer>paris</answer>"), world.corpus, RolloutConfig(),
                      np.random.default_rng(0))
    assert rec.reward == 1 and rec.n_srch == 0
    assert rec.text == "<answer>paris</answer>"


def test_search_cap_with_five_attempts(world):
    q = world.train[0]
    script = "<search>home of x</search>" * 5 + "<answer>x</answer>"
    cfg = RolloutConfig(t_max=4)
    rec = rollout_one(q, ScriptedPolicy(script), world.corpus, cfg, np.random.default_rng(0))
    tr = rec.trajectory
    assert tr.n_info == 4 and rec.n_srch == 4
    assert tr.forced_text == PromptTemplate().forcing_suffix
    assert tr.complete
    # the fifth <search> was masked so the policy had to answer
    kinds = [s.kind for s in tr.spans]
    assert kinds[-1] is SpanKind.ANSWER and kinds.count(SpanKind.SEARCH) == 4


def test_information_matches_retriever(world):
    q = world.train[3]
    script = "<search>home of vizeta</search><think>ok</think><search>nation</search><answer>z</answer>"
    rec = rollout_one(q, ScriptedPolicy(script), world.corpus, RolloutConfig(retriever_k=2), None, greedy=True)
    spans = rec.trajectory.spans
    for i, s in enumerate(spans):
        if s.kind is SpanKind.INFORMATION:
            assert spans[i - 1].kind is SpanKind.SEARCH
            assert s.text == retrieve(spans[i - 1].text, world.corpus, 2).render()


def test_incomplete_gets_zero(world):
    q = paris_question()
    cfg = RolloutConfig(max_new_tokens=4)
    rec = rollout_one(q, ScriptedPolicy("<answer>paris</answer>"), world.corpus, cfg, None, greedy=True)
    assert not rec.trajectory.complete and rec.reward == 0
    assert rec.length == 4


def test_context_overflow_truncates(world):
    q = paris_question()
    prompt_len = len(student_prompt(q))
    pol = ScriptedPolicy("<answer>paris paris paris</answer>", context_length=prompt_len + 6)
    rec = rollout_one(q, pol, world.corpus, RolloutConfig(), None, greedy=True)
    assert not rec.trajectory.complete and rec.reward == 0
    assert prompt_len + rec.length <= prompt_len + 6


def test_random_policy_never_exceeds_cap(world):
    cfg = RolloutConfig(max_new_tokens=160)
    jobs = group_jobs(world.train[:40], seed=3, n=10)
    recs = run_rollouts(SearchHappyPolicy(1), jobs, world.corpus, cfg)
    assert len(recs) == 400
    assert max(r.trajectory.n_info for r in recs) == 4
    for r in recs:
        if r.trajectory.n_info == 4:
            # the token budget may cut the injected suffix short
            assert PromptTemplate().forcing_suffix.startswith(r.trajectory.forced_text)


def test_group_and_determinism(world):
    pol = Policy.initialize(ModelConfig(), seed=0)
    cfg = RolloutConfig(max_new_tokens=60)
    q = world.train[1]
    a = rollout_group(q, pol, world.corpus, cfg, seed=11)
    b = rollout_group(q, pol, world.corpus, cfg, seed=11)
    assert len(a) == 5 and all(r.question_id == q.id for r in a)
    assert a == b
    single = rollout_group(q, pol, world.corpus, RolloutConfig(group_size=1, max_new_tokens=60), seed=11)
    assert len(single) == 1 and single[0] == a[0]


def test_record_independent_of_batch_composition(world):
    pol = Policy.initialize(ModelConfig(), seed=0)
    cfg = RolloutConfig(max_new_tokens=60)
    q = world.train[2]
    alone = rollout_one(q, pol, world.corpus, cfg, member_rng(4, q.id, 0))
    jobs = group_jobs(world.train[:6], seed=4, n=2)
    mixed = run_rollouts(pol, jobs, world.corpus, cfg)
    assert mixed[4] == alone


def test_member_rng_substreams():
    a = member_rng(1, "q00001", 0).random(3)
    assert np.array_equal(a, member_rng(1, "q00001", 0).random(3))
    assert not np.array_equal(a, member_rng(1, "q00001", 1).random(3))
    assert not np.array_equal(a, member_rng(1, "q00002", 0).random(3))


def test_pool_counts_rescoring_and_roundtrip(world, tmp_path):
    pol = SearchHappyPolicy(2)
    qs = world.train[:10]
    pool = collect_pool(qs, pol, world.corpus, RolloutConfig(max_new_tokens=80), k=8, seed=0)
    assert sum(len(v) for v in pool.values()) == 80
    assert all(len(pool[q.id]) == 8 for q in qs)
    by_id = {q.id: q for q in qs}
    for qid, recs in pool.items():
        for r in recs:
            expect = exact_match(r.trajectory.answer, by_id[qid].gold_aliases) if r.trajectory.complete else 0
            assert r.reward == expect
    write_pool(tmp_path / "pool.jsonl", pool)
    assert read_pool(tmp_path / "pool.jsonl") == pool


def test_pool_io_errors(tmp_path):
    with pytest.raises(OSError):
        read_pool(tmp_path / "nope.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"question_id": "q", "trajectory_text": "</answer>", "reward": 0, '
                                        '"n_srch": 0, "length": 1}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_pool(tmp_path / "bad.jsonl")


def test_evaluate_greedy_oracles(world):
    qs = world.validation[:5]
    right = [run_rollouts(ScriptedPolicy(f"<answer>{q.gold_aliases[0]}</answer>"), [(q, student_prompt(q), None)],
                          world.corpus, RolloutConfig(), greedy=True)[0].reward for q in qs]
    assert right == [1] * 5
    empty = evaluate_greedy(qs, ScriptedPolicy("<answer></answer>"), world.corpus, RolloutConfig())
    assert [r.reward for r in empty] == [0] * 5


def test_template_validation():
    with pytest.raises(ValueError):
        PromptTemplate(instruction="use <search> please")
    with pytest.raises(ValueError):
        RolloutConfig(temperature=0)
