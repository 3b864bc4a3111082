from __future__ import annotations

import itertools
from collections import Counter

import numpy as np
import pytest

from moa_gossip.errors import ConfigurationError, ProtocolViolation
from moa_gossip.protocol import (
    AGGREGATOR_SYSTEM_PROMPT,
    Phase,
    Prompt,
    ProtocolParams,
    ResponseMsg,
    Stage,
    TaskKind,
    advance_job,
    build_layer_prompt,
    count_response_blocks,
    select_neighbors,
    spawn_job,
    total_inferences,
)


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _respond(task, text=None, at=1.0):
    return ResponseMsg(
        task_id=task.task_id,
        job_id=task.job_id,
        producer_node=task.assigned_node,
        text=text or f"answer from {task.assigned_node}",
        produced_at=at,
    )


def _run_to_completion(params: ProtocolParams, origin: int = 0, seed: int = 0):
    rng = _rng(seed)
    prompt = Prompt("p0", origin, "What is 2+2?", 0.0)
    job, tasks = spawn_job(prompt, params, rng)
    issued = list(tasks)
    clock = 0.0
    while not job.is_completed:
        clock += 1.0
        batch, tasks = tasks, []
        for task in batch:
            job, new = advance_job(job, _respond(task, at=clock), params, rng)
            tasks.extend(new)
        issued.extend(tasks)
    return job, issued


class TestParams:
    def test_k_above_bound_is_rejected(self):
        with pytest.raises(ConfigurationError) as excinfo:
            ProtocolParams(n=4, k=5, M=1)
        assert excinfo.value.field == "k"
        assert "3" in excinfo.value.message

    def test_small_network_rejected(self):
        with pytest.raises(ConfigurationError):
            ProtocolParams(n=1, k=0, M=0)

    @pytest.mark.parametrize("k,M,expected", [(0, 0, 1), (1, 1, 3), (2, 2, 7), (3, 2, 9)])
    def test_total_inferences(self, k, M, expected):
        assert total_inferences(ProtocolParams(n=4, k=k, M=M)) == expected


class TestSelectNeighbors:
    def test_excludes_self_and_is_sorted(self):
        params = ProtocolParams(n=10, k=3, M=1)
        rng = _rng(1)
        for _ in range(200):
            picked = select_neighbors(4, params, rng)
            assert len(picked) == 3
            assert 4 not in picked
            assert list(picked) == sorted(set(picked))

    def test_k_zero_returns_empty(self):
        assert select_neighbors(0, ProtocolParams(n=4, k=0, M=1), _rng()) == ()

    def test_full_fanout_consumes_no_draws(self):
        params = ProtocolParams(n=4, k=3, M=1)
        rng = _rng(5)
        before = rng.bit_generator.state
        assert select_neighbors(2, params, rng) == (0, 1, 3)
        assert rng.bit_generator.state == before

    def test_invalid_self_id(self):
        with pytest.raises(ConfigurationError):
            select_neighbors(7, ProtocolParams(n=4, k=1, M=1), _rng())

    def test_same_seed_same_sequence(self):
        params = ProtocolParams(n=8, k=3, M=1)
        a = [select_neighbors(0, params, r) for r in [_rng(9)] for _ in range(50)]
        b = [select_neighbors(0, params, r) for r in [_rng(9)] for _ in range(50)]
        assert a == b

    def test_inclusion_frequency_is_roughly_uniform(self):
        params = ProtocolParams(n=5, k=2, M=1)
        rng = _rng(11)
        counts = Counter()
        draws = 20_000
        for _ in range(draws):
            counts.update(select_neighbors(0, params, rng))
        for node in (1, 2, 3, 4):
            assert counts[node] / draws == pytest.approx(0.5, abs=0.02)

    @pytest.mark.slow
    def test_uniformity_over_a_million_draws(self):
        params = ProtocolParams(n=5, k=2, M=1)
        rng = _rng(2024)
        draws = 1_000_000
        inclusion = Counter()
        subsets = Counter()
        for _ in range(draws):
            picked = select_neighbors(0, params, rng)
            inclusion.update(picked)
            subsets[picked] += 1
        for node in (1, 2, 3, 4):
            assert abs(inclusion[node] / draws - 0.5) <= 0.005
        all_subsets = list(itertools.combinations((1, 2, 3, 4), 2))
        expected = draws / len(all_subsets)
        chi2 = sum((subsets[s] - expected) ** 2 / expected for s in all_subsets)
        # 自由度 5、有意水準 0.01 の棄却限界
        assert chi2 < 15.086


class TestLayerPrompt:
    def test_first_layer_is_original_text_only(self):
        prompt = Prompt("p", 0, "hello", 0.0)
        bundle = build_layer_prompt(prompt, (), TaskKind.proposal(1))
        assert bundle.user_text == "hello"
        assert bundle.system_text is None
        assert bundle.to_messages() == [{"role": "user", "content": "hello"}]

    def test_aggregation_concatenates_numbered_blocks(self):
        prompt = Prompt("p", 0, "question", 0.0)
        responses = [
            ResponseMsg("p/L1/0", "p", 0, "first", 1.0),
            ResponseMsg("p/L1/1", "p", 3, "second", 1.5),
        ]
        bundle = build_layer_prompt(prompt, responses, TaskKind.aggregation(), expected=2)
        assert bundle.system_text == AGGREGATOR_SYSTEM_PROMPT
        assert bundle.user_text == (
            "question\n\n"
            "Response 1 (from node 0):\nfirst\n\n"
            "Response 2 (from node 3):\nsecond"
        )
        assert count_response_blocks(bundle.user_text) == 2
        messages = bundle.to_messages()
        assert [m["role"] for m in messages] == ["system", "user"]

    def test_wrong_response_count_is_a_violation(self):
        prompt = Prompt("p", 0, "q", 0.0)
        responses = [ResponseMsg("p/L1/0", "p", 0, "only", 1.0)]
        with pytest.raises(ProtocolViolation):
            build_layer_prompt(prompt, responses, TaskKind.aggregation(), expected=2)

    def test_system_stage_without_responses_is_a_violation(self):
        with pytest.raises(ProtocolViolation):
            build_layer_prompt(Prompt("p", 0, "q", 0.0), (), TaskKind.proposal(2))

    def test_proposal_layer_must_be_positive(self):
        with pytest.raises(ProtocolViolation):
            TaskKind.proposal(0)


class TestJobStateMachine:
    def test_direct_job(self):
        params = ProtocolParams(n=4, k=0, M=0)
        job, tasks = spawn_job(Prompt("p", 2, "q", 0.0), params, _rng())
        assert job.phase is Phase.AWAITING_DIRECT
        assert [t.task_id for t in tasks] == ["p/direct"]
        assert tasks[0].assigned_node == 2
        done, more = advance_job(job, _respond(tasks[0], at=3.0), params, _rng())
        assert more == []
        assert done.is_completed
        assert done.completed_at == 3.0
        assert done.inference_count == 1

    def test_first_layer_self_then_neighbors(self):
        params = ProtocolParams(n=6, k=2, M=1)
        job, tasks = spawn_job(Prompt("p", 3, "q", 0.0), params, _rng(4))
        assert tasks[0].assigned_node == 3
        assert [t.task_id for t in tasks] == ["p/L1/0", "p/L1/1", "p/L1/2"]
        assert tuple(t.assigned_node for t in tasks[1:]) == job.layer_neighbor_sets[0]
        assert all(t.kind == TaskKind.proposal(1) for t in tasks)

    @pytest.mark.parametrize("k,M", [(0, 1), (1, 1), (1, 2), (2, 2), (3, 2), (2, 3)])
    def test_conservation(self, k, M):
        params = ProtocolParams(n=5, k=k, M=M)
        job, issued = _run_to_completion(params)
        assert job.inference_count == total_inferences(params)
        assert len(issued) == total_inferences(params)
        assert len({t.task_id for t in issued}) == len(issued)
        assert issued[-1].task_id == "p0/agg"
        assert issued[-1].assigned_node == 0
        assert len(job.layer_neighbor_sets) == M

    def test_layer_waits_for_all_responses(self):
        params = ProtocolParams(n=4, k=2, M=1)
        rng = _rng(3)
        job, tasks = spawn_job(Prompt("p", 0, "q", 0.0), params, rng)
        job, more = advance_job(job, _respond(tasks[0]), params, rng)
        assert more == []
        job, more = advance_job(job, _respond(tasks[1]), params, rng)
        assert more == []
        job, more = advance_job(job, _respond(tasks[2]), params, rng)
        assert [t.kind.stage for t in more] == [Stage.AGGREGATION]
        assert job.phase is Phase.AWAITING_AGGREGATION

    def test_collected_order_follows_arrival_time(self):
        params = ProtocolParams(n=4, k=1, M=1)
        rng = _rng(3)
        job, tasks = spawn_job(Prompt("p", 0, "q", 0.0), params, rng)
        job, _ = advance_job(job, _respond(tasks[1], text="late", at=2.0), params, rng)
        job, agg = advance_job(job, _respond(tasks[0], text="early", at=1.0), params, rng)
        text = agg[0].payload.user_text
        assert text.index("early") < text.index("late")

    def test_second_layer_resamples_and_uses_system_prompt(self):
        params = ProtocolParams(n=6, k=2, M=2)
        rng = _rng(8)
        job, tasks = spawn_job(Prompt("p", 1, "q", 0.0), params, rng)
        new = []
        for task in tasks:
            job, new = advance_job(job, _respond(task), params, rng)
        assert all(t.kind == TaskKind.proposal(2) for t in new)
        assert new[0].payload.system_text == AGGREGATOR_SYSTEM_PROMPT
        assert count_response_blocks(new[0].payload.user_text) == 3
        assert len(job.layer_neighbor_sets) == 2

    def test_duplicate_response_is_rejected_without_mutation(self):
        params = ProtocolParams(n=4, k=1, M=1)
        rng = _rng()
        job, tasks = spawn_job(Prompt("p", 0, "q", 0.0), params, rng)
        job, _ = advance_job(job, _respond(tasks[0]), params, rng)
        with pytest.raises(ProtocolViolation):
            advance_job(job, _respond(tasks[0]), params, rng)
        assert job.pending == frozenset({tasks[1].task_id})

    def test_response_for_other_job_is_rejected(self):
        params = ProtocolParams(n=4, k=1, M=1)
        job, tasks = spawn_job(Prompt("p", 0, "q", 0.0), params, _rng())
        foreign = ResponseMsg("x/L1/0", "x", 0, "t", 1.0)
        with pytest.raises(ProtocolViolation):
            advance_job(job, foreign, params, _rng())

    def test_completed_job_rejects_further_responses(self):
        params = ProtocolParams(n=4, k=0, M=0)
        job, tasks = spawn_job(Prompt("p", 0, "q", 0.0), params, _rng())
        done, _ = advance_job(job, _respond(tasks[0]), params, _rng())
        with pytest.raises(ProtocolViolation):
            advance_job(done, _respond(tasks[0]), params, _rng())
