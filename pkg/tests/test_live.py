from __future__ import annotations

import io
import json
import threading

import pytest
import requests

from moa_gossip.backends import HealthReport, HttpBackend, InferenceResult, MockBackend
from moa_gossip.config import parse_config_text
from moa_gossip.errors import BackendError, BackendHTTPError
from moa_gossip.live import LiveRunner, run_live
from moa_gossip.protocol import AGGREGATOR_SYSTEM_PROMPT, count_response_blocks


def _http_config(base_url: str, n: int, k: int, M: int, health_check: bool = False):
    return parse_config_text(
        f"""
mode: live
n: {n}
k: {k}
M: {M}
lambda: 0.1
alpha: 1.0
backend:
  kind: http
  base_url: {base_url}
  model: fixture-model
  max_retries: 0
live:
  health_check: {"true" if health_check else "false"}
"""
    )


def _mock_config(n: int = 4, k: int = 1, M: int = 2):
    return parse_config_text(
        f"""
mode: live
n: {n}
k: {k}
M: {M}
lambda: 0.1
alpha: 1.0
seed: 3
backend:
  kind: mock
  delay_dist: exponential
  delay_mean: 0.001
  realtime: true
"""
    )


class FailingBackend:
    backend_id = "failing"

    def infer(self, request):
        raise BackendHTTPError("HTTP 500 from fixture", status_code=500)

    def health(self):
        return HealthReport(self.backend_id, healthy=True, reachable=True)


class UnhealthyBackend(FailingBackend):
    backend_id = "unhealthy"

    def health(self):
        return HealthReport(self.backend_id, healthy=False, reachable=False, cause="connection refused")


class EchoBackend:
    backend_id = "echo"

    def infer(self, request):
        return InferenceResult(text="ok", measured_latency=0.0, backend_id=self.backend_id)

    def health(self):
        return HealthReport(self.backend_id, healthy=True, reachable=True)


def test_direct_inference_passes_completion_through(fixture_server):
    config = _http_config(fixture_server.base_url, n=2, k=0, M=0)
    result = run_live(config, [(1, "What is 2+2?")])
    record = result.records[0]
    assert record.status == "completed"
    assert record.response == "fixture completion"
    assert len(fixture_server.chat_requests()) == 1
    assert fixture_server.chat_requests()[0]["messages"] == [{"role": "user", "content": "What is 2+2?"}]


def test_single_layer_job_issues_three_calls(fixture_server):
    config = _http_config(fixture_server.base_url, n=2, k=1, M=1)
    result = run_live(config, [(0, "What is 2+2?")])
    assert result.records[0].status == "completed"
    calls = fixture_server.chat_requests()
    assert len(calls) == 3
    for proposal in calls[:2]:
        assert proposal["messages"] == [{"role": "user", "content": "What is 2+2?"}]
    aggregation = calls[2]["messages"]
    assert aggregation[0] == {"role": "system", "content": AGGREGATOR_SYSTEM_PROMPT}
    assert aggregation[0]["content"].startswith("You have been provided with a set of responses")
    assert count_response_blocks(aggregation[1]["content"]) == 2
    assert all(call["temperature"] == 0.7 for call in calls)


def test_health_check_passes_against_fixture(fixture_server):
    config = _http_config(fixture_server.base_url, n=2, k=0, M=0, health_check=True)
    result = run_live(config, [(0, "hello")])
    assert result.summary["completed"] == 1


def test_many_prompts_with_mock_backends():
    config = _mock_config()
    prompts = [(i % 4, f"question {i}") for i in range(10)]
    out = io.StringIO()
    result = run_live(config, prompts, out=out)
    assert len(result.records) == 10
    assert result.summary["completed"] == 10
    assert result.summary["failed"] == 0
    per_job = (config.params.k + 1) * config.params.M + 1
    for record in result.records:
        assert len(record.stages) == per_job
        assert record.latency is not None and record.latency >= 0
        assert record.stages[-1].stage == "aggregation"
        assert record.response.startswith(f"MOCK[{record.origin}]:")
    lines = out.getvalue().splitlines()
    assert len(lines) == 11
    assert json.loads(lines[-1])["summary"] is True
    assert json.loads(lines[0])["prompt_id"] == "n0-p0"


def test_backend_failure_marks_job_failed():
    config = _mock_config(n=2, k=0, M=0)
    backends = [FailingBackend(), MockBackend(config.backends[1], node_id=1)]
    result = LiveRunner(config, backends=backends).run([(0, "fails"), (1, "works")])
    statuses = {record.origin: record.status for record in result.records}
    assert statuses == {0: "failed", 1: "completed"}
    assert "HTTP 500" in result.records[0].error
    assert result.summary["failed"] == 1


def test_failed_job_skips_remaining_tasks():
    config = _mock_config(n=2, k=1, M=1)
    backends = [EchoBackend(), FailingBackend()]
    result = LiveRunner(config, backends=backends).run([(0, "q")])
    record = result.records[0]
    assert record.status == "failed"
    assert all(stage.stage != "aggregation" for stage in record.stages)


def test_unhealthy_backend_stops_startup():
    config = parse_config_text(
        "mode: live\nn: 2\nk: 0\nM: 0\nlambda: 0.1\nalpha: 1.0\n"
    )
    runner = LiveRunner(config, backends=[UnhealthyBackend(), EchoBackend()])
    with pytest.raises(BackendError) as excinfo:
        runner.run([(0, "q")])
    assert "connection refused" in str(excinfo.value)


def test_paced_arrivals_follow_rate():
    config = parse_config_text(
        "mode: live\nn: 2\nk: 0\nM: 0\nlambda: 100.0\nalpha: 1.0\nbackend: {kind: mock}\n"
        "live: {pace_arrivals: true}\n"
    )
    slept = []
    runner = LiveRunner(config, sleep=slept.append)
    result = runner.run([(0, "a"), (0, "b"), (1, "c")])
    assert result.summary["completed"] == 3
    assert all(wait > 0 for wait in slept)


class _BrokenStreamSession(requests.Session):
    def post(self, *args, **kwargs):
        raise requests.exceptions.ChunkedEncodingError("connection broken mid-body")


class CrashingBackend(EchoBackend):
    backend_id = "crashing"

    def infer(self, request):
        raise RuntimeError("driver crashed")


def _run_with_deadline(runner, prompts, seconds=5.0):
    results = []
    worker = threading.Thread(target=lambda: results.append(runner.run(prompts)), daemon=True)
    worker.start()
    worker.join(seconds)
    assert not worker.is_alive(), "live run did not finish"
    return results[0]


def test_request_level_failure_marks_job_failed():
    config = _http_config("http://127.0.0.1:9/v1", n=2, k=0, M=0)
    http = HttpBackend(config.backends[0], session=_BrokenStreamSession(), sleep=lambda _: None)
    runner = LiveRunner(config, backends=[http, EchoBackend()])
    result = _run_with_deadline(runner, [(0, "fails"), (1, "works")])
    statuses = {record.origin: record.status for record in result.records}
    assert statuses == {0: "failed", 1: "completed"}
    assert "ChunkedEncodingError" in result.records[0].error


def test_unexpected_exception_does_not_stop_the_run():
    config = _mock_config(n=2, k=0, M=0)
    runner = LiveRunner(config, backends=[CrashingBackend(), EchoBackend()])
    result = _run_with_deadline(runner, [(0, "a"), (0, "b"), (1, "c")])
    assert result.summary["failed"] == 2
    assert result.summary["completed"] == 1
    assert all("RuntimeError" in r.error for r in result.records if r.status == "failed")
