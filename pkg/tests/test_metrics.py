from __future__ import annotations

from dataclasses import replace

import pytest

from moa_gossip.errors import ConfigurationError
from moa_gossip.metrics import (
    VERDICT_ABORTED,
    VERDICT_GROWING,
    VERDICT_STABLE,
    JobObservation,
    MetricsCollector,
    OutstandingObservation,
    QueueObservation,
    TaskArrivalObservation,
    classify_verdict,
    compute_metrics,
    least_squares_slope,
    worst_verdict,
)


def test_constant_queue_length():
    summary = compute_metrics([QueueObservation(0.0, 0, 3, 4)], (10.0, 20.0))
    assert summary.per_node[0].time_avg_queue_waiting == pytest.approx(3.0)
    assert summary.per_node[0].time_avg_in_system == pytest.approx(4.0)
    assert summary.per_node[0].utilization_measured == pytest.approx(1.0)
    assert summary.avg_queue_size == pytest.approx(3.0)


def test_piecewise_integral():
    observations = [QueueObservation(0.0, 0, 0, 0), QueueObservation(5.0, 0, 2, 2)]
    summary = compute_metrics(observations, (0.0, 10.0))
    assert summary.per_node[0].time_avg_queue_waiting == pytest.approx(1.0)


def test_changes_before_warmup_are_excluded():
    observations = [QueueObservation(0.0, 0, 10, 10), QueueObservation(4.0, 0, 1, 1)]
    summary = compute_metrics(observations, (5.0, 15.0))
    assert summary.per_node[0].time_avg_queue_waiting == pytest.approx(1.0)


def test_mean_latency_and_percentiles():
    observations = [JobObservation(1.0, 3.0), JobObservation(2.0, 6.0)]
    summary = compute_metrics(observations, (0.0, 10.0), n_nodes=1)
    assert summary.mean_latency == pytest.approx(3.0)
    assert summary.latency_p50 == pytest.approx(3.0)
    assert summary.completed_jobs == 2
    assert summary.generated_jobs == 2


def test_latency_excludes_jobs_created_before_warmup():
    observations = [JobObservation(1.0, 8.0), JobObservation(6.0, 9.0), JobObservation(7.0, None)]
    summary = compute_metrics(observations, (5.0, 10.0), n_nodes=1)
    assert summary.mean_latency == pytest.approx(3.0)
    assert summary.completed_jobs == 1
    assert summary.generated_jobs == 2
    assert summary.completed_jobs <= summary.generated_jobs


def test_no_completions_leaves_latency_empty():
    summary = compute_metrics([QueueObservation(0.0, 0, 1, 1)], (0.0, 1.0))
    assert summary.mean_latency is None
    assert summary.latency_p95 is None


def test_empty_window_is_rejected():
    with pytest.raises(ConfigurationError) as excinfo:
        compute_metrics([], (5.0, 5.0), n_nodes=1)
    assert excinfo.value.field == "window"


def test_measured_input_rate():
    observations = [TaskArrivalObservation(float(t), 0) for t in range(100)]
    summary = compute_metrics(observations, (0.0, 100.0), n_nodes=1)
    assert summary.per_node[0].input_rate_measured == pytest.approx(1.0)


def test_growth_slope_of_linear_ramp():
    observations = [OutstandingObservation(float(t), 2 * t) for t in range(1, 101)]
    summary = compute_metrics(observations, (0.0, 100.0), n_nodes=1, slope_samples=200)
    assert summary.growth_slope == pytest.approx(2.0, rel=0.02)


def test_least_squares_slope():
    assert least_squares_slope([0, 1, 2, 3], [1, 3, 5, 7]) == pytest.approx(2.0)
    assert least_squares_slope([1.0], [5.0]) == 0.0


def test_close_at_truncates_window():
    collector = MetricsCollector(1, 0.0, 100.0)
    collector.node_changed(0, 0.0, 2, 3)
    collector.close_at(50.0)
    summary = collector.summarize()
    assert summary.window_end == 50.0
    assert summary.avg_queue_size == pytest.approx(2.0)


def test_close_before_warmup_gives_empty_summary():
    collector = MetricsCollector(2, 10.0, 100.0)
    collector.node_changed(0, 1.0, 5, 6)
    collector.close_at(4.0)
    summary = collector.summarize()
    assert summary.avg_queue_size == 0.0
    assert summary.mean_latency is None
    assert len(summary.per_node) == 2


class TestVerdict:
    def _summary(self, slope, start_value, end_value, window=(0.0, 100.0)):
        observations = [OutstandingObservation(window[0], start_value)]
        summary = compute_metrics(observations, window, n_nodes=1)
        return replace(summary, growth_slope=slope, outstanding_at_start=start_value, outstanding_at_end=end_value)

    def test_growing(self):
        assert classify_verdict(self._summary(2.0, 0, 200), reference_rate=2.0) == VERDICT_GROWING

    def test_small_slope_is_stable(self):
        assert classify_verdict(self._summary(0.05, 0, 5), reference_rate=2.0) == VERDICT_STABLE

    def test_slope_without_rise_is_stable(self):
        assert classify_verdict(self._summary(2.0, 100, 110), reference_rate=2.0) == VERDICT_STABLE

    def test_aborted_wins(self):
        assert classify_verdict(self._summary(0.0, 0, 0), 1.0, aborted=True) == VERDICT_ABORTED


def test_worst_verdict_ordering():
    assert worst_verdict([VERDICT_STABLE, VERDICT_GROWING]) == VERDICT_GROWING
    assert worst_verdict([VERDICT_GROWING, VERDICT_ABORTED, VERDICT_STABLE]) == VERDICT_ABORTED
    assert worst_verdict([]) == VERDICT_STABLE
