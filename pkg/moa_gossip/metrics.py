"""キュー長・レイテンシ・増加傾向の計測。

キュー長は区分定数関数としてイベント駆動で厳密に積分する（定期サンプリング
ではない）。すべての平均は計測窓 [warmup, horizon] の中だけで計算する。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError

VERDICT_STABLE = "stable-looking"
VERDICT_GROWING = "growing"
VERDICT_ABORTED = "aborted-by-guard"
VERDICT_SEVERITY = {VERDICT_STABLE: 0, VERDICT_GROWING: 1, VERDICT_ABORTED: 2}

DEFAULT_SLOPE_SAMPLES = 1000


class TimeAverage:
    """区分定数関数の窓内積分。"""

    __slots__ = ("start", "end", "last_time", "value", "area")

    def __init__(self, start: float, end: float) -> None:
        self.start = start
        self.end = end
        self.last_time = start
        self.value = 0.0
        self.area = 0.0

    def update(self, time: float, value: float) -> None:
        lo = self.last_time if self.last_time > self.start else self.start
        hi = time if time < self.end else self.end
        if hi > lo:
            self.area += self.value * (hi - lo)
        if time > self.last_time:
            self.last_time = time
        self.value = value

    def mean(self) -> float:
        self.update(self.end, self.value)
        return self.area / (self.end - self.start)


class GridSampler:
    """区分定数関数を窓内の等間隔グリッドで読み取る（回帰用）。"""

    __slots__ = ("points", "index", "value", "samples")

    def __init__(self, start: float, end: float, count: int) -> None:
        self.points: List[float] = np.linspace(start, end, max(count, 2)).tolist()
        self.index = 0
        self.value = 0.0
        self.samples: List[float] = []

    def update(self, time: float, value: float) -> None:
        points = self.points
        while self.index < len(points) and points[self.index] < time:
            self.samples.append(self.value)
            self.index += 1
        self.value = value

    def truncate(self, end: float) -> None:
        self.points = [p for p in self.points if p <= end] or [end]
        self.index = min(self.index, len(self.points))
        del self.samples[self.index:]

    def finish(self) -> Tuple[List[float], List[float]]:
        while self.index < len(self.points):
            self.samples.append(self.value)
            self.index += 1
        return self.points, self.samples


def least_squares_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) < 2:
        return 0.0
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    dx = x - x.mean()
    denom = float(np.dot(dx, dx))
    if denom == 0.0:
        return 0.0
    return float(np.dot(dx, y - y.mean()) / denom)


@dataclass(frozen=True)
class NodeReport:
    node_id: int
    time_avg_queue_waiting: float
    time_avg_in_system: float
    utilization_measured: float
    tasks_served: int
    input_rate_measured: float


@dataclass(frozen=True)
class MetricsSummary:
    window_start: float
    window_end: float
    per_node: Tuple[NodeReport, ...]
    avg_queue_size: float
    mean_latency: Optional[float]
    latency_p50: Optional[float]
    latency_p95: Optional[float]
    completed_jobs: int
    generated_jobs: int
    growth_slope: float
    queued_slope: float
    outstanding_at_start: float
    outstanding_at_end: float


@dataclass(frozen=True)
class QueueObservation:
    time: float
    node: int
    waiting: int
    in_system: int


@dataclass(frozen=True)
class TaskArrivalObservation:
    time: float
    node: int


@dataclass(frozen=True)
class TaskServedObservation:
    time: float
    node: int


@dataclass(frozen=True)
class JobObservation:
    created_at: float
    completed_at: Optional[float] = None


@dataclass(frozen=True)
class OutstandingObservation:
    time: float
    value: int


Observation = Union[
    QueueObservation,
    TaskArrivalObservation,
    TaskServedObservation,
    JobObservation,
    OutstandingObservation,
]


class MetricsCollector:
    """シミュレータ/ライブ実行から観測を逐次受け取り、窓内の指標をまとめる。"""

    def __init__(self, n_nodes: int, start: float, end: float, slope_samples: int = DEFAULT_SLOPE_SAMPLES) -> None:
        if not end > start:
            raise ConfigurationError("window", f"measurement window is empty: [{start}, {end}]")
        self.n_nodes = n_nodes
        self.start = start
        self.end = end
        self.waiting = [TimeAverage(start, end) for _ in range(n_nodes)]
        self.in_system = [TimeAverage(start, end) for _ in range(n_nodes)]
        self._node_in_system = [0] * n_nodes
        self._total_in_system = 0
        self.queued_sampler = GridSampler(start, end, slope_samples)
        self.outstanding_sampler = GridSampler(start, end, slope_samples)
        self._outstanding_seen = False
        self.arrivals = [0] * n_nodes
        self.served = [0] * n_nodes
        self.latencies: List[float] = []
        self.generated = 0
        self.completed = 0

    def node_changed(self, node: int, time: float, waiting: int, in_system: int) -> None:
        self.waiting[node].update(time, waiting)
        self.in_system[node].update(time, in_system)
        self._total_in_system += in_system - self._node_in_system[node]
        self._node_in_system[node] = in_system
        self.queued_sampler.update(time, self._total_in_system)

    def outstanding_changed(self, time: float, value: int) -> None:
        self._outstanding_seen = True
        self.outstanding_sampler.update(time, value)

    def task_arrived(self, node: int, time: float) -> None:
        if self.start <= time <= self.end:
            self.arrivals[node] += 1

    def task_served(self, node: int, time: float) -> None:
        if self.start <= time <= self.end:
            self.served[node] += 1

    def job_created(self, time: float) -> None:
        if self.start <= time <= self.end:
            self.generated += 1

    def job_completed(self, created_at: float, completed_at: float) -> None:
        # warmup 前に生成されたジョブは初期化バイアスを避けるため除外する
        if created_at >= self.start and completed_at <= self.end and created_at <= self.end:
            self.completed += 1
            self.latencies.append(completed_at - created_at)

    def close_at(self, time: float) -> None:
        """ガードによる打ち切り時に計測窓の終端を前倒しする。"""
        if time >= self.end:
            return
        self.end = time if time > self.start else self.start
        for avg in (*self.waiting, *self.in_system):
            avg.end = self.end
        self.queued_sampler.truncate(self.end)
        self.outstanding_sampler.truncate(self.end)

    def _empty_summary(self) -> MetricsSummary:
        per_node = tuple(
            NodeReport(node, 0.0, 0.0, 0.0, self.served[node], 0.0) for node in range(self.n_nodes)
        )
        return MetricsSummary(
            window_start=self.start,
            window_end=self.end,
            per_node=per_node,
            avg_queue_size=0.0,
            mean_latency=None,
            latency_p50=None,
            latency_p95=None,
            completed_jobs=0,
            generated_jobs=0,
            growth_slope=0.0,
            queued_slope=0.0,
            outstanding_at_start=0.0,
            outstanding_at_end=0.0,
        )

    def summarize(self) -> MetricsSummary:
        length = self.end - self.start
        if length <= 0:
            return self._empty_summary()
        per_node = []
        for node in range(self.n_nodes):
            waiting = self.waiting[node].mean()
            in_system = self.in_system[node].mean()
            per_node.append(
                NodeReport(
                    node_id=node,
                    time_avg_queue_waiting=waiting,
                    time_avg_in_system=in_system,
                    utilization_measured=in_system - waiting,
                    tasks_served=self.served[node],
                    input_rate_measured=self.arrivals[node] / length,
                )
            )

        queued_x, queued_y = self.queued_sampler.finish()
        if self._outstanding_seen:
            growth_x, growth_y = self.outstanding_sampler.finish()
        else:
            growth_x, growth_y = queued_x, queued_y

        mean_latency = p50 = p95 = None
        if self.latencies:
            values = np.asarray(self.latencies, dtype=float)
            mean_latency = float(values.mean())
            p50, p95 = (float(v) for v in np.percentile(values, [50, 95]))

        return MetricsSummary(
            window_start=self.start,
            window_end=self.end,
            per_node=tuple(per_node),
            avg_queue_size=float(np.mean([r.time_avg_queue_waiting for r in per_node])),
            mean_latency=mean_latency,
            latency_p50=p50,
            latency_p95=p95,
            completed_jobs=self.completed,
            generated_jobs=self.generated,
            growth_slope=least_squares_slope(growth_x, growth_y),
            queued_slope=least_squares_slope(queued_x, queued_y),
            outstanding_at_start=float(growth_y[0]),
            outstanding_at_end=float(growth_y[-1]),
        )


def compute_metrics(
    observations: Iterable[Observation],
    window: Tuple[float, float],
    n_nodes: Optional[int] = None,
    slope_samples: int = DEFAULT_SLOPE_SAMPLES,
) -> MetricsSummary:
    """時刻順の観測列から窓内の指標を計算する。

    Args:
        observations: 時刻順に並んだ観測（JobObservation は順不同でよい）
        window: 計測窓 (warmup, horizon)
        n_nodes: ノード数。省略時は観測に現れた最大ノード番号 + 1
        slope_samples: 増加傾向の回帰に使うグリッド点数
    """
    items = list(observations)
    if n_nodes is None:
        nodes = [o.node for o in items if hasattr(o, "node")]
        n_nodes = max(nodes) + 1 if nodes else 1
    collector = MetricsCollector(n_nodes, window[0], window[1], slope_samples)
    for item in items:
        if isinstance(item, QueueObservation):
            collector.node_changed(item.node, item.time, item.waiting, item.in_system)
        elif isinstance(item, TaskArrivalObservation):
            collector.task_arrived(item.node, item.time)
        elif isinstance(item, TaskServedObservation):
            collector.task_served(item.node, item.time)
        elif isinstance(item, OutstandingObservation):
            collector.outstanding_changed(item.time, item.value)
        elif isinstance(item, JobObservation):
            collector.job_created(item.created_at)
            if item.completed_at is not None:
                collector.job_completed(item.created_at, item.completed_at)
        else:
            raise TypeError(f"unsupported observation: {item!r}")
    return collector.summarize()


def classify_verdict(summary: MetricsSummary, reference_rate: float, aborted: bool = False) -> str:
    """増加傾向から安定性を判定する（診断用であり証明ではない）。

    growing となるのは、回帰の傾きが基準レートの 5% を超え、かつ窓内で
    未処理数が傾き × 窓長の半分以上実際に増えている場合。
    """
    if aborted:
        return VERDICT_ABORTED
    threshold = 0.05 * abs(reference_rate)
    window = summary.window_end - summary.window_start
    rise = summary.outstanding_at_end - summary.outstanding_at_start
    if summary.growth_slope > threshold and rise > 0.5 * summary.growth_slope * window:
        return VERDICT_GROWING
    return VERDICT_STABLE


def worst_verdict(verdicts: Iterable[str]) -> str:
    return max(verdicts, key=lambda v: VERDICT_SEVERITY.get(v, 0), default=VERDICT_STABLE)
