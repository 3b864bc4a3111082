"""分散 MoA ネットワークの離散事象シミュレータ。

n 台の端末がそれぞれ FCFS キューと LLM 1 台を持ち、ユーザごとの到着過程
（レート λ）でプロンプトが発生する。各プロンプトは `protocol.spawn_job` で
ジョブ化され、推論完了ごとに発信元で `protocol.advance_job` が走る。

イベントは (time, seq) の辞書式順で処理し、同時刻のイベントは生成順で
並べる。乱数は用途別のサブストリームに分けてあり、同じ設定とシードなら
レポートもイベントトレースもビット単位で一致する。
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Deque, Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .errors import ConfigurationError
from .metrics import (
    DEFAULT_SLOPE_SAMPLES,
    MetricsCollector,
    NodeReport,
    classify_verdict,
    worst_verdict,
)
from .progress import iter_with_progress
from .protocol import (
    InferenceTask,
    JobState,
    Prompt,
    ProtocolParams,
    ResponseMsg,
    advance_job,
    spawn_job,
    total_inferences,
)
from .queueing import RateSummary, ServiceProfile, is_stable_heterogeneous, overload_rate
from .rng import RandomStreams
from .sampling import ArrivalSpec, DelaySpec, ServiceSpec, sample_delay, sample_interarrival, sample_service

logger = logging.getLogger("moa_gossip.simulator")

DEFAULT_QUEUE_GUARD = 1_000_000
DEFAULT_WARMUP_FRACTION = 0.1


@dataclass(frozen=True)
class Injection:
    """更新過程とは別に、指定時刻・指定ノードへ 1 件だけ投入するプロンプト。"""

    time: float
    origin: int
    text: str = ""


@dataclass(frozen=True)
class MoAConfig:
    """1 回のシミュレーション実験の完全な記述。

    λ はユーザ 1 人あたりの到着レート（全体で nλ）。services はノードごとの
    推論時間分布で、長さは n と一致する必要がある。warmup を省略すると
    horizon の 10% になる。
    """

    params: ProtocolParams
    arrival: ArrivalSpec
    services: Tuple[ServiceSpec, ...]
    network_delay: DelaySpec = DelaySpec()
    horizon: float = 10_000.0
    warmup: Optional[float] = None
    seed: int = 0
    queue_guard: Optional[int] = DEFAULT_QUEUE_GUARD
    injections: Tuple[Injection, ...] = ()
    slope_samples: int = DEFAULT_SLOPE_SAMPLES
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.horizon * DEFAULT_WARMUP_FRACTION)
        if not self.horizon > 0:
            raise ConfigurationError("horizon", f"must be > 0, got {self.horizon}")
        if not 0 <= self.warmup < self.horizon:
            raise ConfigurationError("warmup", f"must satisfy 0 <= warmup < horizon ({self.horizon}), got {self.warmup}")
        if len(self.services) != self.params.n:
            raise ConfigurationError(
                "alpha", f"expected {self.params.n} per-node service specs, got {len(self.services)}"
            )
        if self.queue_guard is not None and self.queue_guard < 1:
            raise ConfigurationError("queue_guard", f"must be >= 1, got {self.queue_guard}")
        if self.slope_samples < 2:
            raise ConfigurationError("slope_samples", f"must be >= 2, got {self.slope_samples}")
        for injection in self.injections:
            if not 0 <= injection.origin < self.params.n:
                raise ConfigurationError("injections", f"origin {injection.origin} outside [0, {self.params.n})")
            if injection.time < 0:
                raise ConfigurationError("injections", f"time must be >= 0, got {injection.time}")

    @classmethod
    def create(
        cls,
        n: int,
        k: int,
        M: int,
        lam: float,
        alpha: Union[float, Sequence[float]],
        service_dist: str = "exponential",
        arrival_dist: str = "poisson",
        **kwargs: Any,
    ) -> "MoAConfig":
        """スカラーまたはノードごとの α から設定を組み立てるショートカット。"""
        alphas = [float(alpha)] * n if isinstance(alpha, (int, float)) else [float(a) for a in alpha]
        cv = kwargs.pop("service_cv", 1.0)
        return cls(
            params=ProtocolParams(n=n, k=k, M=M),
            arrival=ArrivalSpec(rate=lam, dist=arrival_dist),
            services=tuple(ServiceSpec(mean=a, dist=service_dist, cv=cv) for a in alphas),
            **kwargs,
        )

    @property
    def profile(self) -> ServiceProfile:
        return ServiceProfile(tuple(spec.mean for spec in self.services))

    @property
    def alpha_max(self) -> float:
        return self.profile.alpha_max

    def rate_summary(self) -> RateSummary:
        p = self.params
        return is_stable_heterogeneous(self.arrival.rate, p.k, p.M, self.profile)

    @property
    def display_label(self) -> str:
        if self.label:
            return self.label
        return f"M={self.params.M},k={self.params.k}"


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    DELIVERY = "delivery"
    SERVICE_COMPLETE = "service_complete"
    RESPONSE_DELIVERY = "response_delivery"


class Event(NamedTuple):
    time: float
    seq: int
    kind: EventKind
    node: int
    payload: Any


class EventQueue:
    """(time, seq) 順のヒープ。seq は単調増加で同時刻イベントの順序を決める。"""

    def __init__(self) -> None:
        self._heap: List[Event] = []
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time: float, kind: EventKind, node: int, payload: Any = None) -> Event:
        event = Event(time, next(self._counter), kind, node, payload)
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> Event:
        return heapq.heappop(self._heap)


@dataclass
class NodeState:
    """1 台の端末。LLM は 1 台なので同時に推論できるタスクは 1 つだけ。"""

    node_id: int
    service: ServiceSpec
    fcfs_queue: Deque[InferenceTask] = field(default_factory=deque)
    in_service: Optional[Tuple[InferenceTask, float]] = None
    buffer: Dict[str, JobState] = field(default_factory=dict)
    tasks_served: int = 0
    busy_time: float = 0.0
    in_system: int = 0
    enqueue_log: Optional[List[str]] = None
    start_log: Optional[List[str]] = None

    @property
    def idle(self) -> bool:
        return self.in_service is None


@dataclass(frozen=True)
class SimReport:
    label: str
    seed: int
    n: int
    k: int
    M: int
    lam: float
    alpha_max: float
    utilization_theory: float
    stable_theory: bool
    per_node: Tuple[NodeReport, ...]
    window_start: float
    window_end: float
    avg_queue_size: float
    avg_in_system: float
    mean_latency: Optional[float]
    latency_p50: Optional[float]
    latency_p95: Optional[float]
    completed_jobs: int
    generated_jobs: int
    growth_slope: float
    queued_slope: float
    overload_rate: float
    verdict: str
    inference_count_mismatches: int
    completed_total: int
    aborted_at: Optional[float]
    events_processed: int


class Simulator:
    """MoAConfig を 1 回実行する。trace を渡すと 1 イベント 1 行の JSON を書き出す。"""

    def __init__(self, config: MoAConfig, trace: Optional[TextIO] = None, audit: bool = False) -> None:
        self.config = config
        self.params = config.params
        n = self.params.n
        streams = RandomStreams(config.seed)
        self._arrival_rngs = [streams.generator("arrival", i) for i in range(n)]
        self._service_rngs = [streams.generator("service", i) for i in range(n)]
        self._neighbor_rngs = [streams.generator("neighbors", i) for i in range(n)]
        self._delay_rngs = [streams.generator("network", i) for i in range(n)]
        self.nodes = [NodeState(i, config.services[i]) for i in range(n)]
        if audit:
            for node in self.nodes:
                node.enqueue_log = []
                node.start_log = []
        self.audit = audit
        self.completed_log: List[JobState] = []
        self.events = EventQueue()
        self.metrics = MetricsCollector(n, config.warmup, config.horizon, config.slope_samples)
        self.now = 0.0
        self._trace = trace
        self._per_job = total_inferences(self.params)
        self._prompt_counters = [0] * n
        self._outstanding = 0
        self._queued_total = 0
        self._completed_total = 0
        self._mismatches = 0
        self._events_processed = 0
        self._aborted_at: Optional[float] = None

    # ------------------------------------------------------------------
    # 実行
    # ------------------------------------------------------------------
    def run(self) -> SimReport:
        config = self.config
        if config.arrival.dist != "none":
            for node in range(self.params.n):
                first = sample_interarrival(config.arrival, self._arrival_rngs[node])
                self.events.push(first, EventKind.ARRIVAL, node, None)
        for injection in sorted(config.injections, key=lambda inj: (inj.time, inj.origin)):
            self.events.push(injection.time, EventKind.ARRIVAL, injection.origin, injection)

        horizon = config.horizon
        guard = config.queue_guard
        events = self.events
        while len(events):
            event = events.pop()
            if event.time > horizon:
                break
            self.now = event.time
            self._events_processed += 1
            if self._trace is not None:
                self._write_trace(event)
            kind = event.kind
            if kind is EventKind.DELIVERY:
                self._on_delivery(self.nodes[event.node], event.payload)
            elif kind is EventKind.SERVICE_COMPLETE:
                self._on_service_complete(self.nodes[event.node], event.payload)
            elif kind is EventKind.RESPONSE_DELIVERY:
                self._on_response(self.nodes[event.node], event.payload)
            else:
                self._on_arrival(event.node, event.payload)
            if guard is not None and self._queued_total > guard:
                self._aborted_at = self.now
                logger.warning(
                    "Queue guard exceeded at t=%.3f (%d queued tasks > %d); aborting run.",
                    self.now,
                    self._queued_total,
                    guard,
                )
                break
        return self._build_report()

    # ------------------------------------------------------------------
    # イベントハンドラ
    # ------------------------------------------------------------------
    def _on_arrival(self, origin: int, injection: Optional[Injection]) -> None:
        index = self._prompt_counters[origin]
        self._prompt_counters[origin] += 1
        text = injection.text if injection is not None and injection.text else f"prompt {origin}-{index}"
        prompt = Prompt(prompt_id=f"n{origin}-p{index}", origin=origin, text=text, created_at=self.now)
        job, tasks = spawn_job(prompt, self.params, self._neighbor_rngs[origin])
        self.nodes[origin].buffer[job.job_id] = job
        self._outstanding += self._per_job
        self.metrics.outstanding_changed(self.now, self._outstanding)
        self.metrics.job_created(self.now)
        self._dispatch(origin, tasks)
        if injection is None:
            gap = sample_interarrival(self.config.arrival, self._arrival_rngs[origin])
            self.events.push(self.now + gap, EventKind.ARRIVAL, origin, None)

    def _dispatch(self, sender: int, tasks: Iterable[InferenceTask]) -> None:
        delay_spec = self.config.network_delay
        for task in tasks:
            # 自ノード宛てはネットワークを経由しない
            if task.assigned_node == sender or delay_spec.is_zero:
                delay = 0.0
            else:
                delay = sample_delay(delay_spec, self._delay_rngs[sender])
            self.events.push(self.now + delay, EventKind.DELIVERY, task.assigned_node, task)

    def _on_delivery(self, node: NodeState, task: InferenceTask) -> None:
        task = replace(task, enqueued_at=self.now)
        node.fcfs_queue.append(task)
        if node.enqueue_log is not None:
            node.enqueue_log.append(task.task_id)
        self.metrics.task_arrived(node.node_id, self.now)
        if node.in_service is None:
            self._start_service(node)
        self._observe(node)

    def _start_service(self, node: NodeState) -> None:
        task = node.fcfs_queue.popleft()
        duration = sample_service(node, self._service_rngs[node.node_id])
        done_at = self.now + duration
        node.in_service = (task, done_at)
        node.busy_time += duration
        if node.start_log is not None:
            node.start_log.append(task.task_id)
        self.events.push(done_at, EventKind.SERVICE_COMPLETE, node.node_id, task)

    def _on_service_complete(self, node: NodeState, task: InferenceTask) -> None:
        node.in_service = None
        node.tasks_served += 1
        self.metrics.task_served(node.node_id, self.now)
        self._outstanding -= 1
        self.metrics.outstanding_changed(self.now, self._outstanding)

        delay_spec = self.config.network_delay
        if task.origin == node.node_id or delay_spec.is_zero:
            arrival = self.now
        else:
            arrival = self.now + sample_delay(delay_spec, self._delay_rngs[node.node_id])
        response = ResponseMsg(
            task_id=task.task_id,
            job_id=task.job_id,
            producer_node=node.node_id,
            text=f"{task.kind.label}@{node.node_id}:{task.task_id}",
            produced_at=self.now,
            received_at=arrival,
        )
        self.events.push(arrival, EventKind.RESPONSE_DELIVERY, task.origin, response)
        if node.fcfs_queue:
            self._start_service(node)
        self._observe(node)

    def _on_response(self, node: NodeState, response: ResponseMsg) -> None:
        job = node.buffer[response.job_id]
        job, tasks = advance_job(job, response, self.params, self._neighbor_rngs[node.node_id])
        if job.is_completed:
            del node.buffer[job.job_id]
            self._completed_total += 1
            if job.inference_count != self._per_job:
                self._mismatches += 1
                logger.error(
                    "Job %s completed with %d inferences (expected %d).",
                    job.job_id,
                    job.inference_count,
                    self._per_job,
                )
            self.metrics.job_completed(job.original_prompt.created_at, job.completed_at)
            if self.audit:
                self.completed_log.append(job)
            return
        node.buffer[job.job_id] = job
        self._dispatch(node.node_id, tasks)

    def _observe(self, node: NodeState) -> None:
        waiting = len(node.fcfs_queue)
        in_system = waiting + (0 if node.in_service is None else 1)
        self._queued_total += in_system - node.in_system
        node.in_system = in_system
        self.metrics.node_changed(node.node_id, self.now, waiting, in_system)

    def _write_trace(self, event: Event) -> None:
        payload = event.payload
        job = task = None
        if isinstance(payload, InferenceTask):
            job, task = payload.job_id, payload.task_id
        elif isinstance(payload, ResponseMsg):
            job, task = payload.job_id, payload.task_id
        record = {
            "time": event.time,
            "seq": event.seq,
            "kind": event.kind.value,
            "node": event.node,
            "job": job,
            "task": task,
        }
        self._trace.write(json.dumps(record, separators=(",", ":")) + "\n")

    # ------------------------------------------------------------------
    # レポート
    # ------------------------------------------------------------------
    def _build_report(self) -> SimReport:
        config = self.config
        if self._aborted_at is not None:
            self.metrics.close_at(self._aborted_at)
        summary = self.metrics.summarize()
        theory = config.rate_summary()
        overload = overload_rate(self.params.n, theory)
        reference = overload if overload != 0 else self.params.n * theory.r_in
        verdict = classify_verdict(summary, reference, aborted=self._aborted_at is not None)
        per_node = summary.per_node
        return SimReport(
            label=config.display_label,
            seed=config.seed,
            n=self.params.n,
            k=self.params.k,
            M=self.params.M,
            lam=config.arrival.rate,
            alpha_max=config.alpha_max,
            utilization_theory=theory.utilization,
            stable_theory=theory.stable,
            per_node=per_node,
            window_start=summary.window_start,
            window_end=summary.window_end,
            avg_queue_size=summary.avg_queue_size,
            avg_in_system=float(np.mean([r.time_avg_in_system for r in per_node])),
            mean_latency=summary.mean_latency,
            latency_p50=summary.latency_p50,
            latency_p95=summary.latency_p95,
            completed_jobs=summary.completed_jobs,
            generated_jobs=summary.generated_jobs,
            growth_slope=summary.growth_slope,
            queued_slope=summary.queued_slope,
            overload_rate=overload,
            verdict=verdict,
            inference_count_mismatches=self._mismatches,
            completed_total=self._completed_total,
            aborted_at=self._aborted_at,
            events_processed=self._events_processed,
        )


def run_simulation(config: MoAConfig, trace: Optional[TextIO] = None) -> SimReport:
    report = Simulator(config, trace=trace).run()
    logger.info(
        "Simulated %s seed=%d: verdict=%s, mean latency=%s, avg queue=%.4f",
        report.label,
        report.seed,
        report.verdict,
        "n/a" if report.mean_latency is None else f"{report.mean_latency:.4f}",
        report.avg_queue_size,
    )
    return report


AGGREGATED_METRICS = (
    "avg_queue_size",
    "avg_in_system",
    "mean_latency",
    "latency_p50",
    "latency_p95",
    "growth_slope",
    "queued_slope",
    "completed_jobs",
    "generated_jobs",
)


@dataclass(frozen=True)
class ReplicatedReport:
    """複数シードの結果。stderr は反復 1 回のとき None。"""

    reports: Tuple[SimReport, ...]
    mean: Dict[str, Optional[float]]
    stderr: Dict[str, Optional[float]]
    verdict: str

    @property
    def first(self) -> SimReport:
        return self.reports[0]


def aggregate_reports(reports: Sequence[SimReport]) -> ReplicatedReport:
    mean: Dict[str, Optional[float]] = {}
    stderr: Dict[str, Optional[float]] = {}
    for name in AGGREGATED_METRICS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            mean[name] = stderr[name] = None
            continue
        arr = np.asarray(values, dtype=float)
        mean[name] = float(arr.mean())
        stderr[name] = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else None
    return ReplicatedReport(
        reports=tuple(reports),
        mean=mean,
        stderr=stderr,
        verdict=worst_verdict(r.verdict for r in reports),
    )


def _run_seed(config: MoAConfig) -> SimReport:
    return Simulator(config).run()


def replicate(
    config: MoAConfig,
    replications: int,
    workers: int = 1,
    progress: bool = False,
) -> ReplicatedReport:
    """seed, seed+1, … で run_simulation を繰り返し、平均と標準誤差をまとめる。"""
    if replications < 1:
        raise ConfigurationError("replications", f"must be >= 1, got {replications}")
    configs = [replace(config, seed=config.seed + i) for i in range(replications)]
    desc = f"Replicating {config.display_label}"
    if workers > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_seed, configs)
            reports = list(iter_with_progress(results, desc, progress, total=replications))
    else:
        reports = list(
            iter_with_progress((_run_seed(c) for c in configs), desc, progress, total=replications)
        )
    aggregated = aggregate_reports(reports)
    logger.info(
        "Replicated %s x%d: verdict=%s, avg queue=%s",
        config.display_label,
        replications,
        aggregated.verdict,
        aggregated.mean.get("avg_queue_size"),
    )
    return aggregated
