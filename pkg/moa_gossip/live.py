"""実バックエンドに対して MoA プロトコルを実行するライブモード。

各ノードはワーカースレッド 1 本と FCFS キューを持ち、同時に処理する推論は
1 件だけ。ジョブ状態の更新（advance_job）は 1 つのロックの下で行う。
バックエンドが失敗したジョブは failed として記録し、残りのジョブは続行する。
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, TextIO, Tuple

from .backends import Backend, InferenceRequest, build_backend, validate_backend
from .config import RunConfigFile
from .errors import BackendError, ConfigurationError, MoAError
from .metrics import JobObservation, Observation, QueueObservation, compute_metrics
from .protocol import InferenceTask, JobState, Prompt, ResponseMsg, advance_job, spawn_job, total_inferences
from .rng import RandomStreams
from .sampling import sample_interarrival

logger = logging.getLogger("moa_gossip.live")


@dataclass
class StageTiming:
    task_id: str
    stage: str
    layer: int
    node: int
    enqueued_at: float
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    backend_id: Optional[str] = None


@dataclass
class LiveRecord:
    """プロンプト 1 件分の出力。時刻は実行開始からの経過秒。"""

    prompt_id: str
    origin: int
    prompt: str
    status: str = "pending"
    response: Optional[str] = None
    created_at: float = 0.0
    completed_at: Optional[float] = None
    latency: Optional[float] = None
    error: Optional[str] = None
    stages: List[StageTiming] = field(default_factory=list)


@dataclass(frozen=True)
class LiveResult:
    records: Tuple[LiveRecord, ...]
    summary: Dict[str, Any]


class LiveRunner:
    def __init__(
        self,
        config: RunConfigFile,
        backends: Optional[Sequence[Backend]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.params = config.params
        seed = config.simulation.seed
        n = self.params.n
        self.backends = list(backends) if backends is not None else [
            build_backend(spec, node_id, seed) for node_id, spec in enumerate(config.backends)
        ]
        if len(self.backends) != n:
            raise ConfigurationError("backend", f"expected {n} backends, got {len(self.backends)}")
        streams = RandomStreams(seed)
        self._neighbor_rngs = [streams.generator("neighbors", i) for i in range(n)]
        self._arrival_rngs = [streams.generator("arrival", i) for i in range(n)]
        self._sleep = sleep
        self._lock = threading.Lock()
        self._done = threading.Condition(self._lock)
        self._queues: List["queue.Queue[Optional[InferenceTask]]"] = [queue.Queue() for _ in range(n)]
        self._waiting = [0] * n
        self._busy = [False] * n
        self._jobs: Dict[str, JobState] = {}
        self._records: Dict[str, LiveRecord] = {}
        self._timings: Dict[str, StageTiming] = {}
        self._observations: List[Observation] = []
        self._open_jobs = 0
        self._started = 0.0

    def _now(self) -> float:
        return time.perf_counter() - self._started

    # ------------------------------------------------------------------
    def check_health(self) -> None:
        """起動時に全バックエンドを確認し、1 つでも不調なら BackendError で止める。"""
        seen = set()
        for node_id, backend in enumerate(self.backends):
            if backend.backend_id in seen:
                continue
            seen.add(backend.backend_id)
            report = validate_backend(backend)
            if not report.healthy:
                raise BackendError(f"backend for node {node_id} is unhealthy: {report.cause}")

    def _submit_times(self, prompts: Sequence[Tuple[int, str]]) -> List[float]:
        if not self.config.live.pace_arrivals:
            return [0.0] * len(prompts)
        clocks = [0.0] * self.params.n
        times = []
        for origin, _ in prompts:
            clocks[origin] += sample_interarrival(self.config.simulation.arrival, self._arrival_rngs[origin])
            times.append(clocks[origin])
        return times

    def run(self, prompts: Sequence[Tuple[int, str]]) -> LiveResult:
        if not prompts:
            raise ConfigurationError("prompts", "prompts file contains no prompts")
        if self.config.live.health_check:
            self.check_health()

        workers = [
            threading.Thread(target=self._worker, args=(node_id,), name=f"moa-node-{node_id}", daemon=True)
            for node_id in range(self.params.n)
        ]
        self._started = time.perf_counter()
        for worker in workers:
            worker.start()

        schedule = sorted(
            ((at, index, origin, text) for index, ((origin, text), at) in enumerate(zip(prompts, self._submit_times(prompts)))),
        )
        counters = [0] * self.params.n
        order: List[str] = []
        for at, _, origin, text in schedule:
            wait = at - self._now()
            if wait > 0:
                self._sleep(wait)
            prompt_id = f"n{origin}-p{counters[origin]}"
            counters[origin] += 1
            order.append(prompt_id)
            self._submit(prompt_id, origin, text)

        with self._done:
            while self._open_jobs > 0:
                self._done.wait()
            finished = self._now()
        for q in self._queues:
            q.put(None)
        for worker in workers:
            worker.join()

        records = tuple(self._records[prompt_id] for prompt_id in order)
        summary = self._summarize(records, finished)
        logger.info(
            "Live run finished: %d completed, %d failed, mean latency=%s",
            summary["completed"],
            summary["failed"],
            summary["mean_latency"],
        )
        return LiveResult(records=records, summary=summary)

    # ------------------------------------------------------------------
    def _submit(self, prompt_id: str, origin: int, text: str) -> None:
        with self._lock:
            now = self._now()
            prompt = Prompt(prompt_id=prompt_id, origin=origin, text=text, created_at=now)
            job, tasks = spawn_job(prompt, self.params, self._neighbor_rngs[origin])
            self._jobs[job.job_id] = job
            self._records[job.job_id] = LiveRecord(prompt_id=prompt_id, origin=origin, prompt=text, created_at=now)
            self._open_jobs += 1
            self._enqueue_locked(tasks, now)

    def _enqueue_locked(self, tasks: Sequence[InferenceTask], now: float) -> None:
        for task in tasks:
            timing = StageTiming(
                task_id=task.task_id,
                stage=task.kind.stage.value,
                layer=task.kind.layer,
                node=task.assigned_node,
                enqueued_at=now,
            )
            self._timings[task.task_id] = timing
            self._records[task.job_id].stages.append(timing)
            node = task.assigned_node
            self._waiting[node] += 1
            self._observe_locked(node, now)
            self._queues[node].put(task)

    def _observe_locked(self, node: int, now: float) -> None:
        waiting = self._waiting[node]
        self._observations.append(QueueObservation(now, node, waiting, waiting + int(self._busy[node])))

    def _worker(self, node_id: int) -> None:
        backend = self.backends[node_id]
        spec = self.config.backends[node_id]
        tasks = self._queues[node_id]
        while True:
            task = tasks.get()
            if task is None:
                return
            with self._lock:
                now = self._now()
                self._waiting[node_id] -= 1
                skip = self._records[task.job_id].status == "failed"
                self._busy[node_id] = not skip
                self._timings[task.task_id].started_at = None if skip else now
                self._observe_locked(node_id, now)
            if skip:
                continue
            try:
                request = InferenceRequest.from_bundle(
                    task.payload, model=spec.model, temperature=spec.temperature, max_tokens=spec.max_tokens
                )
                result = backend.infer(request)
            except MoAError as exc:
                self._fail(task, node_id, exc)
                continue
            except Exception as exc:
                # 想定外の例外でもワーカーを止めずにジョブ失敗として扱う
                logger.exception("Unexpected error on node %d for task %s", node_id, task.task_id)
                self._fail(task, node_id, exc)
                continue
            self._complete(task, node_id, result.text, result.backend_id)

    def _complete(self, task: InferenceTask, node_id: int, text: str, backend_id: str) -> None:
        with self._lock:
            now = self._now()
            self._busy[node_id] = False
            self._observe_locked(node_id, now)
            timing = self._timings[task.task_id]
            timing.finished_at = now
            timing.backend_id = backend_id
            record = self._records[task.job_id]
            if record.status == "failed":
                return
            response = ResponseMsg(
                task_id=task.task_id,
                job_id=task.job_id,
                producer_node=node_id,
                text=text,
                produced_at=now,
                received_at=now,
            )
            try:
                job, tasks = advance_job(
                    self._jobs[task.job_id], response, self.params, self._neighbor_rngs[task.origin]
                )
            except MoAError as exc:
                self._mark_failed_locked(record, exc)
                return
            self._jobs[job.job_id] = job
            if job.is_completed:
                record.status = "completed"
                record.response = text
                record.completed_at = now
                record.latency = now - record.created_at
                if job.inference_count != total_inferences(self.params):
                    logger.error("Job %s completed with %d inferences.", job.job_id, job.inference_count)
                self._open_jobs -= 1
                self._done.notify_all()
                return
            self._enqueue_locked(tasks, now)

    def _fail(self, task: InferenceTask, node_id: int, exc: Exception) -> None:
        with self._lock:
            now = self._now()
            self._busy[node_id] = False
            self._observe_locked(node_id, now)
            self._timings[task.task_id].finished_at = now
            record = self._records[task.job_id]
            if record.status != "failed":
                self._mark_failed_locked(record, exc)

    def _mark_failed_locked(self, record: LiveRecord, exc: Exception) -> None:
        logger.warning("Job %s failed: %s", record.prompt_id, exc)
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        self._open_jobs -= 1
        self._done.notify_all()

    def _summarize(self, records: Sequence[LiveRecord], finished: float) -> Dict[str, Any]:
        observations: List[Observation] = list(self._observations)
        for record in records:
            observations.append(
                JobObservation(created_at=record.created_at, completed_at=record.completed_at)
            )
        window_end = finished if finished > 0 else 1e-9
        metrics = compute_metrics(observations, (0.0, window_end), n_nodes=self.params.n)
        return {
            "summary": True,
            "prompts": len(records),
            "completed": sum(1 for r in records if r.status == "completed"),
            "failed": sum(1 for r in records if r.status == "failed"),
            "mean_latency": metrics.mean_latency,
            "latency_p50": metrics.latency_p50,
            "latency_p95": metrics.latency_p95,
            "avg_queue_size": metrics.avg_queue_size,
            "wall_clock": finished,
        }


def render_live_output(result: LiveResult) -> str:
    lines = [json.dumps(asdict(record), ensure_ascii=False) for record in result.records]
    lines.append(json.dumps(result.summary, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def run_live(
    config: RunConfigFile,
    prompts: Sequence[Tuple[int, str]],
    out: Optional[TextIO] = None,
    backends: Optional[Sequence[Backend]] = None,
) -> LiveResult:
    runner = LiveRunner(config, backends=backends)
    result = runner.run(prompts)
    if out is not None:
        out.write(render_live_output(result))
    return result
