"""分散 MoA プロトコル（提案→連結→集約）の純粋関数実装。

副作用を持たず、乱数生成器は呼び出し側から注入する。離散事象シミュレータ
(`simulator.py`) とライブ実行 (`live.py`) の両方が同じジョブ状態機械を使う。

1 つの元プロンプトにつき次の流れで推論が発生する:

    M = 0: 自ノードで 1 回だけ直接推論 (Direct)
    M ≥ 1: 各レイヤで自ノード + 近傍 k ノードが提案 (Proposal) し、
           k+1 件の応答がそろったら次のレイヤへ。M レイヤ後に
           発信元ノードが集約 (Aggregation) を 1 回行う。

したがって完了したジョブの推論回数は常に (k+1)M+1 回になる。
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ProtocolViolation

AGGREGATOR_SYSTEM_PROMPT = (
    "You have been provided with a set of responses from various open-source models to the "
    "latest user query. Your task is to synthesize these responses into a single, high-quality "
    "response. It is crucial to critically evaluate the information provided in these responses, "
    "recognizing that some of it may be biased or incorrect. Your response should not simply "
    "replicate the given answers but should offer a refined, accurate, and comprehensive reply "
    "to the instruction. Ensure your response is well-structured, coherent, and adheres to the "
    "highest standards of accuracy and reliability. Do not add any additional comments about how "
    "you created these responses. Just synthesize these responses as instructed."
)

RESPONSE_BLOCK_HEADER = "Response {index} (from node {producer}):"
_RESPONSE_BLOCK_RE = re.compile(r"^Response (\d+) \(from node (\d+)\):$", re.MULTILINE)


class Stage(str, Enum):
    DIRECT = "direct"
    PROPOSAL = "proposal"
    AGGREGATION = "aggregation"


@dataclass(frozen=True)
class TaskKind:
    """推論タスクの種別。Proposal のみ 1 始まりのレイヤ番号を持つ。"""

    stage: Stage
    layer: int = 0

    @classmethod
    def direct(cls) -> "TaskKind":
        return cls(Stage.DIRECT)

    @classmethod
    def proposal(cls, layer: int) -> "TaskKind":
        if layer < 1:
            raise ProtocolViolation(f"proposal layer must be >= 1, got {layer}")
        return cls(Stage.PROPOSAL, layer)

    @classmethod
    def aggregation(cls) -> "TaskKind":
        return cls(Stage.AGGREGATION)

    @property
    def uses_system_prompt(self) -> bool:
        """2 レイヤ目以降の提案と集約はシステムプロンプト付きで推論する。"""
        if self.stage is Stage.AGGREGATION:
            return True
        return self.stage is Stage.PROPOSAL and self.layer >= 2

    @property
    def label(self) -> str:
        if self.stage is Stage.PROPOSAL:
            return f"proposal({self.layer})"
        return self.stage.value


@dataclass(frozen=True)
class ProtocolParams:
    """トポロジと MoA 構成。n: ノード数, k: ファンアウト, M: レイヤ数。"""

    n: int
    k: int
    M: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigurationError("n", f"node count must be >= 2, got {self.n}")
        if not 0 <= self.k <= self.n - 1:
            raise ConfigurationError("k", f"must satisfy 0 <= k <= n-1 (n-1={self.n - 1}), got {self.k}")
        if self.M < 0:
            raise ConfigurationError("M", f"layer count must be >= 0, got {self.M}")


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    origin: int
    text: str
    created_at: float


@dataclass(frozen=True)
class MessageBundle:
    """LLM に渡す入力。system_text はシステムプロンプトを使う段階のみ設定される。"""

    user_text: str
    system_text: Optional[str] = None

    def to_messages(self) -> List[dict]:
        messages: List[dict] = []
        if self.system_text is not None:
            messages.append({"role": "system", "content": self.system_text})
        messages.append({"role": "user", "content": self.user_text})
        return messages


@dataclass(frozen=True)
class InferenceTask:
    task_id: str
    job_id: str
    kind: TaskKind
    assigned_node: int
    payload: MessageBundle
    enqueued_at: float
    origin: int


@dataclass(frozen=True)
class ResponseMsg:
    """推論結果。received_at は発信元ノードへ届いた時刻（未設定なら produced_at）。"""

    task_id: str
    job_id: str
    producer_node: int
    text: str
    produced_at: float
    received_at: Optional[float] = None

    @property
    def arrival_time(self) -> float:
        return self.produced_at if self.received_at is None else self.received_at


class Phase(str, Enum):
    AWAITING_LAYER = "awaiting_layer"
    AWAITING_AGGREGATION = "awaiting_aggregation"
    AWAITING_DIRECT = "awaiting_direct"
    COMPLETED = "completed"


@dataclass(frozen=True)
class JobState:
    """元プロンプト 1 件分の fork-join 状態。更新は常に新しいインスタンスを返す。"""

    job_id: str
    origin: int
    original_prompt: Prompt
    phase: Phase
    layer: int = 0
    pending: frozenset = frozenset()
    collected: Tuple[ResponseMsg, ...] = ()
    layer_neighbor_sets: Tuple[Tuple[int, ...], ...] = ()
    inference_count: int = 0
    completed_at: Optional[float] = None
    final_response: Optional[ResponseMsg] = field(default=None, compare=False)

    @property
    def is_completed(self) -> bool:
        return self.phase is Phase.COMPLETED


def select_neighbors(self_id: int, params: ProtocolParams, rng: np.random.Generator) -> Tuple[int, ...]:
    """自ノード以外の n-1 ノードから一様ランダムに k ノードを選び、昇順で返す。"""
    if not 0 <= self_id < params.n:
        raise ConfigurationError("self_id", f"must be in [0, {params.n}), got {self_id}")
    if params.k > params.n - 1:
        raise ConfigurationError("k", f"must satisfy k <= n-1 (n-1={params.n - 1}), got {params.k}")
    if params.k == 0:
        return ()
    others = [node for node in range(params.n) if node != self_id]
    if params.k == len(others):
        return tuple(others)
    picks = rng.choice(len(others), size=params.k, replace=False)
    return tuple(sorted(others[int(i)] for i in picks))


def total_inferences(params: ProtocolParams) -> int:
    return (params.k + 1) * params.M + 1


def format_response_blocks(responses: Sequence[ResponseMsg]) -> str:
    blocks = []
    for index, response in enumerate(responses, start=1):
        header = RESPONSE_BLOCK_HEADER.format(index=index, producer=response.producer_node)
        blocks.append(f"{header}\n{response.text}")
    return "\n\n".join(blocks)


def count_response_blocks(text: str) -> int:
    """連結テンプレートの応答ブロック数を数える。"""
    return len(_RESPONSE_BLOCK_RE.findall(text))


def build_layer_prompt(
    original: Prompt,
    responses: Sequence[ResponseMsg],
    stage: TaskKind,
    expected: Optional[int] = None,
) -> MessageBundle:
    """各段階の LLM 入力を組み立てる。

    Args:
        original: 元プロンプト
        responses: 直前レイヤの応答（到着順）
        stage: 入力を渡す段階
        expected: 応答件数の期待値（k+1）。指定時は件数も検証する

    Returns:
        1 レイヤ目と直接推論は元プロンプトのみ、それ以外はシステムプロンプトと
        番号付き応答ブロックを連結した MessageBundle
    """
    if not stage.uses_system_prompt:
        if responses:
            raise ProtocolViolation(f"{stage.label} stage takes no prior responses, got {len(responses)}")
        return MessageBundle(user_text=original.text)

    if not responses:
        raise ProtocolViolation(f"{stage.label} stage requires the previous layer's responses")
    if expected is not None and len(responses) != expected:
        raise ProtocolViolation(
            f"{stage.label} stage requires exactly {expected} responses, got {len(responses)}"
        )
    user_text = f"{original.text}\n\n{format_response_blocks(responses)}"
    return MessageBundle(user_text=user_text, system_text=AGGREGATOR_SYSTEM_PROMPT)


def _layer_tasks(
    job_id: str,
    origin: int,
    layer: int,
    neighbors: Sequence[int],
    payload: MessageBundle,
    issued_at: float,
) -> List[InferenceTask]:
    # 自ノードが先頭、続いて近傍を昇順に並べる
    kind = TaskKind.proposal(layer)
    targets = (origin, *neighbors)
    return [
        InferenceTask(
            task_id=f"{job_id}/L{layer}/{index}",
            job_id=job_id,
            kind=kind,
            assigned_node=node,
            payload=payload,
            enqueued_at=issued_at,
            origin=origin,
        )
        for index, node in enumerate(targets)
    ]


def spawn_job(
    prompt: Prompt, params: ProtocolParams, rng: np.random.Generator
) -> Tuple[JobState, List[InferenceTask]]:
    """新しい元プロンプトからジョブを生成し、最初の推論タスク群を返す。"""
    if not 0 <= prompt.origin < params.n:
        raise ConfigurationError("origin", f"must be in [0, {params.n}), got {prompt.origin}")
    job_id = prompt.prompt_id

    if params.M == 0:
        task = InferenceTask(
            task_id=f"{job_id}/direct",
            job_id=job_id,
            kind=TaskKind.direct(),
            assigned_node=prompt.origin,
            payload=build_layer_prompt(prompt, (), TaskKind.direct()),
            enqueued_at=prompt.created_at,
            origin=prompt.origin,
        )
        job = JobState(
            job_id=job_id,
            origin=prompt.origin,
            original_prompt=prompt,
            phase=Phase.AWAITING_DIRECT,
            pending=frozenset({task.task_id}),
        )
        return job, [task]

    neighbors = select_neighbors(prompt.origin, params, rng)
    payload = build_layer_prompt(prompt, (), TaskKind.proposal(1))
    tasks = _layer_tasks(job_id, prompt.origin, 1, neighbors, payload, prompt.created_at)
    job = JobState(
        job_id=job_id,
        origin=prompt.origin,
        original_prompt=prompt,
        phase=Phase.AWAITING_LAYER,
        layer=1,
        pending=frozenset(task.task_id for task in tasks),
        layer_neighbor_sets=(neighbors,),
    )
    return job, tasks


def _arrival_key(response: ResponseMsg) -> Tuple[float, str]:
    return (response.arrival_time, response.task_id)


def advance_job(
    job: JobState,
    incoming: ResponseMsg,
    params: ProtocolParams,
    rng: np.random.Generator,
) -> Tuple[JobState, List[InferenceTask]]:
    """応答を 1 件受け取ってジョブを進め、新たに発行するタスクを返す。

    不正な応答（未知・重複・完了済みジョブ宛て）は ProtocolViolation を送出し、
    元の JobState はそのまま残る。
    """
    if job.is_completed:
        raise ProtocolViolation(f"job {job.job_id} is already completed")
    if incoming.job_id != job.job_id:
        raise ProtocolViolation(f"response for job {incoming.job_id} delivered to job {job.job_id}")
    if incoming.task_id not in job.pending:
        raise ProtocolViolation(f"task {incoming.task_id} is not pending for job {job.job_id}")

    pending = job.pending - {incoming.task_id}
    count = job.inference_count + 1

    if job.phase in (Phase.AWAITING_AGGREGATION, Phase.AWAITING_DIRECT):
        done = replace(
            job,
            phase=Phase.COMPLETED,
            pending=frozenset(),
            collected=(),
            inference_count=count,
            completed_at=incoming.arrival_time,
            final_response=incoming,
        )
        return done, []

    collected = tuple(sorted((*job.collected, incoming), key=_arrival_key))
    if pending:
        return replace(job, pending=pending, collected=collected, inference_count=count), []

    issued_at = incoming.arrival_time
    expected = params.k + 1
    if job.layer < params.M:
        next_layer = job.layer + 1
        neighbors = select_neighbors(job.origin, params, rng)
        payload = build_layer_prompt(
            job.original_prompt, collected, TaskKind.proposal(next_layer), expected=expected
        )
        tasks = _layer_tasks(job.job_id, job.origin, next_layer, neighbors, payload, issued_at)
        advanced = replace(
            job,
            layer=next_layer,
            pending=frozenset(task.task_id for task in tasks),
            collected=(),
            layer_neighbor_sets=(*job.layer_neighbor_sets, neighbors),
            inference_count=count,
        )
        return advanced, tasks

    aggregation = InferenceTask(
        task_id=f"{job.job_id}/agg",
        job_id=job.job_id,
        kind=TaskKind.aggregation(),
        assigned_node=job.origin,
        payload=build_layer_prompt(
            job.original_prompt, collected, TaskKind.aggregation(), expected=expected
        ),
        enqueued_at=issued_at,
        origin=job.origin,
    )
    advanced = replace(
        job,
        phase=Phase.AWAITING_AGGREGATION,
        pending=frozenset({aggregation.task_id}),
        collected=(),
        inference_count=count,
    )
    return advanced, [aggregation]
