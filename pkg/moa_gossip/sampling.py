"""到着間隔・推論時間・ネットワーク遅延の分布指定と乱数サンプリング。"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError

if TYPE_CHECKING:
    from .simulator import NodeState  # pragma: no cover

ARRIVAL_DISTS = ("poisson", "deterministic", "none")
SERVICE_DISTS = ("exponential", "deterministic", "lognormal")
DELAY_DISTS = ("zero", "deterministic", "exponential")


@dataclass(frozen=True)
class ArrivalSpec:
    """ユーザごとの到着過程。rate はユーザ 1 人あたりの λ（prompts/s）。

    dist="none" は更新過程を止め、injections で与えたプロンプトだけを流す。
    """

    rate: float
    dist: str = "poisson"

    def __post_init__(self) -> None:
        if self.dist not in ARRIVAL_DISTS:
            raise ConfigurationError("arrival.dist", f"must be one of {ARRIVAL_DISTS}, got {self.dist!r}")
        if not self.rate > 0:
            raise ConfigurationError("lambda", f"arrival rate must be > 0, got {self.rate}")


@dataclass(frozen=True)
class ServiceSpec:
    """1 ノードの推論時間分布。mean は α_i（秒）、cv は lognormal の変動係数。"""

    mean: float
    dist: str = "exponential"
    cv: float = 1.0

    def __post_init__(self) -> None:
        if self.dist not in SERVICE_DISTS:
            raise ConfigurationError("service.dist", f"must be one of {SERVICE_DISTS}, got {self.dist!r}")
        if not self.mean > 0:
            raise ConfigurationError("alpha", f"mean service time must be > 0, got {self.mean}")
        if not self.cv > 0:
            raise ConfigurationError("service.cv", f"coefficient of variation must be > 0, got {self.cv}")


@dataclass(frozen=True)
class DelaySpec:
    dist: str = "zero"
    mean: float = 0.0

    def __post_init__(self) -> None:
        if self.dist not in DELAY_DISTS:
            raise ConfigurationError("network_delay.dist", f"must be one of {DELAY_DISTS}, got {self.dist!r}")
        if self.dist != "zero" and not self.mean > 0:
            raise ConfigurationError("network_delay.mean", f"must be > 0 for {self.dist}, got {self.mean}")

    @property
    def is_zero(self) -> bool:
        return self.dist == "zero"


def sample_duration(dist: str, mean: float, rng: np.random.Generator, cv: float = 1.0) -> float:
    """平均 mean の正の乱数を 1 つ返す。"""
    if dist == "deterministic":
        return mean
    if dist == "exponential":
        return float(rng.exponential(mean))
    if dist == "lognormal":
        # 平均と変動係数から対数正規のパラメータを逆算する
        sigma2 = math.log1p(cv * cv)
        mu = math.log(mean) - sigma2 / 2.0
        return float(rng.lognormal(mu, math.sqrt(sigma2)))
    if dist == "zero":
        return 0.0
    raise ConfigurationError("dist", f"unknown distribution {dist!r}")


def sample_interarrival(spec: ArrivalSpec, rng: np.random.Generator) -> float:
    """Poisson なら平均 1/λ の指数乱数、deterministic なら 1/λ を返す。"""
    if spec.dist == "deterministic":
        return 1.0 / spec.rate
    if spec.dist == "poisson":
        return float(rng.exponential(1.0 / spec.rate))
    raise ConfigurationError("arrival.dist", "renewal arrivals are disabled (dist='none')")


def sample_service(node: "NodeState", rng: np.random.Generator) -> float:
    spec = node.service
    return sample_duration(spec.dist, spec.mean, rng, spec.cv)


def sample_delay(spec: DelaySpec, rng: np.random.Generator) -> float:
    if spec.is_zero:
        return 0.0
    return sample_duration(spec.dist, spec.mean, rng)
