"""分散 MoA のキュー安定性に関する閉形式の計算。

各ノードの入力レートは (k+1)Mλ（提案）+ λ（集約）で、平均推論時間 α の
FCFS キューは α((k+1)M+1)λ < 1 のとき安定となる。異種モデル構成では
最も遅いノードの α_max で判定する。シミュレータ検証のオラクルとしても使う。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

from .errors import ConfigurationError


@dataclass(frozen=True)
class RateSummary:
    """レートはすべて prompts/s、utilization は無次元。"""

    lam: float
    alpha: float
    r_prop_in: float
    r_layer_in: float
    r_in: float
    r_out: float
    utilization: float
    stable: bool


@dataclass(frozen=True)
class ServiceProfile:
    """ノードごとの平均推論時間 α_i（秒）。"""

    alphas: Tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.alphas:
            raise ConfigurationError("alpha", "service profile must list at least one node")
        for index, alpha in enumerate(self.alphas):
            if not alpha > 0:
                raise ConfigurationError("alpha", f"alpha[{index}] must be > 0, got {alpha}")

    @classmethod
    def of(cls, alphas: Sequence[float]) -> "ServiceProfile":
        return cls(tuple(float(a) for a in alphas))

    @property
    def alpha_max(self) -> float:
        return max(self.alphas)


def _check_rate_inputs(lam: float, k: int, M: int = 0) -> None:
    if not lam > 0:
        raise ConfigurationError("lambda", f"arrival rate must be > 0, got {lam}")
    if k < 0:
        raise ConfigurationError("k", f"fan-out must be >= 0, got {k}")
    if M < 0:
        raise ConfigurationError("M", f"layer count must be >= 0, got {M}")


def proposer_input_rate(lam: float, k: int) -> float:
    _check_rate_inputs(lam, k)
    return (k + 1) * lam


def node_input_rate(lam: float, k: int, M: int) -> float:
    _check_rate_inputs(lam, k, M)
    return ((k + 1) * M + 1) * lam


def is_stable(lam: float, k: int, M: int, alpha: float) -> RateSummary:
    """安定条件 α((k+1)M+1)λ < 1（厳密な不等号）を評価する。

    utilization は 1 以上でもそのまま返し、過負荷の度合いを確認できるようにする。
    """
    _check_rate_inputs(lam, k, M)
    if not alpha > 0:
        raise ConfigurationError("alpha", f"mean service time must be > 0, got {alpha}")
    r_prop_in = proposer_input_rate(lam, k)
    r_layer_in = r_prop_in * M
    r_in = node_input_rate(lam, k, M)
    utilization = alpha * ((k + 1) * M + 1) * lam
    return RateSummary(
        lam=lam,
        alpha=alpha,
        r_prop_in=r_prop_in,
        r_layer_in=r_layer_in,
        r_in=r_in,
        r_out=1.0 / alpha,
        utilization=utilization,
        stable=utilization < 1.0,
    )


def is_stable_heterogeneous(lam: float, k: int, M: int, profile: ServiceProfile) -> RateSummary:
    """異種モデル構成では最も遅いノード（α_max）で判定する。"""
    if not profile.alphas:
        raise ConfigurationError("alpha", "service profile must list at least one node")
    return is_stable(lam, k, M, profile.alpha_max)


def max_stable_lambda(k: int, M: int, alpha: float) -> float:
    """安定となる λ の上限 1/(α((k+1)M+1))。"""
    if not alpha > 0:
        raise ConfigurationError("alpha", f"mean service time must be > 0, got {alpha}")
    if k < 0 or M < 0:
        raise ConfigurationError("k" if k < 0 else "M", "must be >= 0")
    return 1.0 / (alpha * ((k + 1) * M + 1))


def overload_rate(n: int, summary: RateSummary) -> float:
    """流体近似での未処理推論数の増加率 n·(R_in − R_out)（tasks/s）。負なら余裕あり。"""
    return n * (summary.r_in - summary.r_out)


def mm1_mean_in_system(rho: float) -> float:
    if not 0 <= rho < 1:
        raise ConfigurationError("rho", f"M/M/1 closed form needs 0 <= rho < 1, got {rho}")
    return rho / (1.0 - rho)


def mm1_mean_waiting(rho: float) -> float:
    if not 0 <= rho < 1:
        raise ConfigurationError("rho", f"M/M/1 closed form needs 0 <= rho < 1, got {rho}")
    return rho * rho / (1.0 - rho)
