#!/usr/bin/env python3
"""安定境界の前後でシミュレーションの判定が解析式と一致するかを確認するユーティリティ。

λ* = 1/(α_max((k+1)M+1)) の 0.8 倍と 1.2 倍でシミュレーションを回し、
以下を確認・出力する。

- 判定 (stable-looking / growing) が解析式の安定性と一致するか
- 過負荷側の growth_slope が n·(R_in − 1/α) の ±20% に入るか（同種プロファイルのみ。
  異種では最も遅いノードだけが溢れるため、判定の一致だけを見る）
- 安定側の growth_slope が過負荷側の理論増加率の 5% 未満か
- 安定側で各ノードの実測入力レートが ((k+1)M+1)λ の ±3% に入るか
- 推論回数が (k+1)M+1 でないジョブが 0 件か
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

REPO_ROOT = Path(__file__).resolve().parents[2]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from moa_gossip.queueing import ServiceProfile, is_stable_heterogeneous, max_stable_lambda, overload_rate  # noqa: E402
from moa_gossip.simulator import MoAConfig, SimReport, run_simulation  # noqa: E402


@dataclass
class Scenario:
    name: str
    n: int
    k: int
    M: int
    alphas: Sequence[float]


@dataclass
class CheckResult:
    scenario: str
    factor: float
    report: SimReport
    expected_rate: float
    checks: List[tuple]

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)


SCENARIOS = (
    Scenario("homogeneous", n=10, k=2, M=2, alphas=(1.0,) * 10),
    Scenario("heterogeneous", n=4, k=1, M=1, alphas=(0.5, 1.0, 2.0, 0.5)),
)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="安定境界チェックツール")
    parser.add_argument("--horizon", type=float, default=2e5, help="シミュレーション終了時刻（秒）")
    parser.add_argument("--seed", type=int, default=1, help="マスターシード")
    parser.add_argument(
        "--scenario",
        choices=[s.name for s in SCENARIOS],
        action="append",
        help="実行するシナリオ（複数指定可、未指定なら全て）",
    )
    return parser.parse_args(argv)


def run_scenario(scenario: Scenario, factor: float, horizon: float, seed: int) -> CheckResult:
    profile = ServiceProfile.of(scenario.alphas)
    lam_star = max_stable_lambda(scenario.k, scenario.M, profile.alpha_max)
    config = MoAConfig.create(
        n=scenario.n,
        k=scenario.k,
        M=scenario.M,
        lam=factor * lam_star,
        alpha=list(scenario.alphas),
        horizon=horizon,
        seed=seed,
        label=f"{scenario.name}@{factor}",
    )
    report = run_simulation(config)
    overloaded = is_stable_heterogeneous(1.2 * lam_star, scenario.k, scenario.M, profile)
    reference = overload_rate(scenario.n, overloaded)
    theory = config.rate_summary()

    checks = [("inference count", report.inference_count_mismatches == 0, f"mismatches={report.inference_count_mismatches}")]
    if theory.stable:
        checks.append(("verdict", report.verdict == "stable-looking", report.verdict))
        checks.append(
            ("slope < 5%", report.growth_slope < 0.05 * reference, f"{report.growth_slope:.4f} vs {0.05 * reference:.4f}")
        )
        for node in report.per_node:
            error = abs(node.input_rate_measured - theory.r_in) / theory.r_in
            checks.append((f"input rate node {node.node_id}", error <= 0.03, f"{node.input_rate_measured:.5f} ({error:.2%})"))
    else:
        expected = overload_rate(scenario.n, theory)
        error = abs(report.growth_slope - expected) / expected
        checks.append(("verdict", report.verdict == "growing", report.verdict))
        if len(set(scenario.alphas)) == 1:
            checks.append(("slope ±20%", error <= 0.2, f"{report.growth_slope:.4f} vs {expected:.4f} ({error:.1%})"))
    return CheckResult(scenario.name, factor, report, theory.r_in, checks)


def print_result(result: CheckResult) -> None:
    report = result.report
    print(f"シナリオ: {result.scenario} λ = {result.factor} × λ* = {report.lam:.6f}")
    print(f"    理論利用率: {report.utilization_theory:.4f} ({'安定' if report.stable_theory else '不安定'})")
    print(f"    判定: {report.verdict} / growth_slope: {report.growth_slope:.4f} / queued_slope: {report.queued_slope:.4f}")
    print(f"    平均キュー長: {report.avg_queue_size:.4f} / 完了ジョブ: {report.completed_jobs}")
    for name, ok, detail in result.checks:
        print(f"    [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    selected = [s for s in SCENARIOS if not args.scenario or s.name in args.scenario]
    results = []
    for scenario in selected:
        for factor in (0.8, 1.2):
            result = run_scenario(scenario, factor, args.horizon, args.seed)
            print_result(result)
            results.append(result)

    failed = [r for r in results if not r.passed]
    print("--- まとめ ---")
    print(f"実行: {len(results)} / 失敗: {len(failed)}")
    return 0 if not failed else 1


if __name__ == "__main__":
    raise SystemExit(main())
