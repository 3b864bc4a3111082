#!/usr/bin/env python3
"""スイープ結果の CSV を読み込んで Markdown のレポートにまとめるスクリプト。

構成ごとの利用率・平均レイテンシ・平均キュー長と判定を表にし、
理論上の安定性と判定の食い違いや、構成を重くしたときの増減を文章で添える。
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

# 重さの順に並べた比較用の構成 (M, k)
TREND_CHAIN = ((0, 0), (1, 1), (1, 2), (2, 2), (2, 3))


@dataclass
class SweepRow:
    """CSV の 1 行"""

    M: int
    k: int
    lam: float
    alpha: float
    utilization: Optional[float]
    stable_theory: Optional[bool]
    mean_latency: Optional[float]
    mean_latency_se: Optional[float]
    avg_queue_size: Optional[float]
    avg_queue_size_se: Optional[float]
    verdict: str
    error: str

    @property
    def label(self) -> str:
        return f"M={self.M}, k={self.k}"

    @property
    def disagrees(self) -> bool:
        """理論の安定性と測定の判定が食い違っているか"""
        if self.stable_theory is None or not self.verdict:
            return False
        return self.stable_theory != (self.verdict == "stable-looking")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="スイープ結果を Markdown にまとめる")
    parser.add_argument("input", help="moa_gossip sweep が出力した CSV")
    parser.add_argument("--output", help="出力ファイル（指定しない場合は標準出力）")
    parser.add_argument("--title", default="スイープ結果", help="レポートの見出し")
    return parser.parse_args(argv)


def _float(value: str) -> Optional[float]:
    return float(value) if value else None


def load_rows(path: Path) -> List[SweepRow]:
    rows = []
    with path.open(encoding="utf-8", newline="") as f:
        for record in csv.DictReader(f):
            rows.append(
                SweepRow(
                    M=int(record["M"]),
                    k=int(record["k"]),
                    lam=float(record["lambda"]),
                    alpha=float(record["alpha"]),
                    utilization=_float(record["utilization"]),
                    stable_theory=None if not record["stable_theory"] else record["stable_theory"] == "true",
                    mean_latency=_float(record["mean_latency"]),
                    mean_latency_se=_float(record["mean_latency_se"]),
                    avg_queue_size=_float(record["avg_queue_size"]),
                    avg_queue_size_se=_float(record["avg_queue_size_se"]),
                    verdict=record["verdict"],
                    error=record["error"],
                )
            )
    return rows


def _with_se(value: Optional[float], se: Optional[float]) -> str:
    if value is None:
        return "-"
    if se is None:
        return f"{value:.3f}"
    return f"{value:.3f} ± {se:.3f}"


def trend_sentences(rows: List[SweepRow]) -> List[str]:
    by_config = {(r.M, r.k): r for r in rows if r.error == ""}
    chain = [by_config[c] for c in TREND_CHAIN if c in by_config]
    if len(chain) < 2:
        return []
    sentences = []
    for metric, name in (("avg_queue_size", "平均キュー長"), ("mean_latency", "平均レイテンシ")):
        values = [getattr(r, metric) for r in chain]
        if any(v is None for v in values):
            continue
        decreasing = [
            f"{a.label} → {b.label}" for a, b, x, y in zip(chain, chain[1:], values, values[1:]) if y < x
        ]
        path = " → ".join(r.label for r in chain)
        if decreasing:
            sentences.append(f"{name}は {path} の順で一部減少しています（{', '.join(decreasing)}）。")
        else:
            sentences.append(f"{name}は {path} の順で単調に増加しています。")
    return sentences


def render(rows: List[SweepRow], title: str) -> str:
    lines = [f"# {title}", ""]
    lines.append(f"構成数: {len(rows)}（λ = {rows[0].lam:g}, α_max = {rows[0].alpha:g}）" if rows else "構成数: 0")
    lines.append("")
    lines.append("| 構成 | 利用率 | 理論 | 平均レイテンシ (秒) | 平均キュー長 | 判定 |")
    lines.append("| --- | ---: | :---: | ---: | ---: | --- |")
    for r in rows:
        if r.error:
            lines.append(f"| {r.label} | - | - | - | - | エラー: {r.error} |")
            continue
        util = "-" if r.utilization is None else f"{r.utilization:.3f}"
        theory = "安定" if r.stable_theory else "不安定"
        lines.append(
            f"| {r.label} | {util} | {theory} | {_with_se(r.mean_latency, r.mean_latency_se)} | "
            f"{_with_se(r.avg_queue_size, r.avg_queue_size_se)} | {r.verdict} |"
        )
    lines.append("")

    notes = trend_sentences(rows)
    disagreements = [r for r in rows if r.disagrees]
    if disagreements:
        notes.append(
            "理論と判定が食い違った構成: " + ", ".join(f"{r.label}（{r.verdict}）" for r in disagreements) + "。"
            " 境界付近ではホライズンを伸ばして再確認してください。"
        )
    failed = [r for r in rows if r.error]
    if failed:
        notes.append(f"{len(failed)} 構成が失敗しました。")
    if notes:
        lines.append("## まとめ")
        lines.append("")
        lines.extend(f"- {note}" for note in notes)
        lines.append("")
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    path = Path(args.input)
    if not path.exists():
        print(f"[ERROR] {path} が見つかりません", file=sys.stderr)
        return 1
    report = render(load_rows(path), args.title)
    if args.output:
        Path(args.output).write_text(report, encoding="utf-8")
    else:
        print(report)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
