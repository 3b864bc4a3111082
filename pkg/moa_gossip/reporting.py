"""シミュレーション結果の書き出し（table / csv / records）。

CSV の列と順序は固定。値は repr ベースで書くため、同じ設定・シードなら
出力はバイト単位で一致する。
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

from .queueing import RateSummary, max_stable_lambda
from .simulator import ReplicatedReport, SimReport

FORMATS = ("table", "csv", "records")

SWEEP_COLUMNS = (
    "M",
    "k",
    "lambda",
    "alpha",
    "utilization",
    "stable_theory",
    "mean_latency",
    "mean_latency_se",
    "avg_queue_size",
    "avg_queue_size_se",
    "verdict",
    "error",
)

TABLE_COLUMNS = ("config", "mean_latency", "avg_queue_size", "verdict")


@dataclass(frozen=True)
class ResultRow:
    """CSV の 1 行。失敗した点は error に理由が入り、計測値は空になる。"""

    label: str
    M: int
    k: int
    lam: float
    alpha: float
    utilization: Optional[float]
    stable_theory: Optional[bool]
    mean_latency: Optional[float] = None
    mean_latency_se: Optional[float] = None
    avg_queue_size: Optional[float] = None
    avg_queue_size_se: Optional[float] = None
    verdict: Optional[str] = None
    error: Optional[str] = None
    replicated: Optional[ReplicatedReport] = None

    @classmethod
    def from_replicated(cls, result: ReplicatedReport) -> "ResultRow":
        first = result.first
        return cls(
            label=first.label,
            M=first.M,
            k=first.k,
            lam=first.lam,
            alpha=first.alpha_max,
            utilization=first.utilization_theory,
            stable_theory=first.stable_theory,
            mean_latency=result.mean["mean_latency"],
            mean_latency_se=result.stderr["mean_latency"],
            avg_queue_size=result.mean["avg_queue_size"],
            avg_queue_size_se=result.stderr["avg_queue_size"],
            verdict=result.verdict,
            replicated=result,
        )

    def csv_values(self) -> List[str]:
        values = [
            self.M,
            self.k,
            self.lam,
            self.alpha,
            self.utilization,
            self.stable_theory,
            self.mean_latency,
            self.mean_latency_se,
            self.avg_queue_size,
            self.avg_queue_size_se,
            self.verdict,
            self.error,
        ]
        return [_cell(v) for v in values]


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def report_record(report: SimReport) -> Dict[str, Any]:
    return asdict(report)


def row_record(row: ResultRow) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "label": row.label,
        "M": row.M,
        "k": row.k,
        "lambda": row.lam,
        "alpha": row.alpha,
        "utilization": row.utilization,
        "stable_theory": row.stable_theory,
        "mean_latency": row.mean_latency,
        "mean_latency_se": row.mean_latency_se,
        "avg_queue_size": row.avg_queue_size,
        "avg_queue_size_se": row.avg_queue_size_se,
        "verdict": row.verdict,
        "error": row.error,
    }
    if row.replicated is not None:
        record["replications"] = [report_record(r) for r in row.replicated.reports]
    return record


def render_csv(rows: Iterable[ResultRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow(row.csv_values())
    return buffer.getvalue()


def render_table(rows: Sequence[ResultRow]) -> str:
    body = [
        (
            row.label,
            _fmt(row.mean_latency) if row.error is None else "error",
            _fmt(row.avg_queue_size) if row.error is None else "-",
            row.verdict or f"error: {row.error}",
        )
        for row in rows
    ]
    widths = [max(len(str(c)) for c in column) for column in zip(TABLE_COLUMNS, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(TABLE_COLUMNS, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for cells in body:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_records(rows: Iterable[ResultRow]) -> str:
    return "".join(json.dumps(row_record(row), ensure_ascii=False, sort_keys=True) + "\n" for row in rows)


def render(rows: Sequence[ResultRow], fmt: str) -> str:
    if fmt == "csv":
        return render_csv(rows)
    if fmt == "records":
        return render_records(rows)
    return render_table(rows)


def render_stability(n: int, k: int, M: int, summary: RateSummary) -> str:
    """安定条件の計算結果を人が読める形で返す。"""
    lines = [
        f"n={n} k={k} M={M} lambda={summary.lam!r} alpha={summary.alpha!r}",
        f"r_prop_in    {summary.r_prop_in:.6g}",
        f"r_layer_in   {summary.r_layer_in:.6g}",
        f"r_in         {summary.r_in:.6g}",
        f"r_out        {summary.r_out:.6g}",
        f"utilization  {summary.utilization:.6g}",
        f"stable       {'yes' if summary.stable else 'no'}",
        f"max_lambda   {max_stable_lambda(k, M, summary.alpha):.6g}",
    ]
    return "\n".join(lines) + "\n"
