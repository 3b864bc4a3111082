#!/usr/bin/env python3
"""単一モデル表・多モデル表の 7 構成をまとめて実行するバッチスクリプト

基本設定（YAML）の n, λ, シード等を共有し、(M, k) の 7 構成を
2 種類のサービス時間プロファイルで順に実行して CSV に書き出す。

- single: 設定ファイルの alpha をそのまま使う（同一モデル）
- diverse: --diverse-alpha のノード別 α を使う（異種モデル）

進捗管理機能:
- 進捗ファイル (.table_progress.json) に各点の状態と結果行を記録
- Ctrl+C で中断しても進捗は保存される
- --resume オプションで完了済みの点をスキップして再開可能

使用例:
    # 基本的な使い方（進捗管理あり、推奨）
    python scripts/pipeline/run_table_grids.py --config configs/table.yaml --resume

    # 20 反復で実行
    python scripts/pipeline/run_table_grids.py --config configs/table.yaml --replications 20 --resume

    # 進捗をクリアして最初から
    python scripts/pipeline/run_table_grids.py --config configs/table.yaml --clear-progress --resume

    # dry-run モード（実行予定の点だけ表示）
    python scripts/pipeline/run_table_grids.py --config configs/table.yaml --dry-run
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# スクリプトの配置場所を基準としたパス設定
REPO_ROOT = Path(__file__).resolve().parents[2]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from moa_gossip.config import TABLE_GRID, SweepPoint, parse_config  # noqa: E402
from moa_gossip.errors import MoAError  # noqa: E402
from moa_gossip.reporting import SWEEP_COLUMNS, ResultRow  # noqa: E402
from moa_gossip.run_experiment import configure_logging  # noqa: E402
from moa_gossip.sampling import ServiceSpec  # noqa: E402
from moa_gossip.simulator import MoAConfig  # noqa: E402
from moa_gossip.sweep import run_point  # noqa: E402

JST = timezone(timedelta(hours=9))
DEFAULT_PROGRESS_FILE = REPO_ROOT / ".table_progress.json"  # 進捗ファイル
DEFAULT_OUT_DIR = REPO_ROOT / "results"
DEFAULT_DIVERSE_ALPHA = "0.5,1,2,0.5"
TABLES = ("single", "diverse")


class ProgressTracker:
    """バッチ実行の進捗を管理するクラス

    進捗ファイル（.table_progress.json）に各グリッド点の状態と結果行を記録し、
    再実行時に完了済みの点をスキップできるようにする。

    状態の種類:
    - pending: 未実行
    - in_progress: 実行中（中断された可能性あり）
    - completed: 完了（結果行を保持）
    - failed: 失敗
    """

    def __init__(self, progress_file: Path):
        """ProgressTracker の初期化

        Args:
            progress_file: 進捗ファイルのパス
        """
        self.progress_file = progress_file
        self.data = self.load()

    def load(self) -> Dict:
        """進捗ファイルを読み込む

        Returns:
            進捗データの辞書（ファイルが存在しない・壊れている場合は空の状態）
        """
        if self.progress_file.exists():
            try:
                with open(self.progress_file, encoding="utf-8") as f:
                    return json.load(f)
            except (json.JSONDecodeError, OSError):
                # ファイルが壊れている場合は空から開始
                return {"last_updated": None, "points": {}}
        return {"last_updated": None, "points": {}}

    def save(self) -> None:
        """進捗ファイルに保存

        保存前に last_updated を現在時刻（JST）に更新する。
        """
        self.data["last_updated"] = datetime.now(JST).isoformat()
        with open(self.progress_file, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=2, ensure_ascii=False)

    def get_status(self, key: str) -> str:
        """指定した点の状態を取得

        Args:
            key: 表とグリッド点を識別するキー（例: "single:M=2,k=3"）

        Returns:
            状態文字列（"pending", "in_progress", "completed", "failed"）
        """
        return self.data["points"].get(key, {}).get("status", "pending")

    def get_row(self, key: str) -> Optional[List[str]]:
        """完了済みの点について保存してある CSV 行を返す

        Args:
            key: 表とグリッド点を識別するキー

        Returns:
            SWEEP_COLUMNS 順の文字列リスト（未完了なら None）
        """
        return self.data["points"].get(key, {}).get("row")

    def should_skip(self, key: str) -> bool:
        """指定した点をスキップすべきか判定

        completed の点のみスキップする。in_progress, failed, pending は再実行する。

        Args:
            key: 表とグリッド点を識別するキー

        Returns:
            True: スキップする（completed）
            False: 実行する（それ以外）
        """
        return self.get_status(key) == "completed"

    def _entry(self, key: str) -> Dict:
        return self.data["points"].setdefault(key, {})

    def mark_in_progress(self, key: str) -> None:
        """指定した点を「実行中」状態にする

        Args:
            key: 表とグリッド点を識別するキー
        """
        self._entry(key).update({"status": "in_progress", "started_at": datetime.now(JST).isoformat()})
        self.save()

    def mark_completed(self, key: str, row: List[str]) -> None:
        """指定した点を「完了」状態にし、結果行を保存する

        Args:
            key: 表とグリッド点を識別するキー
            row: ResultRow.csv_values() の結果
        """
        self._entry(key).update(
            {"status": "completed", "completed_at": datetime.now(JST).isoformat(), "row": row}
        )
        self.save()

    def mark_failed(self, key: str, error_message: str) -> None:
        """指定した点を「失敗」状態にする

        Args:
            key: 表とグリッド点を識別するキー
            error_message: エラーメッセージ
        """
        self._entry(key).update(
            {"status": "failed", "failed_at": datetime.now(JST).isoformat(), "error_message": error_message}
        )
        self.save()

    def clear(self) -> None:
        """進捗をすべてクリアする"""
        self.data = {"last_updated": None, "points": {}}
        self.save()

    def get_summary(self) -> Dict[str, int]:
        """進捗のサマリーを取得

        Returns:
            各状態の件数を含む辞書
            {"total": 14, "completed": 10, "in_progress": 1, "failed": 1, "pending": 2}
        """
        summary = {"total": len(self.data["points"]), "completed": 0, "in_progress": 0, "failed": 0, "pending": 0}
        for entry in self.data["points"].values():
            status = entry.get("status", "pending")
            if status in summary:
                summary[status] += 1
        return summary


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="単一モデル表・多モデル表の 7 構成を一括実行")
    parser.add_argument("--config", required=True, help="基本設定の YAML ファイル")
    parser.add_argument("--out-dir", default=str(DEFAULT_OUT_DIR), help="CSV の出力ディレクトリ")
    parser.add_argument("--tables", default=",".join(TABLES), help="実行する表 (single,diverse)")
    parser.add_argument(
        "--diverse-alpha",
        default=DEFAULT_DIVERSE_ALPHA,
        help=f"多モデル表のノード別 α（カンマ区切り、デフォルト: {DEFAULT_DIVERSE_ALPHA}）",
    )
    parser.add_argument("--replications", type=int, help="反復回数（未指定なら設定ファイルの値）")
    parser.add_argument("--dry-run", action="store_true", help="実行せず対象の点だけ表示")
    parser.add_argument("--resume", action="store_true", help="進捗ファイルを参照して完了済みの点をスキップ")
    parser.add_argument(
        "--progress-file",
        default=str(DEFAULT_PROGRESS_FILE),
        help=f"進捗ファイルのパス（デフォルト: {DEFAULT_PROGRESS_FILE.name}）",
    )
    parser.add_argument("--clear-progress", action="store_true", help="進捗ファイルをクリアして最初から実行")
    parser.add_argument("--verbose", action="store_true", help="デバッグログを有効化")
    return parser.parse_args(argv)


def table_base(base: MoAConfig, table: str, diverse_alpha: Sequence[float]) -> MoAConfig:
    """表ごとの基本設定を作る（diverse はノード別 α に差し替える）"""
    if table == "single":
        return base
    if len(diverse_alpha) != base.params.n:
        raise ValueError(f"--diverse-alpha needs n={base.params.n} values, got {len(diverse_alpha)}")
    template = base.services[0]
    services = tuple(ServiceSpec(mean=a, dist=template.dist, cv=template.cv) for a in diverse_alpha)
    return replace(base, services=services)


def make_point_key(table: str, point: SweepPoint) -> str:
    return f"{table}:M={point.M},k={point.k}"


def write_table(path: Path, rows: List[List[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = parse_config(args.config)
        diverse_alpha = [float(a) for a in args.diverse_alpha.split(",") if a.strip()]
    except (MoAError, ValueError) as exc:
        print(f"[ERROR] 設定を読み込めません: {exc}", file=sys.stderr)
        return 2
    replications = args.replications or config.replications
    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    unknown = [t for t in tables if t not in TABLES]
    if unknown:
        print(f"[ERROR] 不明な表: {', '.join(unknown)}", file=sys.stderr)
        return 2

    progress_file = Path(args.progress_file)
    progress = ProgressTracker(progress_file)
    if args.clear_progress:
        print(f"進捗ファイルをクリアしました: {progress_file}")
        progress.clear()

    points = [SweepPoint(M=m, k=k) for m, k in TABLE_GRID]
    total = len(points) * len(tables)
    print("=== 表グリッド一括実行 ===")
    print(f"設定ファイル: {args.config}")
    print(f"進捗ファイル: {progress_file}")
    print(f"レジュームモード: {'有効' if args.resume else '無効'}")
    print(f"対象: {len(tables)} 表 × {len(points)} 構成 = {total} 点 (反復 {replications} 回)")
    if args.resume:
        summary = progress.get_summary()
        print(f"進捗状況: 完了={summary['completed']}, 実行中={summary['in_progress']}, 失敗={summary['failed']}")
    print()

    success_count = 0
    failure_count = 0
    skipped_count = 0
    idx = 0
    try:
        for table in tables:
            try:
                base = table_base(config.simulation, table, diverse_alpha)
            except (MoAError, ValueError) as exc:
                print(f"[ERROR] {table}: {exc}", file=sys.stderr)
                return 2
            rows: List[List[str]] = []
            for point in points:
                idx += 1
                key = make_point_key(table, point)
                if args.resume and progress.should_skip(key):
                    print(f"[{idx}/{total}] ✓ スキップ: {key} (completed)")
                    rows.append(progress.get_row(key) or [])
                    skipped_count += 1
                    success_count += 1
                    continue
                if args.dry_run:
                    print(f"[DRY-RUN] {key}")
                    continue
                status = progress.get_status(key)
                if status in ("in_progress", "failed"):
                    print(f"[{idx}/{total}] ⟳ 再実行: {key} (was {status})")
                else:
                    print(f"[{idx}/{total}] 実行中: {key}")
                if args.resume:
                    progress.mark_in_progress(key)

                row: ResultRow = run_point(base, point, replications)
                rows.append(row.csv_values())
                if row.error is None:
                    success_count += 1
                    print(f"[{idx}/{total}] 完了: {key} verdict={row.verdict} latency={row.mean_latency}")
                    if args.resume:
                        progress.mark_completed(key, row.csv_values())
                else:
                    failure_count += 1
                    print(f"[{idx}/{total}] 失敗: {key}: {row.error}", file=sys.stderr)
                    if args.resume:
                        progress.mark_failed(key, row.error)
            if not args.dry_run:
                out_path = Path(args.out_dir) / f"table_{table}.csv"
                write_table(out_path, rows)
                print(f"CSV: {out_path}")
    except KeyboardInterrupt:
        print()
        print("=== 中断されました ===")
        print("進捗は保存されています。--resume オプションで再開できます。")
        return 130

    print()
    print("=== 実行結果 ===")
    print(f"成功: {success_count}")
    if skipped_count > 0:
        print(f"スキップ: {skipped_count} (既に完了)")
    print(f"失敗: {failure_count}")
    return 0 if failure_count == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
