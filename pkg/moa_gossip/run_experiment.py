"""分散 MoA の安定性計算・シミュレーション・スイープ・ライブ実行の CLI。

使用例:
    # 安定条件の確認（異種モデルは alpha をカンマ区切りで渡す）
    python -m moa_gossip stability --n 4 --k 2 --M 2 --lambda 0.25 --alpha 1

    # 設定ファイルでシミュレーション（20 反復、4 プロセス）
    python -m moa_gossip simulate --config configs/table.yaml --replications 20 --workers 4

    # 表の 7 構成をスイープして CSV に保存
    python -m moa_gossip sweep --config configs/table.yaml --grid table --out sweep.csv

    # 実モデルに対するライブ実行
    MOA_API_KEY=... python -m moa_gossip live --config configs/live.yaml --prompts prompts.jsonl

終了コード:
    0 正常 / 1 想定外のエラー / 2 引数・設定エラー / 3 growing 判定 /
    4 ガードによる打ち切り / 5 バックエンドエラー / 6 入出力エラー
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace
from typing import Iterator, List, Optional, Sequence, TextIO

import requests

from .config import RunConfigFile, load_prompts, parse_config, parse_grid, validate_grid
from .errors import BackendError, ConfigurationError, MoAError
from .live import run_live
from .metrics import VERDICT_ABORTED, VERDICT_GROWING
from .queueing import ServiceProfile, is_stable_heterogeneous
from .reporting import FORMATS, ResultRow, render, render_stability
from .simulator import aggregate_reports, replicate, run_simulation
from .sweep import run_sweep

logger = logging.getLogger("moa_gossip")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_GROWING = 3
EXIT_ABORTED = 4
EXIT_BACKEND = 5
EXIT_IO = 6


class UsageError(Exception):
    pass


class SingleLineArgumentParser(argparse.ArgumentParser):
    """argparse のエラーを複数行の usage ではなく例外として上げる。"""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _alpha_list(value: str) -> List[float]:
    try:
        alphas = [float(part) for part in value.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid alpha list: {value!r}") from exc
    if not alphas:
        raise argparse.ArgumentTypeError("alpha must not be empty")
    return alphas


def build_parser() -> argparse.ArgumentParser:
    parser = SingleLineArgumentParser(prog="moa_gossip", description="分散 Mixture-of-Agents の安定性実験ツール")
    parser.add_argument("--verbose", action="store_true", help="デバッグログを有効化")
    sub = parser.add_subparsers(dest="command", parser_class=SingleLineArgumentParser)
    sub.required = True

    stability = sub.add_parser("stability", help="安定条件を閉形式で評価する")
    stability.add_argument("--n", type=int, required=True, help="ノード数")
    stability.add_argument("--k", type=int, required=True, help="提案を依頼する近傍数")
    stability.add_argument("--M", type=int, required=True, help="提案レイヤ数")
    stability.add_argument("--lambda", dest="lam", type=float, required=True, help="ユーザ 1 人あたりの到着レート")
    stability.add_argument("--alpha", type=_alpha_list, required=True, help="平均推論時間（カンマ区切りでノードごと）")

    for name, help_text in (("simulate", "シミュレーションを実行する"), ("sweep", "グリッドを走査する")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="YAML 設定ファイル")
        cmd.add_argument("--out", help="出力ファイル（未指定時は標準出力）")
        cmd.add_argument("--format", choices=FORMATS, default="table" if name == "simulate" else "csv")
        cmd.add_argument("--seed", type=int, help="設定ファイルの seed を上書き")
        cmd.add_argument("--replications", type=int, help="反復回数（seed, seed+1, …）")
        cmd.add_argument("--workers", type=int, default=1, help="並列プロセス数")
        cmd.add_argument("--progress", action="store_true", help="tqdm でプログレスバーを表示する")
        cmd.add_argument("--webhook-url", help="完了通知先（未指定時は MOA_WEBHOOK_URL）")
        if name == "simulate":
            cmd.add_argument("--trace", help="イベントトレース（JSON Lines）の出力先")
        else:
            cmd.add_argument("--grid", help='"table" または M:k[:lambda[:alpha]] のカンマ区切り')

    live = sub.add_parser("live", help="実バックエンドに対して MoA を実行する")
    live.add_argument("--config", required=True, help="YAML 設定ファイル")
    live.add_argument("--prompts", help="プロンプトファイル（JSON Lines, {origin, text}）")
    live.add_argument("--out", help="出力ファイル（未指定時は標準出力）")
    live.add_argument("--seed", type=int, help="設定ファイルの seed を上書き")
    live.add_argument("--webhook-url", help="完了通知先（未指定時は MOA_WEBHOOK_URL）")
    return parser


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(message)s",
    )


@contextlib.contextmanager
def open_output(path: Optional[str]) -> Iterator[TextIO]:
    if not path:
        yield sys.stdout
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        yield f


def notify_webhook(url: Optional[str], command: str, status: str, details: Sequence[str] = ()) -> None:
    url = url or os.environ.get("MOA_WEBHOOK_URL")
    if not url:
        return
    content_lines = [f"moa_gossip {command} が完了しました", f"ステータス: `{status}`", *details]
    try:
        resp = requests.post(url, json={"content": "\n".join(content_lines)}, timeout=10)
        resp.raise_for_status()
    except requests.RequestException as exc:
        logger.warning("Failed to send webhook notification: %s", exc)


def _load(args: argparse.Namespace) -> RunConfigFile:
    config = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigurationError("seed", f"must be >= 0, got {args.seed}")
        config = replace(config, simulation=replace(config.simulation, seed=args.seed))
    replications = getattr(args, "replications", None)
    if replications is not None:
        if replications < 1:
            raise ConfigurationError("replications", f"must be >= 1, got {replications}")
        config = replace(config, replications=replications)
    if getattr(args, "workers", 1) < 1:
        raise ConfigurationError("workers", f"must be >= 1, got {args.workers}")
    return config


def cmd_stability(args: argparse.Namespace) -> int:
    profile = ServiceProfile.of(args.alpha)
    if args.n < 2:
        raise ConfigurationError("n", f"node count must be >= 2, got {args.n}")
    if not 0 <= args.k <= args.n - 1:
        raise ConfigurationError("k", f"must satisfy 0 <= k <= n-1 = {args.n - 1}, got {args.k}")
    if len(profile.alphas) not in (1, args.n):
        raise ConfigurationError("alpha", f"expected 1 or n={args.n} values, got {len(profile.alphas)}")
    summary = is_stable_heterogeneous(args.lam, args.k, args.M, profile)
    sys.stdout.write(render_stability(args.n, args.k, args.M, summary))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.mode != "simulate":
        raise ConfigurationError("mode", f"simulate needs mode 'simulate', got {config.mode!r}")
    sim = config.simulation
    logger.info("Simulating %s (seed=%d, replications=%d).", sim.display_label, sim.seed, config.replications)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8", newline="") as trace:
            first = run_simulation(sim, trace=trace)
        reports = [first]
        if config.replications > 1:
            rest = replicate(replace(sim, seed=sim.seed + 1), config.replications - 1, args.workers, args.progress)
            reports.extend(rest.reports)
        result = aggregate_reports(reports)
    else:
        result = replicate(sim, config.replications, args.workers, args.progress)

    row = ResultRow.from_replicated(result)
    with open_output(args.out) as out:
        out.write(render([row], args.format))
    notify_webhook(
        args.webhook_url,
        "simulate",
        result.verdict,
        [f"構成: {row.label}", f"平均レイテンシ: {row.mean_latency}", f"平均キュー長: {row.avg_queue_size}"],
    )
    if result.verdict == VERDICT_ABORTED:
        return EXIT_ABORTED
    if result.verdict == VERDICT_GROWING:
        return EXIT_GROWING
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.grid:
        grid = parse_grid(args.grid)
        validate_grid(grid, config.simulation)
    elif config.sweep is not None:
        grid = config.sweep
    else:
        raise ConfigurationError("grid", "no grid given (use --grid or a sweep: section)")
    rows = run_sweep(config.simulation, grid, config.replications, args.workers, args.progress)
    with open_output(args.out) as out:
        out.write(render(rows, args.format))
    failed = sum(1 for row in rows if row.error is not None)
    notify_webhook(args.webhook_url, "sweep", "ok" if not failed else "partial", [f"点数: {len(rows)} / 失敗: {failed}"])
    return EXIT_OK


def cmd_live(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.mode != "live":
        raise ConfigurationError("mode", f"live needs mode 'live', got {config.mode!r}")
    prompts_path = args.prompts or config.live.prompts
    if not prompts_path:
        raise ConfigurationError("prompts", "no prompts file given (use --prompts or live.prompts)")
    prompts = load_prompts(prompts_path, config.params.n)
    with open_output(args.out) as out:
        result = run_live(config, prompts, out=out)
    summary = result.summary
    notify_webhook(
        args.webhook_url,
        "live",
        "ok" if not summary["failed"] else "partial",
        [f"完了: {summary['completed']} / 失敗: {summary['failed']}", f"平均レイテンシ: {summary['mean_latency']}"],
    )
    return EXIT_OK


COMMANDS = {
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "live": cmd_live,
}


def _fail(kind: str, field: str, message: str) -> None:
    sys.stderr.write(f"error[{kind}] {field}: {' '.join(str(message).split())}\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail("usage", "-", str(exc))
        return EXIT_USAGE
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        _fail(exc.kind, exc.field, exc.message)
        return EXIT_USAGE
    except BackendError as exc:
        _fail(exc.kind, "-", str(exc))
        return EXIT_BACKEND
    except OSError as exc:
        _fail("io", exc.filename or "-", exc.strerror or str(exc))
        return EXIT_IO
    except MoAError as exc:
        _fail(exc.kind, "-", str(exc))
        return EXIT_UNEXPECTED
    except KeyboardInterrupt:
        _fail("interrupted", "-", "interrupted by user")
        return 130
    except Exception as exc:  # pragma: no cover - last resort
        logger.debug("Unexpected error", exc_info=True)
        _fail("internal", "-", f"{type(exc).__name__}: {exc}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
