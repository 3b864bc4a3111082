"""(M, k[, λ, α]) のグリッドを走査して 1 点 1 行の結果を作る。

各点のシードは master seed と (M, k, λ) から導くので、グリッドの並びや
構成を変えても同じ点の結果は変わらない。並列実行しても出力順は入力順。
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import List, Tuple

from .config import SweepGrid, SweepPoint, point_config
from .errors import ConfigurationError, MoAError
from .progress import iter_with_progress
from .reporting import ResultRow
from .rng import derive_seed
from .simulator import MoAConfig, replicate

logger = logging.getLogger("moa_gossip.sweep")


def point_seed(master_seed: int, point: SweepPoint, lam: float) -> int:
    return derive_seed(master_seed, point.M, point.k, float(lam))


def _failed_row(base: MoAConfig, point: SweepPoint, error: str) -> ResultRow:
    return ResultRow(
        label=point.label(),
        M=point.M,
        k=point.k,
        lam=point.lam if point.lam is not None else base.arrival.rate,
        alpha=point.alpha if point.alpha is not None else base.alpha_max,
        utilization=None,
        stable_theory=None,
        error=error,
    )


def run_point(base: MoAConfig, point: SweepPoint, replications: int = 1) -> ResultRow:
    """1 点を実行する。例外は行の error 列に落とし、他の点には波及させない。"""
    lam = point.lam if point.lam is not None else base.arrival.rate
    try:
        config = point_config(base, point, seed=point_seed(base.seed, point, lam))
        result = replicate(config, replications)
    except MoAError as exc:
        logger.warning("Sweep point %s failed: %s", point.label(), exc)
        return _failed_row(base, point, str(exc))
    return ResultRow.from_replicated(result)


def _run_point_args(args: Tuple[MoAConfig, SweepPoint, int]) -> ResultRow:
    return run_point(*args)


def run_sweep(
    base: MoAConfig,
    grid: SweepGrid,
    replications: int = 1,
    workers: int = 1,
    progress: bool = False,
) -> List[ResultRow]:
    if len(grid) == 0:
        raise ConfigurationError("grid", "sweep grid must contain at least one point")
    jobs = [(base, point, replications) for point in grid]
    logger.info("Running sweep over %d point(s) with %d replication(s) each.", len(jobs), replications)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(iter_with_progress(pool.map(_run_point_args, jobs), "Sweep", progress, total=len(jobs), unit="point"))
    else:
        rows = list(
            iter_with_progress((_run_point_args(job) for job in jobs), "Sweep", progress, total=len(jobs), unit="point")
        )
    failed = sum(1 for row in rows if row.error is not None)
    if failed:
        logger.warning("%d of %d sweep point(s) failed.", failed, len(rows))
    return rows
