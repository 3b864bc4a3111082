"""tqdm によるプログレスバー表示（tqdm が無ければ素通し）。"""

from __future__ import annotations

import logging
from typing import Iterable, Iterator, Optional, TypeVar

try:  # pragma: no cover - optional dependency
    from tqdm import tqdm
except ImportError:  # pragma: no cover
    tqdm = None

T = TypeVar("T")

logger = logging.getLogger("moa_gossip")


def iter_with_progress(
    items: Iterable[T],
    desc: str,
    enabled: bool,
    total: Optional[int] = None,
    unit: str = "run",
) -> Iterator[T]:
    if enabled and tqdm is None:
        logger.warning("tqdm is not installed; progress bar disabled (`pip install tqdm`).")
    if not enabled or tqdm is None:
        yield from items
        return
    with tqdm(total=total, desc=desc, unit=unit) as bar:
        for item in items:
            yield item
            bar.update(1)
