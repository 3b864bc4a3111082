"""マスターシードから用途別の独立した乱数ストリームを派生させる。

到着・サービス・近傍選択・ネットワーク遅延などの用途ごとにストリームを
分けることで、ある分布を変えても他の用途の乱数列は変わらない。
派生はハッシュ順序やプラットフォームに依存しない。
"""

from __future__ import annotations

import hashlib
from typing import Dict, Tuple

import numpy as np

_SEED_MASK = (1 << 63) - 1


def derive_seed(master_seed: int, *salt: object) -> int:
    """マスターシードと任意の値の組から決定的に 63 bit のシードを作る。"""
    material = ":".join([str(int(master_seed)), *(repr(s) for s in salt)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _SEED_MASK


def _purpose_key(purpose: str) -> int:
    return int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:4], "big")


class RandomStreams:
    """用途名とノード番号で識別される numpy Generator の集合。"""

    def __init__(self, master_seed: int) -> None:
        self.master_seed = int(master_seed)
        self._cache: Dict[Tuple[str, int], np.random.Generator] = {}

    def generator(self, purpose: str, index: int = 0) -> np.random.Generator:
        key = (purpose, int(index))
        rng = self._cache.get(key)
        if rng is None:
            seq = np.random.SeedSequence(
                entropy=self.master_seed & _SEED_MASK,
                spawn_key=(_purpose_key(purpose), int(index)),
            )
            rng = np.random.Generator(np.random.PCG64(seq))
            self._cache[key] = rng
        return rng
