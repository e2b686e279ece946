"""Serving benchmark: naive recomputation vs incremental decoding of a ranked list."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ItemFeatures, UserFeatures
from .policy import PolicyConfig, PolicyModel, decode_incremental, decode_naive


@dataclass
class BenchConfig:
    n: int = 200
    k_list: tuple[int, ...] = (4, 8, 16)
    repeats: int = 3
    d_model: int = 32
    n_user: int = 4
    n_item: int = 8
    seed: int = 0

    def __post_init__(self):
        self.k_list = tuple(int(k) for k in self.k_list)
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.k_list or min(self.k_list) < 1 or max(self.k_list) > self.n:
            raise ValueError(f"every k must lie in 1..{self.n}")


def random_instance(rng: np.random.Generator, n_user: int, n_item: int, n: int
                    ) -> tuple[UserFeatures, list[ItemFeatures]]:
    user = UserFeatures("u", tuple(rng.normal(size=n_user).tolist()))
    pool = [ItemFeatures(f"i{j:04d}", tuple(rng.normal(size=n_item).tolist()), int(rng.integers(4)))
            for j in range(n)]
    return user, pool


def _best_time(fn, repeats: int) -> tuple[float, list[int]]:
    best, items = float("inf"), []
    for _ in range(repeats):
        start = time.perf_counter()
        items = fn().items
        best = min(best, time.perf_counter() - start)
    return best, items


def run_benchmark(config: BenchConfig) -> dict:
    """Best-of-``repeats`` wall time per decoded session for each k; timings are machine-specific."""
    rng = np.random.default_rng(config.seed)
    model = PolicyModel.init(PolicyConfig(config.n_user, config.n_item, d_model=config.d_model),
                             seed=config.seed)
    user, pool = random_instance(rng, config.n_user, config.n_item, config.n)
    rows = []
    for k in config.k_list:
        t_inc, inc = _best_time(lambda: decode_incremental(model, user, pool, k), config.repeats)
        t_naive, naive = _best_time(lambda: decode_naive(model, user, pool, k), config.repeats)
        rows.append({"k": k, "naive_s": t_naive, "incremental_s": t_inc,
                     "ratio": t_naive / t_inc, "identical": inc == naive})
    return {"n": config.n, "repeats": config.repeats, "d_model": config.d_model, "rows": rows}


def equivalence_check(n_instances: int, seed: int = 0, pool_range: Sequence[int] = (2, 12),
                      d_model: int = 8) -> int:
    """Number of random (model, pool, k) instances on which both decoders emit the same list."""
    rng = np.random.default_rng(seed)
    same = 0
    for i in range(n_instances):
        carry = "last" if i % 2 == 0 else "chosen"
        model = PolicyModel.init(PolicyConfig(3, 5, d_model=d_model, fusion_hidden=(8, 8), carry=carry),
                                 seed=int(rng.integers(2**31)))
        n = int(rng.integers(pool_range[0], pool_range[1] + 1))
        user, pool = random_instance(rng, 3, 5, n)
        k = int(rng.integers(1, n + 1))
        same += decode_incremental(model, user, pool, k).items == decode_naive(model, user, pool, k).items
    return same
