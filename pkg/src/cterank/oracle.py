"""Exact click-through expectation and brute-force optimal rankings."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import ItemFeatures, UserFeatures, pool_arrays
from .nn import CapacityError

MAX_ORACLE_POOL = 10


class Environment(Protocol):
    """Anything that yields conditional (CTR, PBR) for the last item of a browsing prefix."""

    def estimate(self, user: np.ndarray, feats: np.ndarray, cats: np.ndarray,
                 prefixes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """prefixes is an (R, t) array of pool indices; returns two (R,) arrays."""
        ...


@dataclass(frozen=True)
class CteProfile:
    ctr: tuple[float, ...]
    pbr: tuple[float, ...]
    gamma: float = 1.0

    def __post_init__(self):
        if len(self.ctr) != len(self.pbr):
            raise ValueError("ctr and pbr profiles must have equal length")
        for p in (*self.ctr, *self.pbr):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def cte(profile: CteProfile) -> float:
    total, survive, disc = 0.0, 1.0, 1.0
    for c, b in zip(profile.ctr, profile.pbr):
        total += disc * c * survive
        survive *= 1.0 - b
        disc *= profile.gamma
    return total


def profile_of(env: Environment, user: UserFeatures, pool: Sequence[ItemFeatures],
               order: Sequence[int], gamma: float = 1.0) -> CteProfile:
    """Conditional CTR/PBR along a fixed ordering of pool indices."""
    feats, cats = pool_arrays(pool)
    u = user.as_array()
    order = np.asarray(order, dtype=np.int64)
    ctr, pbr = [], []
    for t in range(1, len(order) + 1):
        c, b = env.estimate(u, feats, cats, order[None, :t])
        ctr.append(float(c[0]))
        pbr.append(float(b[0]))
    return CteProfile(tuple(ctr), tuple(pbr), gamma)


def list_cte(env: Environment, user: UserFeatures, pool: Sequence[ItemFeatures],
             order: Sequence[int], gamma: float = 1.0) -> float:
    return cte(profile_of(env, user, pool, order, gamma))


def optimal_ranking(env: Environment, user: UserFeatures, pool: Sequence[ItemFeatures],
                    depth: int, gamma: float = 1.0) -> tuple[list[int], float]:
    """Enumerates every ordered selection of ``depth`` pool items.

    Returns (pool indices of the best list, its CTE). Near-ties (1e-12
    relative) go to the lexicographically smallest item-id sequence.
    """
    n = len(pool)
    if n > MAX_ORACLE_POOL:
        raise CapacityError(f"pool of {n} items exceeds the oracle guard of {MAX_ORACLE_POOL}")
    if not 1 <= depth <= n:
        raise ValueError(f"depth {depth} must lie in 1..{n}")
    feats, cats = pool_arrays(pool)
    u = user.as_array()

    prefixes = np.zeros((1, 0), dtype=np.int64)
    value = np.zeros(1)
    survive = np.ones(1)
    disc = 1.0
    for t in range(depth):
        used = np.zeros((len(prefixes), n), dtype=bool)
        if t:
            np.put_along_axis(used, prefixes, True, axis=1)
        rows, nxt = np.nonzero(~used)
        prefixes = np.concatenate([prefixes[rows], nxt[:, None]], axis=1)
        c, b = _estimate_chunked(env, u, feats, cats, prefixes)
        value = value[rows] + disc * c * survive[rows]
        survive = survive[rows] * (1.0 - b)
        disc *= gamma

    best = float(value.max())
    near = np.flatnonzero(value >= best - 1e-12 * max(1.0, abs(best)))
    ids = [it.item_id for it in pool]
    pick = min(near, key=lambda r: tuple(ids[i] for i in prefixes[r]))
    return prefixes[pick].tolist(), float(value[pick])


def _estimate_chunked(env, u, feats, cats, prefixes, chunk: int = 65536):
    if len(prefixes) <= chunk:
        return env.estimate(u, feats, cats, prefixes)
    parts = [env.estimate(u, feats, cats, prefixes[s:s + chunk]) for s in range(0, len(prefixes), chunk)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def mc_cte(ranking: Sequence[int] | Callable, env: Environment, user: UserFeatures,
           pool: Sequence[ItemFeatures], n_rollouts: int, seed: int,
           depth: int | None = None, gamma: float = 1.0) -> tuple[float, float]:
    """Monte-Carlo estimate of the expected discounted click count.

    ``ranking`` is either a fixed list of pool indices or a callable
    ``(rng, prefix) -> next index`` acting as a policy. Each rollout samples
    a click from CTR_t and a bounce from PBR_t at every position, stopping at
    the first bounce. Returns (mean, standard error); the standard error is
    NaN for a single rollout.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    feats, cats = pool_arrays(pool)
    u = user.as_array()
    if callable(ranking):
        if depth is None:
            raise ValueError("depth is required when ranking is a policy")
        totals = np.array([_policy_rollout(ranking, env, u, feats, cats, depth, gamma, rng)
                           for _ in range(n_rollouts)])
    else:
        prof = profile_of(env, user, pool, ranking, gamma)
        ctr, pbr = np.array(prof.ctr), np.array(prof.pbr)
        T = len(ctr)
        clicks = rng.random((n_rollouts, T)) < ctr
        bounces = rng.random((n_rollouts, T)) < pbr
        # position t is seen iff no bounce at positions < t
        alive = np.ones((n_rollouts, T), dtype=bool)
        alive[:, 1:] = np.cumsum(bounces[:, :-1], axis=1) == 0
        totals = (clicks & alive).astype(np.float64) @ (gamma ** np.arange(T))
    mean = float(totals.mean())
    se = float(totals.std(ddof=1) / math.sqrt(n_rollouts)) if n_rollouts > 1 else float("nan")
    return mean, se


def _policy_rollout(policy, env, u, feats, cats, depth, gamma, rng) -> float:
    prefix: list[int] = []
    total, disc = 0.0, 1.0
    for _ in range(depth):
        prefix.append(int(policy(rng, list(prefix))))
        c, b = env.estimate(u, feats, cats, np.asarray(prefix, dtype=np.int64)[None, :])
        total += disc * float(rng.random() < c[0])
        if rng.random() < b[0]:
            break
        disc *= gamma
    return total
