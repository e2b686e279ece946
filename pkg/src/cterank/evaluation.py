"""Offline evaluation of rankers against an environment.

Every method ranks each logged (user, pool) pair; the ranked list is then
replayed against the environment with sampled clicks and bounces (AC/AD),
scored in closed form (CTE), and compared with the user's logged clicks for
the diversity metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ItemFeatures, SessionRecord, UserFeatures, make_session, pool_arrays
from .metrics import RankedSession, evaluate_sessions
from .oracle import list_cte
from .policy import PolicyModel, greedy_ctr_rank, policy_rank, weighted_greedy_rank

Ranker = Callable[[UserFeatures, Sequence[ItemFeatures], int], list[int]]


@dataclass
class EvalSettings:
    k_list: tuple[int, ...] = (5, 10)
    alpha_smooth: float = 0.01
    alphas: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    wgcar_literal: bool = False
    gamma: float = 1.0
    seed: int = 0
    total_categories: int | None = None     # default: distinct categories across the pools

    def __post_init__(self):
        self.k_list = tuple(int(k) for k in self.k_list)
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.k_list or min(self.k_list) < 1:
            raise ValueError("k_list must hold positive integers")
        if not 0.0 < self.alpha_smooth < 1.0:
            raise ValueError("alpha_smooth must lie strictly between 0 and 1")


@dataclass
class MethodResult:
    name: str
    ac: float
    ad: float
    cte: float
    cc_at_k: dict[int, float] = field(default_factory=dict)
    kl_at_k: dict[int, float] = field(default_factory=dict)
    kl_skipped: int = 0

    def as_dict(self) -> dict:
        return {
            "ac": self.ac,
            "ad": self.ad,
            "cte": self.cte,
            "cc_at_k": {str(k): v for k, v in sorted(self.cc_at_k.items())},
            "kl_at_k": {str(k): v for k, v in sorted(self.kl_at_k.items())},
            "kl_skipped": self.kl_skipped,
        }


def simulate_list(env, user: UserFeatures, pool: Sequence[ItemFeatures], ranking: Sequence[int],
                  rng: np.random.Generator, session_id: str) -> SessionRecord:
    """Show ``ranking`` to the user, drawing a click and a bounce at every position."""
    feats, cats = pool_arrays(pool)
    clicks: list[int] = []
    shown: list[ItemFeatures] = []
    bounced = False
    order = np.asarray(ranking, dtype=np.int64)[None, :]
    for t in range(1, len(ranking) + 1):
        c, b = env.estimate(user.as_array(), feats, cats, order[:, :t])
        clicks.append(int(rng.random() < c[0]))
        shown.append(pool[ranking[t - 1]])
        if rng.random() < b[0]:
            bounced = True
            break
    return make_session(session_id, user, shown, clicks, bounce_at_end=bounced, pool=list(pool))


def default_methods(env, settings: EvalSettings, policy: PolicyModel | None = None) -> dict[str, Ranker]:
    methods: dict[str, Ranker] = {}
    if policy is not None:
        methods["policy"] = lambda u, p, k: policy_rank(policy, u, p, k)
    methods["greedy_ctr"] = lambda u, p, k: greedy_ctr_rank(env, u, p, k)
    for a in settings.alphas:
        methods[f"wgcar_{a:g}"] = (lambda alpha: lambda u, p, k: weighted_greedy_rank(
            env, u, p, k, alpha, literal=settings.wgcar_literal))(a)
    return methods


def evaluate_methods(env, sessions: Sequence[SessionRecord], methods: dict[str, Ranker],
                     settings: EvalSettings) -> dict[str, MethodResult]:
    if not sessions:
        raise ValueError("evaluation needs at least one session")
    depth = max(settings.k_list)
    for rec in sessions:
        if len(rec.pool()) < depth:
            raise ValueError(f"session {rec.session_id}: pool of {len(rec.pool())} items is shorter "
                             f"than the largest k={depth}")
    C = settings.total_categories or len({it.category_id for r in sessions for it in r.pool()})
    out: dict[str, MethodResult] = {}
    for m, (name, ranker) in enumerate(methods.items()):
        rng = np.random.default_rng([settings.seed, m])
        simulated, ranked, ctes = [], [], []
        for rec in sessions:
            pool = rec.pool()
            ranking = ranker(rec.user, pool, depth)
            ctes.append(list_cte(env, rec.user, pool, ranking, settings.gamma))
            simulated.append(simulate_list(env, rec.user, pool, ranking, rng, rec.session_id))
            history = [imp.item for imp in rec.impressions if imp.click]
            ranked.append(RankedSession(rec.session_id, [pool[i] for i in ranking], history))
        rep = evaluate_sessions(simulated, ranked, settings.k_list, C, settings.alpha_smooth)
        out[name] = MethodResult(name, rep.ac, rep.ad, float(np.mean(ctes)), rep.cc_at_k,
                                 rep.kl_at_k, rep.kl_skipped)
    return out
