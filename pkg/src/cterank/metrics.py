"""Session-level evaluation: average clicks, average depth, CC@K and KL@K."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .data import ItemFeatures, SessionRecord


@dataclass
class RankedSession:
    session_id: str
    ranking: Sequence[ItemFeatures]               # the recommended list, best first
    history: Sequence[ItemFeatures] = ()          # items clicked before this recommendation


@dataclass
class EvalReport:
    ac: float
    ad: float
    cc_at_k: dict[int, float] = field(default_factory=dict)
    kl_at_k: dict[int, float] = field(default_factory=dict)
    n_sessions: int = 0
    kl_skipped: int = 0
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "ac": self.ac,
            "ad": self.ad,
            "cc_at_k": {str(k): v for k, v in sorted(self.cc_at_k.items())},
            "kl_at_k": {str(k): v for k, v in sorted(self.kl_at_k.items())},
            "n_sessions": self.n_sessions,
            "kl_skipped": self.kl_skipped,
            "config": self.config,
        }


def average_clicks(sessions: Sequence[SessionRecord]) -> float:
    if not sessions:
        raise ValueError("average_clicks needs at least one session")
    return math.fsum(s.clicks for s in sessions) / len(sessions)


def average_depth(sessions: Sequence[SessionRecord]) -> float:
    """Depth is the bounce position, or the full length of a censored session."""
    if not sessions:
        raise ValueError("average_depth needs at least one session")
    return math.fsum(s.depth for s in sessions) / len(sessions)


def _top_k(rs: RankedSession, k: int) -> Sequence[ItemFeatures]:
    if len(rs.ranking) < k:
        raise ValueError(f"session {rs.session_id}: ranking of {len(rs.ranking)} items is shorter than k={k}")
    return rs.ranking[:k]


def category_coverage(sessions: Sequence[RankedSession], k: int, total_categories: int) -> float:
    if total_categories < 1:
        raise ValueError("total_categories must be >= 1")
    if not sessions:
        raise ValueError("category_coverage needs at least one session")
    covered = [len({it.category_id for it in _top_k(rs, k)}) / total_categories for rs in sessions]
    return math.fsum(covered) / len(sessions)


def _category_distribution(items: Sequence[ItemFeatures]) -> dict[int, float]:
    counts: dict[int, int] = {}
    for it in items:
        counts[it.category_id] = counts.get(it.category_id, 0) + 1
    n = len(items)
    return {c: m / n for c, m in counts.items()}


def kl_divergence(history: Sequence[ItemFeatures], top: Sequence[ItemFeatures], alpha: float) -> float:
    """KL(p || (1-alpha) q + alpha p), p from the clicked history, q from the top-k list."""
    p = _category_distribution(history)
    q = _category_distribution(top)
    total = 0.0
    for c, pc in sorted(p.items()):
        q_smooth = pc + (1.0 - alpha) * (q.get(c, 0.0) - pc)     # exactly pc when q matches p
        total += pc * math.log(pc / q_smooth)
    return total


def kl_at_k(sessions: Sequence[RankedSession], k: int, alpha: float = 0.01) -> tuple[float, int]:
    """Mean smoothed KL over sessions that have a click history.

    Returns (mean, number of sessions skipped for an empty history); the mean
    is NaN when every session was skipped.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha_smooth must lie strictly between 0 and 1")
    vals, skipped = [], 0
    for rs in sessions:
        top = _top_k(rs, k)
        if not rs.history:
            skipped += 1
            continue
        vals.append(kl_divergence(rs.history, top, alpha))
    return (math.fsum(vals) / len(vals) if vals else float("nan")), skipped


def evaluate_sessions(simulated: Sequence[SessionRecord], ranked: Sequence[RankedSession],
                      k_list: Sequence[int], total_categories: int, alpha: float = 0.01,
                      config: dict | None = None) -> EvalReport:
    report = EvalReport(average_clicks(simulated), average_depth(simulated),
                        n_sessions=len(simulated), config=config or {})
    for k in k_list:
        report.cc_at_k[k] = category_coverage(ranked, k, total_categories)
        report.kl_at_k[k], report.kl_skipped = kl_at_k(ranked, k, alpha)
    return report
