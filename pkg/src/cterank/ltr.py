"""Learning-to-rank data turned into browsing sessions with bounce labels.

Stage one orders each query group by a pointwise click scorer (the exposure
sequence). Stage two walks that sequence, scoring each item with a modified
MMR (blend of predicted CTR and distance to what was already shown), keeps a
running mean of MMR as the user's satisfaction, and ends the session at the
first position where that mean drops below a threshold.

Position 1 has nothing exposed before it, so its distance term is taken as
the largest pairwise distance inside the query group: the first item is
never penalised for redundancy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .data import Impression, ItemFeatures, SessionRecord, UserFeatures

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray], np.ndarray]


class LtrParseError(ValueError):
    pass


@dataclass(frozen=True)
class LtrExample:
    query_id: str
    rating: int
    features: np.ndarray

    def __post_init__(self):
        if self.rating not in (0, 1, 2, 3, 4):
            raise ValueError(f"rating {self.rating} outside 0..4")


@dataclass(frozen=True)
class BounceConfig:
    lam: float = 0.1
    threshold: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


def parse_ltr(path: str | Path, dim: int = 700) -> list[LtrExample]:
    """Read ``rating qid:Q idx:val ...`` lines (1-based feature indices, '#' comments)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                rating = int(tokens[0])
            except ValueError:
                raise LtrParseError(f"{path}:{lineno}: rating {tokens[0]!r} is not an integer") from None
            if rating not in (0, 1, 2, 3, 4):
                raise LtrParseError(f"{path}:{lineno}: rating {rating} outside 0..4")
            if len(tokens) < 2 or not tokens[1].startswith("qid:"):
                raise LtrParseError(f"{path}:{lineno}: missing qid field")
            qid = tokens[1][4:]
            x = np.zeros(dim)
            for tok in tokens[2:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise LtrParseError(f"{path}:{lineno}: bad feature token {tok!r}") from None
                if not 1 <= idx <= dim:
                    raise LtrParseError(f"{path}:{lineno}: feature index {idx} outside 1..{dim}")
                x[idx - 1] = val
            out.append(LtrExample(qid, rating, x))
    return out


def click_label(rating: int) -> int:
    return int(rating > 2)


def exposure_sequence(scores: Sequence[float]) -> list[int]:
    """Indices by descending score; equal scores keep their original order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        log.warning("empty query group skipped")
        return []
    return np.argsort(-scores, kind="stable").tolist()


def mmr(candidate: np.ndarray, rating: float, exposed: Sequence[np.ndarray], lam: float,
        first_distance: float | None = None) -> float:
    """lam * rating + (1 - lam) * (distance from candidate to the nearest exposed item)."""
    if len(exposed):
        dist = float(np.min(np.linalg.norm(np.asarray(exposed) - candidate, axis=1)))
    elif first_distance is None:
        raise ValueError("first position needs first_distance")
    else:
        dist = first_distance
    return lam * rating + (1.0 - lam) * dist


def decay_rate(mmr_values: Sequence[float], j: int) -> float:
    if j < 1:
        raise ValueError("position j must be >= 1")
    if j > len(mmr_values):
        raise ValueError(f"position {j} beyond sequence of {len(mmr_values)}")
    return math.fsum(mmr_values[:j]) / j


def bounce_labels(decay: Sequence[float], threshold: float) -> tuple[list[int], int | None]:
    """Labels up to and including the first position whose decay rate is below
    threshold, and that 1-based position (None when the user never bounces)."""
    if len(decay) == 0:
        raise ValueError("decay sequence is empty")
    labels = []
    for j, d in enumerate(decay, start=1):
        if d < threshold:
            labels.append(1)
            return labels, j
        labels.append(0)
    return labels, None


def max_pairwise_distance(x: np.ndarray) -> float:
    if len(x) < 2:
        return 0.0
    return float(pdist(x, "euclidean").max())


def session_from_group(qid: str, group: list[LtrExample], scores: np.ndarray,
                       config: BounceConfig, standardize: bool = False) -> SessionRecord:
    feats = np.stack([ex.features for ex in group])
    rep = feats
    if standardize:
        sd = feats.std(axis=0)
        rep = (feats - feats.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    order = exposure_sequence(scores)
    first = max_pairwise_distance(rep)
    ratings = np.clip(scores, 0.0, 1.0)
    mmrs: list[float] = []
    shown: list[int] = []
    bounced = False
    for j, idx in enumerate(order, start=1):
        mmrs.append(mmr(rep[idx], float(ratings[idx]), rep[shown], config.lam, first))
        shown.append(idx)
        if decay_rate(mmrs, j) < config.threshold:
            bounced = True
            break
    items = [ItemFeatures(f"q{qid}-d{i}", tuple(group[i].features.tolist()), group[i].rating)
             for i in range(len(group))]
    imps = tuple(Impression(j, items[idx], click_label(group[idx].rating),
                            int(bounced and j == len(shown)))
                 for j, idx in enumerate(shown, start=1))
    rec = SessionRecord(f"q{qid}", UserFeatures(f"q{qid}", (1.0,)), imps, tuple(items),
                        censored=not bounced)
    rec.validate()
    return rec


def group_by_query(examples: Sequence[LtrExample]) -> list[tuple[str, list[LtrExample]]]:
    groups: dict[str, list[LtrExample]] = {}
    for ex in examples:
        groups.setdefault(ex.query_id, []).append(ex)
    key = (lambda q: (0, int(q), q)) if all(q.isdigit() for q in groups) else (lambda q: (1, 0, q))
    return [(q, groups[q]) for q in sorted(groups, key=key)]


def logistic_scorer(train: Sequence[LtrExample], seed: int = 0) -> Scorer:
    """Click-probability scorer fitted on ``train``; constant prior when only one class is present."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x = np.stack([ex.features for ex in train])
    y = np.array([click_label(ex.rating) for ex in train])
    if len(np.unique(y)) < 2:
        prior = float(y.mean()) if len(y) else 0.0
        return lambda feats: np.full(len(feats), prior)
    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    model.fit(x, y)
    return lambda feats: model.predict_proba(feats)[:, 1]


def build_yahoo_sessions(path: str | Path, config: BounceConfig = BounceConfig(), dim: int = 700,
                         scorer: Scorer | None = None, standardize: bool = False,
                         seed: int = 0) -> list[SessionRecord]:
    """One session per query group, in query-id order.

    Without an explicit ``scorer`` the exposure scorer is cross-fitted: query
    groups alternate between two folds, and each fold is scored by a logistic
    model trained on the other one.
    """
    groups = group_by_query(parse_ltr(path, dim))
    scores: dict[str, np.ndarray] = {}
    if scorer is not None:
        for q, g in groups:
            scores[q] = np.asarray(scorer(np.stack([ex.features for ex in g])), dtype=np.float64)
    else:
        folds = [groups[0::2], groups[1::2]]
        for k in (0, 1):
            train = [ex for _, g in folds[1 - k] for ex in g]
            fitted = logistic_scorer(train, seed) if train else (lambda f: np.zeros(len(f)))
            for q, g in folds[k]:
                scores[q] = np.asarray(fitted(np.stack([ex.features for ex in g])), dtype=np.float64)
    return [session_from_group(q, g, scores[q], config, standardize) for q, g in groups if g]
