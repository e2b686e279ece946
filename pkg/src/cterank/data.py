"""Users, items, sessions and the line-delimited session-log format.

Session-log grammar (UTF-8, one JSON object per line, keys in this order)::

    {"session_id": str,
     "user_id": str,
     "user_features": [float, ...],
     "censored": bool,
     "pool": null | [{"item_id": str, "features": [float, ...], "category": int}, ...],
     "impressions": [{"item_id": str, "features": [...], "category": int,
                      "click": 0|1, "bounce": 0|1}, ...]}

Positions are implicit (list order, starting at 1). ``censored`` marks a
session cut at the maximum depth without a bounce. Floats are written with
the shortest round-tripping repr, so save/load is byte-stable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SessionParseError(ValueError):
    pass


class SessionValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ItemFeatures:
    item_id: str
    features: tuple[float, ...]
    category_id: int = 0

    def as_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


@dataclass(frozen=True)
class UserFeatures:
    user_id: str
    features: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


@dataclass(frozen=True)
class Impression:
    position: int
    item: ItemFeatures
    click: int
    bounce: int


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    user: UserFeatures
    impressions: tuple[Impression, ...]
    candidate_pool: tuple[ItemFeatures, ...] | None = None
    censored: bool = False

    @property
    def depth(self) -> int:
        return len(self.impressions)

    @property
    def clicks(self) -> int:
        return sum(imp.click for imp in self.impressions)

    @property
    def items(self) -> list[ItemFeatures]:
        return [imp.item for imp in self.impressions]

    def pool(self) -> tuple[ItemFeatures, ...]:
        """Candidate pool, falling back to the impressed items when none was logged."""
        return self.candidate_pool if self.candidate_pool is not None else tuple(self.items)

    def validate(self) -> None:
        sid = self.session_id
        seen = set()
        for k, imp in enumerate(self.impressions, start=1):
            if imp.position != k:
                raise SessionValidationError(f"session {sid}: positions not consecutive from 1 (got {imp.position} at {k})")
            if imp.click not in (0, 1) or imp.bounce not in (0, 1):
                raise SessionValidationError(f"session {sid}: click/bounce labels must be 0 or 1")
            if imp.bounce and k != len(self.impressions):
                raise SessionValidationError(f"session {sid}: bounce at position {k} is not the last impression")
            if imp.item.item_id in seen:
                raise SessionValidationError(f"session {sid}: item {imp.item.item_id} appears twice")
            seen.add(imp.item.item_id)
        if self.censored and self.impressions and self.impressions[-1].bounce:
            raise SessionValidationError(f"session {sid}: censored session cannot end in a bounce")
        if self.candidate_pool is not None:
            pool_ids = [it.item_id for it in self.candidate_pool]
            if len(set(pool_ids)) != len(pool_ids):
                raise SessionValidationError(f"session {sid}: duplicate item in candidate pool")
            missing = seen - set(pool_ids)
            if missing:
                raise SessionValidationError(f"session {sid}: impressed items {sorted(missing)} not in pool")


@dataclass
class Step:
    item: int                 # index into the pool
    ctr: float
    pbr: float
    reward: float
    bounced: bool


@dataclass
class Trajectory:
    user: UserFeatures
    pool: tuple[ItemFeatures, ...]
    steps: list[Step] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)
    adjusted: list[float] = field(default_factory=list)

    @property
    def actions(self) -> list[int]:
        return [s.item for s in self.steps]

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


# ----------------------------------------------------------------------------
# serialization


def _item_doc(item: ItemFeatures) -> dict:
    return {"item_id": item.item_id, "features": [float(x) for x in item.features],
            "category": int(item.category_id)}


def record_to_json(rec: SessionRecord) -> str:
    doc = {
        "session_id": rec.session_id,
        "user_id": rec.user.user_id,
        "user_features": [float(x) for x in rec.user.features],
        "censored": bool(rec.censored),
        "pool": None if rec.candidate_pool is None else [_item_doc(it) for it in rec.candidate_pool],
        "impressions": [dict(_item_doc(imp.item), click=int(imp.click), bounce=int(imp.bounce))
                        for imp in rec.impressions],
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False)


def _parse_item(d: dict) -> ItemFeatures:
    return ItemFeatures(str(d["item_id"]), tuple(float(x) for x in d["features"]), int(d.get("category", 0)))


def record_from_json(line: str) -> SessionRecord:
    d = json.loads(line)
    if not isinstance(d, dict):
        raise ValueError("record is not an object")
    pool = d.get("pool")
    impressions = tuple(
        Impression(k, _parse_item(imp), int(imp["click"]), int(imp["bounce"]))
        for k, imp in enumerate(d["impressions"], start=1)
    )
    return SessionRecord(
        session_id=str(d.get("session_id", "")),
        user=UserFeatures(str(d["user_id"]), tuple(float(x) for x in d["user_features"])),
        impressions=impressions,
        candidate_pool=None if pool is None else tuple(_parse_item(it) for it in pool),
        censored=bool(d.get("censored", False)),
    )


def load_sessions(path: str | Path) -> list[SessionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = record_from_json(line)
            except (ValueError, KeyError, TypeError) as exc:
                raise SessionParseError(f"{path}:{lineno}: malformed session record ({exc})") from exc
            rec.validate()
            records.append(rec)
    return records


def save_sessions(records: Iterable[SessionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")


def make_session(session_id: str, user: UserFeatures, items: Sequence[ItemFeatures],
                 clicks: Sequence[int], bounce_at_end: bool,
                 pool: Sequence[ItemFeatures] | None = None) -> SessionRecord:
    n = len(items)
    imps = tuple(Impression(k + 1, it, int(c), int(bounce_at_end and k == n - 1))
                 for k, (it, c) in enumerate(zip(items, clicks)))
    rec = SessionRecord(session_id, user, imps, None if pool is None else tuple(pool),
                        censored=not bounce_at_end)
    rec.validate()
    return rec


def pool_arrays(pool: Sequence[ItemFeatures]) -> tuple[np.ndarray, np.ndarray]:
    """(N, n_i) feature matrix and (N,) category vector for a pool."""
    feats = np.array([it.features for it in pool], dtype=np.float64)
    cats = np.array([it.category_id for it in pool], dtype=np.int64)
    return feats, cats
