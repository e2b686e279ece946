"""Ranking policy: fused pool -> GRU sweep -> softmax over unplaced items.

At every decoding step the GRU re-reads the whole pool (in pool order),
starting from the hidden state carried over from the previous step, and each
item's hidden output is scored by a single projection. Under ``carry="last"``
the carried state is the hidden after the final pool position; under
``carry="chosen"`` it is the hidden at the item that was just picked.

Also here: the non-learned greedy rankers used as baselines.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import ItemFeatures, UserFeatures, pool_arrays
from .nn import ParamStore, Tensor

CARRY_MODES = ("last", "chosen")


@dataclass
class PolicyConfig:
    n_user: int
    n_item: int
    d_model: int = 32
    fusion_hidden: tuple[int, ...] = (64, 32)
    carry: str = "last"

    def __post_init__(self):
        self.fusion_hidden = tuple(self.fusion_hidden)
        if self.carry not in CARRY_MODES:
            raise ValueError(f"carry must be one of {CARRY_MODES}")


class PolicyModel:
    def __init__(self, config: PolicyConfig, params: ParamStore):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: PolicyConfig, seed: int = 0) -> "PolicyModel":
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d = config.d_model
        nn.init_mlp(store, "fusion", [config.n_user * config.n_item, *config.fusion_hidden, d], rng)
        nn.init_gru(store, "gru", d, d, rng)
        store.add("W_s", nn.glorot(rng, d, 1, shape=(d,)))
        return cls(config, store)

    def save(self, path: str | Path, run_config: dict | None = None) -> None:
        meta = {"kind": "policy", "config": asdict(self.config)}
        if run_config is not None:
            meta["run_config"] = run_config
        nn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> "PolicyModel":
        store, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path}: not a policy checkpoint")
        return cls(PolicyConfig(**meta["config"]), store)

    def copy(self) -> "PolicyModel":
        return PolicyModel(replace(self.config), self.params.copy())

    # -- differentiable pieces ---------------------------------------------

    def fuse(self, user: np.ndarray | Tensor, items: np.ndarray | Tensor) -> Tensor:
        """user (..., n_u), items (..., N, n_i) -> (..., N, d)."""
        user, items = nn._wrap(user), nn._wrap(items)
        if user.shape[-1] != self.config.n_user or items.shape[-1] != self.config.n_item:
            raise nn.DimensionError(
                f"feature sizes user {user.shape[-1]}/item {items.shape[-1]} do not match "
                f"model {self.config.n_user}/{self.config.n_item}")
        u = nn.reshape(user, user.shape[:-1] + (1, user.shape[-1]))
        return nn.mlp(nn.fm_cross(u, items), nn.mlp_layers(self.params, "fusion"))

    def input_projection(self, E: Tensor) -> Tensor:
        return nn.linear(E, self.params["gru.W_i"], self.params["gru.b_i"])

    def sweep(self, XP: Tensor, h0: Tensor) -> tuple[Tensor, Tensor]:
        """GRU over the pool positions. XP (R, N, 3d) projected inputs, h0 (R, d).

        Returns (hidden states (R, N, d), logits (R, N)).
        """
        gru = self.params.group("gru")
        h, hs = h0, []
        for i in range(XP.shape[-2]):
            h = nn.gru_cell(None, h, gru, x_proj=XP[..., i, :])
            hs.append(h)
        H = nn.stack(hs, axis=-2)
        return H, nn.matmul(H, self.params["W_s"])

    def carry(self, H: Tensor, chosen: np.ndarray) -> Tensor:
        if self.config.carry == "last":
            return H[..., -1, :]
        return H[np.arange(H.shape[0]), np.asarray(chosen)]


# ----------------------------------------------------------------------------
# single-session API


@dataclass
class FusionCache:
    user_id: str
    item_ids: tuple[str, ...]
    E: np.ndarray           # (N, d)
    XP: np.ndarray          # (N, 3d) GRU input projections of E

    def check(self, user: UserFeatures, pool: Sequence[ItemFeatures]) -> None:
        if user.user_id != self.user_id or tuple(it.item_id for it in pool) != self.item_ids:
            raise ValueError("fusion cache was built for a different (user, pool)")


@dataclass
class PolicyState:
    user: UserFeatures
    pool: tuple[ItemFeatures, ...]
    mask: np.ndarray        # True where the item is already placed
    hidden: np.ndarray      # carried GRU state
    bounced: bool = False
    t: int = 1

    @property
    def terminal(self) -> bool:
        return self.bounced or bool(self.mask.all())


def initial_state(model: PolicyModel, user: UserFeatures, pool: Sequence[ItemFeatures]) -> PolicyState:
    return PolicyState(user, tuple(pool), np.zeros(len(pool), dtype=bool),
                       np.zeros(model.config.d_model))


def fuse_pool(model: PolicyModel, user: UserFeatures, pool: Sequence[ItemFeatures]) -> FusionCache:
    if not pool:
        raise ValueError("empty candidate pool")
    feats, _ = pool_arrays(pool)
    with nn.no_grad():
        E = model.fuse(user.as_array(), feats)
        XP = model.input_projection(E)
    return FusionCache(user.user_id, tuple(it.item_id for it in pool), E.data, XP.data)


def _sweep_np(model: PolicyModel, XP: np.ndarray, h0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with nn.no_grad():
        H, logits = model.sweep(Tensor(XP[None]), Tensor(h0[None]))
    return H.data[0], logits.data[0]


def _masked_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    with nn.no_grad():
        return nn.masked_softmax(Tensor(logits), mask).data


def action_distribution(model: PolicyModel, cache: FusionCache, state: PolicyState) -> np.ndarray:
    if state.bounced:
        raise ValueError("terminal state: the user has bounced, no action is permitted")
    _, logits = _sweep_np(model, cache.XP, state.hidden)
    return _masked_probs(logits, state.mask)


def step(model: PolicyModel, cache: FusionCache, state: PolicyState,
         rng: np.random.Generator | None = None) -> tuple[int, PolicyState, float]:
    """Sample (rng given) or argmax (rng None) the next item.

    The returned state has the item placed and the carried hidden updated;
    setting its bounce flag is the caller's job.
    """
    if state.bounced:
        raise ValueError("terminal state: the user has bounced, no action is permitted")
    H, logits = _sweep_np(model, cache.XP, state.hidden)
    probs = _masked_probs(logits, state.mask)
    if rng is None:
        item = _argmax_unmasked(logits, state.mask)
    else:
        item = _sample(probs, rng.random())
    mask = state.mask.copy()
    mask[item] = True
    hidden = H[-1] if model.config.carry == "last" else H[item]
    nxt = PolicyState(state.user, state.pool, mask, hidden.copy(), False, state.t + 1)
    return item, nxt, float(np.log(probs[item]))


def _argmax_unmasked(logits: np.ndarray, mask: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest pool index on ties
    return int(np.argmax(np.where(mask, -np.inf, logits)))


def _sample(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs, axis=-1)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    idx = min(idx, len(probs) - 1)
    # never land on a zero-probability (masked) entry through round-off
    while probs[idx] == 0.0:
        idx -= 1
    return idx


@dataclass
class DecodeResult:
    items: list[int]
    logits: np.ndarray      # (k, N) step-wise logits before masking
    seconds: float = 0.0


def decode_incremental(model: PolicyModel, user: UserFeatures, pool: Sequence[ItemFeatures],
                       k: int) -> DecodeResult:
    """Greedy decoding that fuses the pool once and carries the GRU state: k sweeps of length N."""
    if not 1 <= k <= len(pool):
        raise ValueError(f"k={k} must lie in 1..{len(pool)}")
    start = time.perf_counter()
    cache = fuse_pool(model, user, pool)
    state = initial_state(model, user, pool)
    items, rows = [], []
    for _ in range(k):
        H, logits = _sweep_np(model, cache.XP, state.hidden)
        item = _argmax_unmasked(logits, state.mask)
        items.append(item)
        rows.append(logits)
        state.mask[item] = True
        state.hidden = H[-1] if model.config.carry == "last" else H[item]
    return DecodeResult(items, np.array(rows), time.perf_counter() - start)


def decode_naive(model: PolicyModel, user: UserFeatures, pool: Sequence[ItemFeatures],
                 k: int) -> DecodeResult:
    """Reference decoding: every step re-fuses the pool and replays all earlier sweeps from zeros."""
    if not 1 <= k <= len(pool):
        raise ValueError(f"k={k} must lie in 1..{len(pool)}")
    start = time.perf_counter()
    feats, _ = pool_arrays(pool)
    u = user.as_array()
    items: list[int] = []
    rows = []
    for t in range(k):
        with nn.no_grad():
            XP = model.input_projection(model.fuse(u, feats)).data
        h = np.zeros(model.config.d_model)
        for s in range(t + 1):
            H, logits = _sweep_np(model, XP, h)
            if s < t:
                h = H[-1] if model.config.carry == "last" else H[items[s]]
        mask = np.zeros(len(pool), dtype=bool)
        mask[items] = True
        items.append(_argmax_unmasked(logits, mask))
        rows.append(logits)
    return DecodeResult(items, np.array(rows), time.perf_counter() - start)


def policy_rank(model: PolicyModel, user: UserFeatures, pool: Sequence[ItemFeatures], k: int,
                mode: str = "incremental") -> list[int]:
    if mode == "incremental":
        return decode_incremental(model, user, pool, k).items
    if mode == "naive":
        return decode_naive(model, user, pool, k).items
    raise ValueError(f"unknown decode mode {mode!r}")


# ----------------------------------------------------------------------------
# non-learned baselines


def _greedy(env, user: UserFeatures, pool: Sequence[ItemFeatures], k: int, score) -> list[int]:
    if not 1 <= k <= len(pool):
        raise ValueError(f"k={k} must lie in 1..{len(pool)}")
    feats, cats = pool_arrays(pool)
    u = user.as_array()
    ids = [it.item_id for it in pool]
    chosen: list[int] = []
    for _ in range(k):
        cand = [i for i in range(len(pool)) if i not in chosen]
        prefixes = np.array([chosen + [i] for i in cand], dtype=np.int64)
        ctr, pbr = env.estimate(u, feats, cats, prefixes)
        s = score(ctr, pbr)
        top = s.max()
        chosen.append(min((c for c, v in zip(cand, s) if v == top), key=lambda c: ids[c]))
    return chosen


def greedy_ctr_rank(env, user: UserFeatures, pool: Sequence[ItemFeatures], k: int) -> list[int]:
    """Per position, the unplaced item with the highest conditional CTR given the prefix."""
    return _greedy(env, user, pool, k, lambda c, b: c)


def weighted_greedy_rank(env, user: UserFeatures, pool: Sequence[ItemFeatures], k: int,
                         alpha: float, literal: bool = False) -> list[int]:
    """Per position, argmax of alpha*CTR + (1-alpha)*(1-PBR).

    ``literal=True`` scores alpha*CTR + (1-alpha)*PBR instead, which rewards
    likely bounces; kept only for comparison.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if literal:
        return _greedy(env, user, pool, k, lambda c, b: alpha * c + (1.0 - alpha) * b)
    if alpha == 1.0:
        return greedy_ctr_rank(env, user, pool, k)
    return _greedy(env, user, pool, k, lambda c, b: alpha * c + (1.0 - alpha) * (1.0 - b))
