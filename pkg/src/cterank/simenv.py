"""Simulation environment: learned conditional CTR and PBR of a browsing history.

Each history item is fused with the user (FM cross + MLP), the sequence
goes through one causal transformer block with a learned positional matrix,
and a small head maps every position to a (CTR, PBR) logit pair. Because
attention is causal, position t of a full session sees exactly the prefix
up to t, so one pass yields every position's conditional estimate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import ItemFeatures, SessionRecord, UserFeatures, pool_arrays
from .nn import ParamStore, Tensor, TrainingDivergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvEstimate:
    ctr: float
    pbr: float


@dataclass
class SimEnvConfig:
    n_user: int
    n_item: int
    d_model: int = 32
    fusion_hidden: tuple[int, ...] = (64, 32)
    d_ff: int = 64
    head_hidden: int = 32
    max_len: int = 8

    def __post_init__(self):
        self.fusion_hidden = tuple(self.fusion_hidden)


@dataclass
class EnvTrainConfig:
    lr: float = 1e-2
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0


class SimEnvModel:
    def __init__(self, config: SimEnvConfig, params: ParamStore):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: SimEnvConfig, seed: int = 0) -> "SimEnvModel":
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d = config.d_model
        nn.init_mlp(store, "fusion", [config.n_user * config.n_item, *config.fusion_hidden, d], rng)
        nn.init_transformer(store, "enc", d, config.d_ff, config.max_len, rng)
        nn.init_mlp(store, "head", [d, config.head_hidden, 2], rng)
        return cls(config, store)

    def save(self, path: str | Path, run_config: dict | None = None) -> None:
        meta = {"kind": "simenv", "config": asdict(self.config)}
        if run_config is not None:
            meta["run_config"] = run_config
        nn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SimEnvModel":
        store, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "simenv":
            raise ValueError(f"{path}: not a simulation-environment checkpoint")
        return cls(SimEnvConfig(**meta["config"]), store)

    # -- forward ------------------------------------------------------------

    def logits(self, users: np.ndarray | Tensor, items: np.ndarray | Tensor) -> Tensor:
        """users (B, n_u), items (B, t, n_i) -> (B, t, 2) logits of (CTR, PBR)."""
        users, items = nn._wrap(users), nn._wrap(items)
        t = items.shape[-2]
        if t > self.config.max_len:
            raise nn.CapacityError(f"history of {t} exceeds positional capacity {self.config.max_len}")
        if items.shape[-1] != self.config.n_item or users.shape[-1] != self.config.n_user:
            raise nn.DimensionError(
                f"feature sizes user {users.shape[-1]}/item {items.shape[-1]} do not match "
                f"model {self.config.n_user}/{self.config.n_item}")
        u = nn.reshape(users, (users.shape[0], 1, users.shape[-1]))
        e = nn.mlp(nn.fm_cross(u, items), nn.mlp_layers(self.params, "fusion"))
        enc = self.params.group("enc")
        h = nn.transformer_block(e, enc["P"], enc, causal=True)
        return nn.mlp(h, nn.mlp_layers(self.params, "head"))

    def estimate(self, user: np.ndarray, feats: np.ndarray, cats: np.ndarray,
                 prefixes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        prefixes = np.asarray(prefixes, dtype=np.int64)
        users = np.broadcast_to(np.asarray(user, dtype=np.float64), (len(prefixes), len(user)))
        with nn.no_grad():
            z = self.logits(users, feats[prefixes]).data[:, -1, :]
        p = nn._sigmoid(z)
        return p[:, 0], p[:, 1]


def env_forward(model: SimEnvModel, user: UserFeatures, history: Sequence[ItemFeatures]) -> EnvEstimate:
    """Conditional (CTR, PBR) of the last history item given everything before it."""
    if not 1 <= len(history) <= model.config.max_len:
        raise nn.CapacityError(f"history length {len(history)} outside 1..{model.config.max_len}")
    feats, cats = pool_arrays(history)
    c, b = model.estimate(user.as_array(), feats, cats, np.arange(len(history))[None, :])
    return EnvEstimate(float(c[0]), float(b[0]))


def env_rollout_estimate(model, user: UserFeatures, history: Sequence[ItemFeatures],
                         next_item: ItemFeatures) -> EnvEstimate:
    if any(it.item_id == next_item.item_id for it in history):
        raise ValueError(f"item {next_item.item_id} is already in the history")
    if isinstance(model, SimEnvModel):
        return env_forward(model, user, [*history, next_item])
    feats, cats = pool_arrays([*history, next_item])
    c, b = model.estimate(user.as_array(), feats, cats, np.arange(len(history) + 1)[None, :])
    return EnvEstimate(float(c[0]), float(b[0]))


# ----------------------------------------------------------------------------
# training


@dataclass
class SessionArrays:
    users: np.ndarray      # (S, n_u)
    items: np.ndarray      # (S, T, n_i), zero padded
    clicks: np.ndarray     # (S, T)
    bounces: np.ndarray    # (S, T)
    valid: np.ndarray      # (S, T) bool

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> "SessionArrays":
        sub = SessionArrays(self.users[idx], self.items[idx], self.clicks[idx],
                            self.bounces[idx], self.valid[idx])
        t = int(sub.valid.sum(axis=1).max()) if len(sub) else 0
        return SessionArrays(sub.users, sub.items[:, :t], sub.clicks[:, :t],
                             sub.bounces[:, :t], sub.valid[:, :t])


def session_arrays(sessions: Sequence[SessionRecord]) -> SessionArrays:
    if not sessions:
        raise ValueError("no sessions")
    T = max(r.depth for r in sessions)
    n_u = len(sessions[0].user.features)
    n_i = len(sessions[0].impressions[0].item.features)
    S = len(sessions)
    out = SessionArrays(np.zeros((S, n_u)), np.zeros((S, T, n_i)), np.zeros((S, T)),
                        np.zeros((S, T)), np.zeros((S, T), dtype=bool))
    for s, rec in enumerate(sessions):
        out.users[s] = rec.user.features
        for k, imp in enumerate(rec.impressions):
            out.items[s, k] = imp.item.features
            out.clicks[s, k] = imp.click
            out.bounces[s, k] = imp.bounce
            out.valid[s, k] = True
    return out


def env_loss(model: SimEnvModel, batch: Sequence[SessionRecord] | SessionArrays) -> Tensor:
    """Two-head binary cross-entropy summed over observed positions, averaged over sessions."""
    arr = batch if isinstance(batch, SessionArrays) else session_arrays(batch)
    if len(arr) == 0:
        raise ValueError("empty batch")
    z = model.logits(arr.users, arr.items)
    labels = np.stack([arr.clicks, arr.bounces], axis=-1)
    # softplus(z) - y z == -[y log sig(z) + (1-y) log(1-sig(z))], never touching log(0)
    per = nn.softplus(z) - nn.mul(z, labels)
    w = np.repeat(arr.valid[..., None], 2, axis=-1) / len(arr)
    return nn.sum(nn.mul(per, w))


def train_env(sessions: Sequence[SessionRecord], model_config: SimEnvConfig | None = None,
              config: EnvTrainConfig = EnvTrainConfig(), model: SimEnvModel | None = None,
              val_sessions: Sequence[SessionRecord] | None = None):
    """Mini-batch Adagrad with early stopping on held-out loss.

    Returns (model restored to its best validation epoch, per-epoch history).
    """
    if not sessions:
        raise ValueError("cannot train the simulation environment on an empty dataset")
    rng = np.random.default_rng(config.seed)
    data = session_arrays(sessions)
    if val_sessions is None:
        perm = rng.permutation(len(data))
        n_val = max(1, int(round(config.val_fraction * len(data)))) if len(data) > 1 else 0
        val = data.take(perm[:n_val]) if n_val else data
        train = data.take(perm[n_val:]) if n_val else data
    else:
        train, val = data, session_arrays(val_sessions)
    if model is None:
        if model_config is None:
            model_config = SimEnvConfig(n_user=data.users.shape[1], n_item=data.items.shape[2],
                                        max_len=data.items.shape[1])
        model = SimEnvModel.init(model_config, seed=config.seed)

    def val_loss() -> float:
        with nn.no_grad():
            return float(env_loss(model, val).data)

    best = val_loss()
    best_params = {k: v.copy() for k, v in model.params.values().items()}
    history = [{"epoch": 0, "train_loss": None, "val_loss": best}]
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(train), config.batch_size)):
            batch = train.take(order[start:start + config.batch_size])
            model.params.zero_grad()
            loss = env_loss(model, batch)
            if not math.isfinite(float(loss.data)):
                raise TrainingDivergenceError(f"simulation loss diverged at epoch {epoch}, batch {b}")
            loss.backward()
            nn.adagrad_step(model.params, model.params.grads(), config.lr)
            total += float(loss.data) * len(batch)
            count += len(batch)
        v = val_loss()
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": v})
        log.info("env epoch %d train %.5f val %.5f", epoch, total / count, v)
        if v < best - 1e-9:
            best, stale = v, 0
            best_params = {k: t.copy() for k, t in model.params.values().items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    for k, v in best_params.items():
        model.params[k].data[...] = v
    model.params.zero_grad()
    return model, history
