"""REINFORCE against a frozen environment, with whitening or leave-one-out baselines.

One iteration: draw a mini-batch of initial states (user, pool), roll out
``n_traj`` trajectories from each, turn expected-click rewards into returns,
subtract a baseline, then take one Adagrad step on
-mean_j sum_t G'_t log pi(a_t | s_t).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import ItemFeatures, Step, Trajectory, UserFeatures, pool_arrays
from .nn import Tensor
from .oracle import list_cte
from .policy import PolicyModel, _sample, decode_incremental

log = logging.getLogger(__name__)

BASELINES = ("sampled", "whitening", "none")


@dataclass
class TrainConfig:
    k: int = 3
    n_traj: int = 8
    gamma: float = 1.0
    lr: float = 1e-3
    baseline: str = "sampled"
    batch_size: int = 4
    max_iters: int = 2000
    seed: int = 0
    eval_every: int = 50
    patience: int = 20
    grad_clip: float = 5.0
    sample_clicks: bool = False
    expected_bounce: bool = False
    constant_pbr: float | None = None

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.baseline == "sampled" and self.n_traj < 2:
            raise ValueError("the sampled baseline needs n_traj >= 2")
        if self.n_traj < 1 or self.k < 1 or self.batch_size < 1:
            raise ValueError("k, n_traj and batch_size must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


class ConstantPbrEnv:
    """Wraps an environment, replacing its bounce probability by a constant."""

    def __init__(self, env, pbr: float):
        self.env, self.pbr = env, pbr

    def estimate(self, user, feats, cats, prefixes):
        ctr, _ = self.env.estimate(user, feats, cats, prefixes)
        return ctr, np.full_like(ctr, self.pbr)


# ----------------------------------------------------------------------------
# returns and baselines


def returns(rewards: Sequence[float], gamma: float = 1.0) -> list[float]:
    if len(rewards) == 0:
        raise ValueError("empty trajectory")
    out = [0.0] * len(rewards)
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def returns_matrix(rewards: np.ndarray, valid: np.ndarray, gamma: float) -> np.ndarray:
    """Row-wise backward recursion; steps past a trajectory's end hold 0."""
    G = np.zeros_like(rewards)
    g = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        g = np.where(valid[:, t], rewards[:, t] + gamma * g, 0.0)
        G[:, t] = g
    return G


def whitening_baseline(G: Sequence[float] | np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    centred = G - G.mean()
    sd = G.std()
    return centred if sd < 1e-8 else centred / sd


def sampled_baseline(G: np.ndarray) -> np.ndarray:
    """Leave-one-out mean over the N trajectories of one group: G (N, k) -> G' (N, k)."""
    G = np.asarray(G, dtype=np.float64)
    n = G.shape[0]
    if n < 2:
        raise ValueError("the sampled baseline needs at least 2 trajectories")
    return G - (G.sum(axis=0, keepdims=True) - G) / (n - 1)


# ----------------------------------------------------------------------------
# rollouts


@dataclass
class ReplayBuffer:
    """Trajectories of one iteration, stored as (R, k) arrays; row r belongs to group[r]."""
    users: list[UserFeatures]
    pools: list[tuple[ItemFeatures, ...]]
    group: np.ndarray
    actions: np.ndarray
    ctr: np.ndarray
    pbr: np.ndarray
    rewards: np.ndarray
    valid: np.ndarray
    bounced: np.ndarray | None = None
    returns: np.ndarray | None = None
    adjusted: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def trajectory(self, r: int) -> Trajectory:
        g = self.group[r]
        steps = [Step(int(self.actions[r, t]), float(self.ctr[r, t]), float(self.pbr[r, t]),
                      float(self.rewards[r, t]),
                      bool(t == self.lengths[r] - 1 and self.bounced[r]))
                 for t in range(int(self.lengths[r]))]
        tr = Trajectory(self.users[g], self.pools[g], steps)
        if self.returns is not None:
            tr.returns = self.returns[r, :len(steps)].tolist()
        if self.adjusted is not None:
            tr.adjusted = self.adjusted[r, :len(steps)].tolist()
        return tr


def rollout_batch(model: PolicyModel, env, states: Sequence[tuple[UserFeatures, Sequence[ItemFeatures]]],
                  n_traj: int, k: int, rng: np.random.Generator, sample_clicks: bool = False,
                  expected_bounce: bool = False) -> ReplayBuffer:
    """n_traj sampled trajectories from each initial state; all pools must share one size."""
    G = len(states)
    N = len(states[0][1])
    if any(len(p) != N for _, p in states):
        raise ValueError("rollout_batch needs equal pool sizes")
    if not 1 <= k <= N:
        raise ValueError(f"rank size k={k} must lie in 1..{N}")
    R = G * n_traj
    group = np.repeat(np.arange(G), n_traj)
    users = np.stack([u.as_array() for u, _ in states])
    arrays = [pool_arrays(p) for _, p in states]
    feats = np.stack([a[0] for a in arrays])
    with nn.no_grad():
        XP = model.input_projection(model.fuse(users, feats)).data[group]

    actions = np.zeros((R, k), dtype=np.int64)
    ctr = np.zeros((R, k))
    pbr = np.zeros((R, k))
    rewards = np.zeros((R, k))
    valid = np.zeros((R, k), dtype=bool)
    bounced = np.zeros(R, dtype=bool)
    mask = np.zeros((R, N), dtype=bool)
    h = np.zeros((R, model.config.d_model))
    alive = np.ones(R, dtype=bool)
    survive = np.ones(R)
    rows = np.arange(R)
    for t in range(k):
        with nn.no_grad():
            H, logits = model.sweep(Tensor(XP), Tensor(h))
            probs = nn.masked_softmax(logits, mask).data
        u = rng.random(R)
        a = np.array([_sample(probs[r], u[r]) for r in range(R)])
        actions[:, t] = a
        mask[rows, a] = True
        for g in range(G):
            sel = group == g
            c, b = env.estimate(states[g][0].as_array(), arrays[g][0], arrays[g][1], actions[sel, :t + 1])
            ctr[sel, t], pbr[sel, t] = c, b
        clicks = (rng.random(R) < ctr[:, t]).astype(np.float64) if sample_clicks else ctr[:, t]
        valid[:, t] = alive
        if expected_bounce:
            rewards[:, t] = clicks * survive
            survive = survive * (1.0 - pbr[:, t])
        else:
            rewards[:, t] = np.where(alive, clicks, 0.0)
            fired = rng.random(R) < pbr[:, t]
            bounced |= alive & fired
            alive = alive & ~fired
        h = H.data[:, -1] if model.config.carry == "last" else H.data[rows, a]
    return ReplayBuffer([s[0] for s in states], [tuple(s[1]) for s in states], group,
                        actions, ctr, pbr, rewards, valid, bounced)


def rollout(model: PolicyModel, env, user: UserFeatures, pool: Sequence[ItemFeatures], k: int,
            rng: np.random.Generator, gamma: float = 1.0, **kw) -> Trajectory:
    buf = rollout_batch(model, env, [(user, pool)], 1, k, rng, **kw)
    buf.returns = returns_matrix(buf.rewards, buf.valid, gamma)
    return buf.trajectory(0)


def apply_baseline(buf: ReplayBuffer, mode: str, gamma: float) -> None:
    buf.returns = returns_matrix(buf.rewards, buf.valid, gamma)
    if mode == "none":
        buf.adjusted = buf.returns.copy()
    elif mode == "whitening":
        adj = np.zeros_like(buf.returns)
        adj[buf.valid] = whitening_baseline(buf.returns[buf.valid])
        buf.adjusted = adj
    elif mode == "sampled":
        adj = np.zeros_like(buf.returns)
        for g in np.unique(buf.group):
            sel = buf.group == g
            adj[sel] = sampled_baseline(buf.returns[sel])
        buf.adjusted = np.where(buf.valid, adj, 0.0)
    else:
        raise ValueError(f"unknown baseline {mode!r}")


# ----------------------------------------------------------------------------
# gradient


def log_prob_objective(model: PolicyModel, buf: ReplayBuffer, coef: np.ndarray) -> Tensor:
    """sum_{r,t} coef[r,t] * log pi(a_rt | s_rt), re-evaluated with the autodiff graph."""
    R, k = buf.actions.shape
    users = np.stack([u.as_array() for u in buf.users])
    feats = np.stack([pool_arrays(p)[0] for p in buf.pools])
    E = model.fuse(users, feats)[buf.group]
    XP = model.input_projection(E)
    h = Tensor(np.zeros((R, model.config.d_model)))
    mask = np.zeros((R, len(buf.pools[0])), dtype=bool)
    rows = np.arange(R)
    total = None
    for t in range(k):
        live = buf.valid[:, t]
        if not live.any():
            break
        H, logits = model.sweep(XP, h)
        lp = nn.masked_log_prob(logits, mask, buf.actions[:, t])
        term = nn.sum(nn.mul(lp, np.where(live, coef[:, t], 0.0)))
        total = term if total is None else total + term
        mask[rows, buf.actions[:, t]] = True
        h = model.carry(H, buf.actions[:, t])
    return total if total is not None else Tensor(0.0)


def policy_gradient(model: PolicyModel, buf: ReplayBuffer) -> dict[str, np.ndarray]:
    """Gradient of the REINFORCE objective (1/R) sum G' log pi, for ascent."""
    model.params.zero_grad()
    obj = log_prob_objective(model, buf, buf.adjusted / len(buf.actions))
    if obj.requires_grad:
        obj.backward()
    grads = model.params.grads()
    model.params.zero_grad()
    return grads


def policy_gradient_step(model: PolicyModel, buf: ReplayBuffer, lr: float,
                         grad_clip: float | None = 5.0) -> float:
    """One ascent step; returns the pre-clip gradient norm."""
    grads = policy_gradient(model, buf)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nn.TrainingDivergenceError(f"non-finite policy gradient for {name!r}")
    norm = nn.clip_grad_norm(grads, grad_clip) if grad_clip else math.nan
    # Adagrad descends, so hand it the negated ascent direction
    nn.adagrad_step(model.params, {k: -g for k, g in grads.items()}, lr)
    return norm


# ----------------------------------------------------------------------------
# training loop


def greedy_cte(model: PolicyModel, env, states, k: int, gamma: float = 1.0) -> float:
    """Mean analytic CTE of the argmax-decoded policy over ``states``."""
    vals = [list_cte(env, u, p, decode_incremental(model, u, p, min(k, len(p))).items, gamma)
            for u, p in states]
    return float(np.mean(vals))


def train_policy(model: PolicyModel, env, sample_states: Callable[[np.random.Generator, int], list],
                 config: TrainConfig, eval_states=None, target_cte: float | None = None,
                 on_eval: Callable[[dict], None] | None = None):
    """Runs REINFORCE until max_iters, an evaluation plateau, or ``target_cte``.

    ``sample_states(rng, n)`` draws initial (user, pool) pairs. Returns the
    training log: one dict per evaluation with iteration, mean return and
    eval CTE.
    """
    if config.constant_pbr is not None:
        env = ConstantPbrEnv(env, config.constant_pbr)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best, stale = -math.inf, 0
    recent: list[float] = []

    def evaluate(it: int) -> bool:
        nonlocal best, stale
        rec = {"iteration": it, "mean_return": float(np.mean(recent)) if recent else None}
        if eval_states:
            rec["eval_cte"] = greedy_cte(model, env, eval_states, config.k, config.gamma)
        history.append(rec)
        recent.clear()
        if on_eval:
            on_eval(rec)
        log.info("policy iter %d %s", it, rec)
        if "eval_cte" in rec:
            if target_cte is not None and rec["eval_cte"] >= target_cte:
                return True
            if rec["eval_cte"] > best + 1e-9:
                best, stale = rec["eval_cte"], 0
            else:
                stale += 1
                if stale >= config.patience:
                    return True
        return False

    if evaluate(0):
        return history
    for it in range(1, config.max_iters + 1):
        states = sample_states(rng, config.batch_size)
        by_size: dict[int, list] = {}
        for s in states:
            by_size.setdefault(len(s[1]), []).append(s)
        grads_total = None
        for size in sorted(by_size):
            buf = rollout_batch(model, env, by_size[size], config.n_traj, min(config.k, size), rng,
                                config.sample_clicks, config.expected_bounce)
            apply_baseline(buf, config.baseline, config.gamma)
            recent.append(float(buf.returns[:, 0].mean()))
            g = policy_gradient(model, buf)
            w = len(buf.actions) / (len(states) * config.n_traj)
            grads_total = {n: v * w for n, v in g.items()} if grads_total is None else \
                {n: grads_total[n] + v * w for n, v in g.items()}
        for name, g in grads_total.items():
            if not np.all(np.isfinite(g)):
                raise nn.TrainingDivergenceError(f"non-finite policy gradient for {name!r} at iteration {it}")
        if config.grad_clip:
            nn.clip_grad_norm(grads_total, config.grad_clip)
        nn.adagrad_step(model.params, {n: -g for n, g in grads_total.items()}, config.lr)
        if it % config.eval_every == 0 or it == config.max_iters:
            if evaluate(it):
                break
    return history


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
