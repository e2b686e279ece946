"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the pieces the ranking policy and the simulation environment need:
linear layers, factorization-machine crosses, GRU cells, a single-head
transformer block, masked softmax, and Adagrad.
"""
from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DimensionError", "CapacityError", "EmptyActionSetError",
    "TrainingDivergenceError", "no_grad", "ParamStore", "adagrad_step",
    "linear", "linear_forward", "mlp", "fm_cross", "gru_cell", "transformer_block",
    "masked_softmax", "masked_log_prob", "layer_norm",
]


class DimensionError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class EmptyActionSetError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # interior gradients are no longer needed once propagated
            if node._parents:
                node.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor, names: tuple[str, str] = ("a", "b")) -> Tensor:
    if a.ndim == 0 or b.ndim == 0 or (a.ndim == 1 and b.ndim == 1):
        raise DimensionError(f"matmul needs matrix operands, got {names[0]}{a.shape} and {names[1]}{b.shape}")
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != k_b:
        raise DimensionError(
            f"inner dimensions do not conform: {names[0]}{a.shape} @ {names[1]}{b.shape}")

    def backward(g):
        A, B, G = a.data, b.data, g
        if A.ndim == 1:
            A, G = A[None, :], G[..., None, :]
        if B.ndim == 1:
            B, G = B[:, None], G[..., None]
        ga = G @ np.swapaxes(B, -1, -2)
        if b.ndim == 2 and A.ndim > 2:
            # shared weight: fold the batch axes instead of summing per-batch products
            gb = A.reshape(-1, A.shape[-1]).T @ G.reshape(-1, G.shape[-1])
            return _unbroadcast(ga[..., 0, :] if a.ndim == 1 else ga, a.shape), gb
        gb = np.swapaxes(A, -1, -2) @ G
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    advanced = _is_advanced(idx)

    def backward(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ----------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = xW + b over the last axis of x."""
    y = matmul(x, W, names=("x", "W"))
    if b is not None:
        if b.shape != (W.shape[-1],):
            raise DimensionError(f"bias b{b.shape} does not match W{W.shape}")
        y = add(y, b)
    return y


linear_forward = linear


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """tanh between layers, linear output."""
    for i, (W, b) in enumerate(layers):
        x = linear(x, W, b)
        if i < len(layers) - 1:
            x = tanh(x)
    return x


def fm_cross(u: Tensor, i: Tensor) -> Tensor:
    """Pairwise field products u_a * i_b, a-major, over the last axis.

    Leading axes broadcast, so one user vector can be crossed with a whole
    pool of items at once.
    """
    if u.shape[-1] == 0 or i.shape[-1] == 0:
        raise ValueError("fm_cross needs non-empty user and item feature vectors")
    n_u, n_i = u.shape[-1], i.shape[-1]
    outer = mul(reshape(u, u.shape[:-1] + (n_u, 1)), reshape(i, i.shape[:-1] + (1, n_i)))
    return reshape(outer, outer.shape[:-2] + (n_u * n_i,))


def gru_cell(x: Tensor, h: Tensor, p: dict[str, Tensor], x_proj: Tensor | None = None) -> Tensor:
    """One GRU step.

    The six gate matrices are packed column-wise as [reset | update | candidate]
    into W_i (input side) and W_h (hidden side); b_i and b_h are the two bias
    sets. ``x_proj`` may carry a precomputed ``x @ W_i + b_i``.
    """
    d = h.shape[-1]
    if p["W_h"].shape != (d, 3 * d):
        raise DimensionError(f"hidden h{h.shape} does not match W_h{p['W_h'].shape}")
    if x_proj is None:
        if x.shape[-1] != p["W_i"].shape[0]:
            raise DimensionError(f"input x{x.shape} does not match W_i{p['W_i'].shape}")
        x_proj = linear(x, p["W_i"], p["b_i"])
    h_proj = linear(h, p["W_h"], p["b_h"])
    r = sigmoid(x_proj[..., :d] + h_proj[..., :d])
    z = sigmoid(x_proj[..., d:2 * d] + h_proj[..., d:2 * d])
    n = tanh(x_proj[..., 2 * d:] + r * h_proj[..., 2 * d:])
    return n + z * (h - n)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is True get exactly 0."""
    z = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if mask.all(axis=-1).any():
            raise EmptyActionSetError("every entry is masked; the episode should have terminated")
        z = np.where(mask, -np.inf, z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), backward)


def masked_log_prob(logits: Tensor, mask, index: np.ndarray) -> Tensor:
    """log softmax(logits)[index] per row of a (R, N) logit matrix, masked entries excluded."""
    z = logits.data
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if mask.all(axis=-1).any():
        raise EmptyActionSetError("every entry is masked; the episode should have terminated")
    rows = np.arange(z.shape[0])
    index = np.asarray(index)
    if mask[rows, index].any():
        raise ValueError("log-probability requested for a masked entry")
    zm = np.where(mask, -np.inf, z)
    top = zm.max(axis=-1, keepdims=True)
    e = np.exp(zm - top)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    out = z[rows, index] - (top[:, 0] + np.log(s[:, 0]))

    def backward(g):
        gl = -p * g[:, None]
        gl[rows, index] += g
        return (gl,)

    return _result(out, (logits,), backward)


def transformer_block(X: Tensor, P: Tensor, p: dict[str, Tensor], causal: bool = True,
                      return_attention: bool = False):
    """Single-head self-attention + feed-forward, post-norm residuals.

    X is (..., t, d); the first t rows of the positional matrix P are added
    before attention. With ``causal`` each row attends only to itself and
    earlier rows.
    """
    t, d = X.shape[-2], X.shape[-1]
    if t > P.shape[0]:
        raise CapacityError(f"sequence length {t} exceeds positional capacity {P.shape[0]}")
    if P.shape[1] != d:
        raise DimensionError(f"positional matrix P{P.shape} does not match X{X.shape}")
    Z = X + P[:t]
    Q = matmul(Z, p["W_q"])
    K = matmul(Z, p["W_k"])
    V = matmul(Z, p["W_v"])
    scores = matmul(Q, swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d))
    mask = np.triu(np.ones((t, t), dtype=bool), k=1) if causal else None
    A = masked_softmax(scores, mask)
    attn = matmul(matmul(A, V), p["W_o"])
    Y = layer_norm(Z + attn, p["ln1_g"], p["ln1_b"])
    F = linear(relu(linear(Y, p["W_1"], p["b_1"])), p["W_2"], p["b_2"])
    out = layer_norm(Y + F, p["ln2_g"], p["ln2_b"])
    return (out, A) if return_attention else out


# ----------------------------------------------------------------------------
# parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParamStore:
    """Named trainable tensors plus their Adagrad squared-gradient accumulators."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = {}
        self.accum: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.accum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return sorted(self.params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore({k: v.data.copy() for k, v in self.params.items()})
        out.accum = {k: v.copy() for k, v in self.accum.items()}
        return out

    def num_values(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        save_checkpoint(path, self, meta)


ADAGRAD_EPS = 1e-8


def adagrad_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
                 eps: float = ADAGRAD_EPS) -> ParamStore:
    """In-place Adagrad descent step; returns the same store.

    All gradients are validated before any parameter moves, so a failing step
    leaves the store untouched.
    """
    checked = {}
    for name in sorted(grads):
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != store.params[name].shape:
            raise DimensionError(f"gradient {name}{g.shape} does not match parameter{store.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
        checked[name] = g
    for name, g in checked.items():
        param = store.params[name]
        store.accum[name] += g * g
        param.data -= lr * g / (np.sqrt(store.accum[name]) + eps)
    return store


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ----------------------------------------------------------------------------
# checkpoint container
#
# A UTF-8 JSON document:
#   {"format": "cterank-checkpoint/1",
#    "meta": {...free-form model config...},
#    "params": [{"name": str, "shape": [int, ...], "values": [float, ...]}, ...]}
# Parameters are sorted by name; values are row-major and written with
# Python's shortest round-tripping float repr, so load(save(x)) is bit-exact.

CHECKPOINT_FORMAT = "cterank-checkpoint/1"


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": [
            {"name": k, "shape": list(store[k].shape), "values": store[k].data.ravel().tolist()}
            for k in store.names()
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    store = ParamStore()
    for entry in doc["params"]:
        values = np.array(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{path}: parameter {entry['name']} has {values.size} values for shape {shape}")
        store.add(entry["name"], values.reshape(shape))
    return store, doc.get("meta", {})


def init_mlp(store: ParamStore, prefix: str, sizes: Iterable[int], rng: np.random.Generator) -> None:
    sizes = list(sizes)
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"{prefix}.{i}.W", glorot(rng, n_in, n_out))
        store.add(f"{prefix}.{i}.b", np.zeros(n_out))


def mlp_layers(store: ParamStore, prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers, i = [], 0
    while f"{prefix}.{i}.W" in store:
        layers.append((store[f"{prefix}.{i}.W"], store[f"{prefix}.{i}.b"]))
        i += 1
    return layers


def init_gru(store: ParamStore, prefix: str, d_in: int, d: int, rng: np.random.Generator) -> None:
    # each of the three gate blocks gets its own fan-in/fan-out limit
    store.add(f"{prefix}.W_i", np.concatenate([glorot(rng, d_in, d) for _ in range(3)], axis=1))
    store.add(f"{prefix}.W_h", np.concatenate([glorot(rng, d, d) for _ in range(3)], axis=1))
    store.add(f"{prefix}.b_i", np.zeros(3 * d))
    store.add(f"{prefix}.b_h", np.zeros(3 * d))


def init_transformer(store: ParamStore, prefix: str, d: int, d_ff: int, max_len: int,
                     rng: np.random.Generator) -> None:
    store.add(f"{prefix}.P", glorot(rng, max_len, d))
    for name in ("W_q", "W_k", "W_v", "W_o"):
        store.add(f"{prefix}.{name}", glorot(rng, d, d))
    store.add(f"{prefix}.W_1", glorot(rng, d, d_ff))
    store.add(f"{prefix}.b_1", np.zeros(d_ff))
    store.add(f"{prefix}.W_2", glorot(rng, d_ff, d))
    store.add(f"{prefix}.b_2", np.zeros(d))
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}_g", np.ones(d))
        store.add(f"{prefix}.{ln}_b", np.zeros(d))
