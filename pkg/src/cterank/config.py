"""Run configuration: nested sections, unknown keys rejected, fully echoed into outputs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    sessions: int = 2000
    pool: int = 10
    depth: int = 10
    lam: float = 0.1
    threshold: float = 0.8
    ltr_dim: int = 700
    standardize: bool = False


@dataclass
class EnvSection:
    d_model: int = 32
    fusion_hidden: list = field(default_factory=lambda: [64, 32])
    d_ff: int = 64
    head_hidden: int = 32
    max_len: int = 0            # 0: largest candidate pool in the training data
    lr: float = 1e-2
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1


@dataclass
class PolicySection:
    d_model: int = 32
    fusion_hidden: list = field(default_factory=lambda: [64, 32])
    carry: str = "last"


@dataclass
class TrainSection:
    k: int = 3
    n_traj: int = 8
    gamma: float = 1.0
    lr: float = 1e-3
    baseline: str = "sampled"
    batch_size: int = 4
    max_iters: int = 2000
    eval_every: int = 50
    patience: int = 20
    grad_clip: float = 5.0
    sample_clicks: bool = False
    expected_bounce: bool = False
    constant_pbr: Any = None
    n_eval: int = 32
    pool: int = 0               # pool size for world-sampled states; 0: whole catalog


@dataclass
class EvalSection:
    k: int = 5
    k_list: list = field(default_factory=lambda: [5, 10])
    alpha_smooth: float = 0.01
    alphas: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    wgcar_literal: bool = False
    max_sessions: int = 200     # evaluate the first sessions of the data file; 0: all


@dataclass
class OracleSection:
    pool_size: int = 4
    depth: int = 3
    instances: int = 1
    alphas: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


@dataclass
class BenchSection:
    n: int = 200
    k_list: list = field(default_factory=lambda: [4, 8, 16])
    repeats: int = 3
    d_model: int = 32
    n_user: int = 4
    n_item: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    world: dict = field(default_factory=lambda: {"preset": "default", "seed": 0})
    data: DataSection = field(default_factory=DataSection)
    env: EnvSection = field(default_factory=EnvSection)
    policy: PolicySection = field(default_factory=PolicySection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def as_dict(self) -> dict:
        return asdict(self)


def _merge(obj, values: dict, where: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where}{key!r} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``overrides`` (dotted keys like "train.k")."""
    cfg = RunConfig()
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, doc, "")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        nested: dict = {leaf: value}
        for p in reversed(parents):
            nested = {p: nested}
        _merge(cfg, nested, "")
    return cfg
