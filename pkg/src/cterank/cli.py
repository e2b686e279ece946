"""Command-line entry point: ``cterank <subcommand> ...``.

Every subcommand resolves its configuration (defaults < ``--config`` file <
flags), validates it before doing any expensive work, and echoes it into the
artifacts it writes. Reports are JSON with a fixed key order; figures go next
to the report as PNG files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bench import BenchConfig, run_benchmark
from .config import RunConfig, load_config
from .data import ItemFeatures, SessionRecord, UserFeatures, load_sessions, save_sessions
from .evaluation import EvalSettings, default_methods, evaluate_methods
from .ltr import BounceConfig, build_yahoo_sessions
from .oracle import MAX_ORACLE_POOL, list_cte, optimal_ranking
from .policy import PolicyConfig, PolicyModel, greedy_ctr_rank, policy_rank, weighted_greedy_rank
from .simenv import EnvTrainConfig, SimEnvConfig, SimEnvModel, train_env
from .trainer import ConstantPbrEnv, TrainConfig, train_policy
from .world import SyntheticWorld, bayes_env_loss, generate_synthetic, load_world, sample_initial_states

log = logging.getLogger("cterank")


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_report(path: str | Path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def _figure_path(report: str | Path, name: str) -> Path:
    report = Path(report)
    return report.with_name(f"{report.stem}.{name}.png")


def _resolve(args, overrides: dict) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None), **overrides}
    return load_config(getattr(args, "config", None), overrides)


def _world(cfg: RunConfig, path: str | None) -> SyntheticWorld:
    return load_world(path) if path else load_world(cfg.world)


def _env(args, cfg: RunConfig):
    """The environment named on the command line: a trained checkpoint, else a synthetic world."""
    if getattr(args, "env", None):
        return SimEnvModel.load(args.env)
    if getattr(args, "world", None):
        return load_world(args.world)
    raise CliError("an environment is required: pass --env <checkpoint> or --world <config>")


def _inputs(**paths) -> dict:
    return {k: _digest(v) for k, v in paths.items() if v}


def _sessions(path: str) -> list[SessionRecord]:
    sessions = load_sessions(path)
    if not sessions:
        raise CliError(f"{path}: no sessions")
    return sessions


def _states(sessions: Sequence[SessionRecord]) -> list[tuple[UserFeatures, tuple[ItemFeatures, ...]]]:
    return [(r.user, r.pool()) for r in sessions]


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.source == "yahoo":
        cfg = _resolve(args, {"data.lam": args.lam, "data.threshold": args.threshold,
                              "data.ltr_dim": args.dim,
                              "data.standardize": True if args.standardize else None})
        bc = BounceConfig(cfg.data.lam, cfg.data.threshold)
        sessions = build_yahoo_sessions(args.input, bc, cfg.data.ltr_dim,
                                        standardize=cfg.data.standardize, seed=cfg.seed)
        inputs = _inputs(input=args.input)
    else:
        cfg = _resolve(args, {"data.sessions": args.sessions, "data.pool": args.pool,
                              "data.depth": args.depth})
        world = _world(cfg, args.world)
        sessions = generate_synthetic(world, cfg.data.sessions, cfg.data.pool,
                                      min(cfg.data.depth, cfg.data.pool), cfg.seed)
        inputs = _inputs(world=args.world)
    save_sessions(sessions, args.out)
    n_bounce = sum(1 for s in sessions if not s.censored)
    write_report(Path(args.out).with_suffix(".meta.json"), {
        "command": f"gen-data {args.source}",
        "n_sessions": len(sessions),
        "n_bounced": n_bounce,
        "mean_depth": float(np.mean([s.depth for s in sessions])) if sessions else 0.0,
        "inputs": inputs,
        "config": cfg.as_dict(),
    })
    print(f"wrote {len(sessions)} sessions ({n_bounce} with a bounce) to {args.out}")
    return 0


def cmd_train_env(args) -> int:
    cfg = _resolve(args, {"env.lr": args.lr, "env.max_epochs": args.epochs})
    sessions = _sessions(args.data)
    e = cfg.env
    tcfg = EnvTrainConfig(e.lr, e.batch_size, e.max_epochs, e.patience, e.val_fraction, cfg.seed)
    max_len = e.max_len or max(len(s.pool()) for s in sessions)
    mcfg = SimEnvConfig(len(sessions[0].user.features), len(sessions[0].impressions[0].item.features),
                        e.d_model, tuple(e.fusion_hidden), e.d_ff, e.head_hidden, max_len)
    model, history = train_env(sessions, mcfg, tcfg)
    model.save(args.out, cfg.as_dict())
    report = {"command": "train-env", "history": history, "best_val_loss": min(h["val_loss"] for h in history)}
    bayes = None
    if args.world:
        bayes = bayes_env_loss(load_world(args.world), sessions)
        report["bayes_loss_all_data"] = bayes
    report["inputs"] = _inputs(data=args.data, world=args.world)
    report["config"] = cfg.as_dict()
    rpath = write_report(Path(args.out).with_suffix(".report.json"), report)
    from .plotting import env_loss_curve
    env_loss_curve(history, _figure_path(rpath, "loss"), bayes)
    print(f"trained simulation environment ({len(history) - 1} epochs, "
          f"best validation loss {report['best_val_loss']:.5f}) -> {args.out}")
    return 0


def cmd_train_policy(args) -> int:
    cfg = _resolve(args, {"train.baseline": args.baseline, "train.n_traj": args.n_traj,
                          "train.k": args.k, "train.lr": args.lr, "train.max_iters": args.max_iters,
                          "train.sample_clicks": True if args.sample_clicks else None,
                          "train.expected_bounce": True if args.expected_bounce else None,
                          "train.constant_pbr": args.constant_pbr, "policy.carry": args.carry})
    t = cfg.train
    tcfg = TrainConfig(t.k, t.n_traj, t.gamma, t.lr, t.baseline, t.batch_size, t.max_iters, cfg.seed,
                       t.eval_every, t.patience, t.grad_clip, t.sample_clicks, t.expected_bounce,
                       t.constant_pbr)
    if not args.data and not args.world:
        raise CliError("train-policy needs initial states: pass --data <sessions> or --world <config>")
    world = load_world(args.world) if args.world else None
    env = SimEnvModel.load(args.env) if args.env else world
    rng = np.random.default_rng([cfg.seed, 1])
    if args.data:
        states = _states(_sessions(args.data))

        def sample_states(r, n):
            return [states[i] for i in r.integers(len(states), size=n)]

        eval_states = [states[i] for i in rng.choice(len(states), min(t.n_eval, len(states)), replace=False)]
    else:
        pool = t.pool or world.n_items

        def sample_states(r, n):
            return sample_initial_states(world, n, pool, r)

        eval_states = sample_initial_states(world, t.n_eval, pool, rng)
    n_user, n_item = len(eval_states[0][0].features), len(eval_states[0][1][0].features)
    p = cfg.policy
    model = PolicyModel.init(PolicyConfig(n_user, n_item, p.d_model, tuple(p.fusion_hidden), p.carry),
                             seed=cfg.seed)
    curve_path = Path(args.out).with_suffix(".log.jsonl")
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    with curve_path.open("w", encoding="utf-8") as fh:
        history = train_policy(model, env, sample_states, tcfg, eval_states,
                               on_eval=lambda rec: fh.write(json.dumps(rec) + "\n"))
    model.save(args.out, cfg.as_dict())
    optimum = None
    scoring_env = ConstantPbrEnv(env, t.constant_pbr) if t.constant_pbr is not None else env
    if all(len(pool) <= 8 for _, pool in eval_states):
        optimum = float(np.mean([optimal_ranking(scoring_env, u, pool, min(t.k, len(pool)), t.gamma)[1]
                                 for u, pool in eval_states]))
    report = {"command": "train-policy", "final_eval_cte": history[-1].get("eval_cte"),
              "optimal_eval_cte": optimum, "iterations": history[-1]["iteration"],
              "history": history, "inputs": _inputs(env=args.env, data=args.data, world=args.world),
              "config": cfg.as_dict()}
    rpath = write_report(Path(args.out).with_suffix(".report.json"), report)
    from .plotting import training_curve
    training_curve(history, _figure_path(rpath, "curve"), optimum)
    print(f"trained policy for {report['iterations']} iterations, "
          f"eval CTE {report['final_eval_cte']:.4f} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, {"eval.k_list": args.k_list,
                          "eval.wgcar_literal": True if args.wgcar_literal else None})
    ev = cfg.eval
    settings = EvalSettings(tuple(ev.k_list), ev.alpha_smooth, tuple(ev.alphas), ev.wgcar_literal,
                            cfg.train.gamma, cfg.seed)
    env = _env(args, cfg)
    if isinstance(env, SyntheticWorld):
        settings.total_categories = env.n_categories
    policy = PolicyModel.load(args.policy)
    sessions = _sessions(args.data)
    if ev.max_sessions:
        sessions = sessions[:ev.max_sessions]
    results = evaluate_methods(env, sessions, default_methods(env, settings, policy), settings)
    wg = {n: r for n, r in results.items() if n.startswith("wgcar_")}
    best_wg = max(wg, key=lambda n: wg[n].cte) if wg else None
    report = {"command": "evaluate", "n_sessions": len(sessions),
              "methods": {n: r.as_dict() for n, r in results.items()},
              "best_wgcar": best_wg,
              "inputs": _inputs(policy=args.policy, env=args.env, world=args.world, data=args.data),
              "config": cfg.as_dict()}
    rpath = write_report(args.out, report)
    from .plotting import method_bars
    values = {n: {"AC": r.ac, "AD": r.ad, "CTE": r.cte,
                  **{f"CC@{k}": v for k, v in r.cc_at_k.items()},
                  **{f"KL@{k}": v for k, v in r.kl_at_k.items()}} for n, r in results.items()}
    metrics = ["AC", "AD", "CTE", *[f"CC@{k}" for k in settings.k_list], *[f"KL@{k}" for k in settings.k_list]]
    method_bars(values, metrics, _figure_path(rpath, "methods"))
    for n, r in results.items():
        print(f"{n:12s} AC {r.ac:.4f}  AD {r.ad:.4f}  CTE {r.cte:.4f}")
    return 0


def cmd_oracle(args) -> int:
    cfg = _resolve(args, {"oracle.pool_size": args.pool_size, "oracle.depth": args.depth,
                          "eval.wgcar_literal": True if args.wgcar_literal else None})
    o = cfg.oracle
    if o.pool_size > MAX_ORACLE_POOL:
        raise CliError(f"pool size {o.pool_size} exceeds the enumeration limit of {MAX_ORACLE_POOL}")
    if not 1 <= o.depth <= o.pool_size:
        raise CliError("depth must lie in 1..pool-size")
    env = _env(args, cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    if isinstance(env, SyntheticWorld):
        if o.pool_size > env.n_items:
            raise CliError(f"pool size {o.pool_size} exceeds the world's {env.n_items} items")
        instances = sample_initial_states(env, o.instances, o.pool_size, rng)
    else:
        if not args.data:
            raise CliError("oracle on a trained environment needs --data for candidate pools")
        pools = [s for s in _states(_sessions(args.data)) if len(s[1]) >= o.pool_size]
        if not pools:
            raise CliError(f"no session has a pool of at least {o.pool_size} items")
        instances = [(u, p[:o.pool_size]) for u, p in
                     (pools[i] for i in rng.choice(len(pools), min(o.instances, len(pools)), replace=False))]
    rows = []
    for user, pool in instances:
        best, best_cte = optimal_ranking(env, user, pool, o.depth)
        greedy = greedy_ctr_rank(env, user, pool, o.depth)
        g_cte = list_cte(env, user, pool, greedy)
        wg = {}
        for a in o.alphas:
            lst = weighted_greedy_rank(env, user, pool, o.depth, a, literal=cfg.eval.wgcar_literal)
            wg[f"{a:g}"] = {"list": [pool[i].item_id for i in lst], "cte": list_cte(env, user, pool, lst)}
        best_alpha = max(wg, key=lambda a: wg[a]["cte"])
        rows.append({
            "user": user.user_id, "pool": [it.item_id for it in pool],
            "best_list": [pool[i].item_id for i in best], "best_cte": best_cte,
            "greedy_ctr": {"list": [pool[i].item_id for i in greedy], "cte": g_cte},
            "wgcar": wg, "best_wgcar_alpha": best_alpha,
            "gap_vs_greedy_ctr": (best_cte - g_cte) / g_cte if g_cte > 0 else None,
            "gap_vs_best_wgcar": (best_cte - wg[best_alpha]["cte"]) / wg[best_alpha]["cte"]
            if wg[best_alpha]["cte"] > 0 else None,
        })
    summary = {"best_cte": float(np.mean([r["best_cte"] for r in rows])),
               "greedy_ctr_cte": float(np.mean([r["greedy_ctr"]["cte"] for r in rows])),
               "best_wgcar_cte": float(np.mean([r["wgcar"][r["best_wgcar_alpha"]]["cte"] for r in rows]))}
    report = {"command": "oracle", "summary": summary, "instances": rows,
              "inputs": _inputs(env=args.env, world=args.world, data=args.data), "config": cfg.as_dict()}
    rpath = write_report(args.report, report)
    from .plotting import method_bars
    method_bars({"optimal": {"CTE": summary["best_cte"]}, "greedy_ctr": {"CTE": summary["greedy_ctr_cte"]},
                 "best_wgcar": {"CTE": summary["best_wgcar_cte"]}}, ["CTE"], _figure_path(rpath, "cte"))
    print(f"optimal CTE {summary['best_cte']:.4f}  greedy-CTR {summary['greedy_ctr_cte']:.4f}  "
          f"best WGCAR {summary['best_wgcar_cte']:.4f}")
    return 0


def cmd_rank(args) -> int:
    cfg = _resolve(args, {"eval.k": args.k})
    env = _env(args, cfg)
    policy = PolicyModel.load(args.policy)
    lines = []
    for rec in _sessions(args.data):
        pool = rec.pool()
        k = min(cfg.eval.k, len(pool))
        items = policy_rank(policy, rec.user, pool, k, mode=args.mode)
        lines.append(json.dumps({"session_id": rec.session_id, "items": [pool[i].item_id for i in items],
                                 "cte": list_cte(env, rec.user, pool, items)}))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench_serving(args) -> int:
    cfg = _resolve(args, {"bench.n": args.n, "bench.k_list": args.k_list, "bench.repeats": args.repeats})
    b = cfg.bench
    result = run_benchmark(BenchConfig(b.n, tuple(b.k_list), b.repeats, b.d_model, b.n_user, b.n_item,
                                       cfg.seed))
    report = {"command": "bench-serving", **result, "config": cfg.as_dict()}
    rpath = write_report(args.report, report)
    from .plotting import scaling_plot
    scaling_plot(result["rows"], _figure_path(rpath, "scaling"))
    for r in result["rows"]:
        print(f"k={r['k']:3d}  naive {r['naive_s'] * 1e3:8.2f} ms  incremental {r['incremental_s'] * 1e3:8.2f} ms"
              f"  ratio {r['ratio']:.2f}  identical={r['identical']}")
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cterank", description="Re-ranking for click-through expectation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>")

    def common(p):
        p.add_argument("--config", help="JSON run configuration; flags override its values")
        p.add_argument("--seed", type=int, help="single seed for all randomness")
        return p

    p = sub.add_parser("gen-data", help="build a session log")
    src = p.add_subparsers(dest="source", metavar="<source>", required=True)
    y = common(src.add_parser("yahoo", help="synthesize bounces on a learning-to-rank file"))
    y.add_argument("--input", required=True)
    y.add_argument("--lambda", dest="lam", type=float)
    y.add_argument("--threshold", type=float)
    y.add_argument("--dim", type=int, help="feature dimension of the input file")
    y.add_argument("--standardize", action="store_true", help="z-score features before distances")
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_gen_data)
    s = common(src.add_parser("synthetic", help="sample sessions from a synthetic world"))
    s.add_argument("--sessions", type=int)
    s.add_argument("--pool", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--world", help="world config file (default: the config's world section)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-env", help="fit the simulation environment"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--world", help="true world, to report its log-loss for reference")
    p.set_defaults(func=cmd_train_env)

    p = common(sub.add_parser("train-policy", help="REINFORCE against an environment"))
    p.add_argument("--env", help="simulation-environment checkpoint")
    p.add_argument("--data", help="sessions whose (user, pool) pairs seed the rollouts")
    p.add_argument("--world", help="synthetic world: environment and/or source of initial states")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=["sampled", "whitening", "none"])
    p.add_argument("--n-traj", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--carry", choices=["last", "chosen"])
    p.add_argument("--sample-clicks", action="store_true", help="Bernoulli clicks instead of expected clicks")
    p.add_argument("--expected-bounce", action="store_true", help="survival-weighted rewards, no sampled bounce")
    p.add_argument("--constant-pbr", type=float, help="replace the bounce probability by a constant")
    p.set_defaults(func=cmd_train_policy)

    p = common(sub.add_parser("evaluate", help="AC/AD/CTE and diversity metrics of all rankers"))
    p.add_argument("--policy", required=True)
    p.add_argument("--env")
    p.add_argument("--world")
    p.add_argument("--data", required=True)
    p.add_argument("--k-list", type=_int_list)
    p.add_argument("--wgcar-literal", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("oracle", help="exhaustive optimum vs greedy rankers"))
    p.add_argument("--world")
    p.add_argument("--env")
    p.add_argument("--data", help="sessions providing candidate pools when using --env")
    p.add_argument("--pool-size", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--wgcar-literal", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser("rank", help="rank each logged pool with a trained policy"))
    p.add_argument("--policy", required=True)
    p.add_argument("--env")
    p.add_argument("--world")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=["incremental", "naive"], default="incremental")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_rank)

    p = common(sub.add_parser("bench-serving", help="naive vs incremental decoding time"))
    p.add_argument("--n", type=int)
    p.add_argument("--k-list", type=_int_list)
    p.add_argument("--repeats", type=int)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bench_serving)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic for any module error
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cterank: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
