"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are printed as each criterion finishes (visible with ``-s``) and
repeated in the pytest terminal summary.
"""
import math
import time

import numpy as np

from cterank import nn
from cterank.bench import BenchConfig, equivalence_check, run_benchmark
from cterank.data import ItemFeatures, UserFeatures
from cterank.ltr import BounceConfig, bounce_labels, build_yahoo_sessions, group_by_query, parse_ltr
from cterank.metrics import RankedSession, average_clicks, average_depth, category_coverage, kl_at_k
from cterank.oracle import CteProfile, cte, list_cte, mc_cte, optimal_ranking
from cterank.policy import (PolicyConfig, PolicyModel, decode_incremental, greedy_ctr_rank,
                            weighted_greedy_rank)
from cterank.simenv import EnvTrainConfig, SimEnvConfig, SimEnvModel, env_loss, session_arrays, train_env
from cterank.trainer import TrainConfig, apply_baseline, policy_gradient, rollout_batch, train_policy
from cterank.world import bayes_env_loss, generate_synthetic, make_preset, sample_initial_states

from gradcheck import max_grad_error, store_grad_error
from pipeline import REPORTS, run_pipeline
from test_ltr import FIXTURE, GOLDEN, _walk, by_rating

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def T(x):
    return nn.Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------------------------
# 1. gradient correctness


def _layer_cases(rng):
    def gru(x, h, *w):
        return nn.gru_cell(x, h, dict(zip(("W_i", "W_h", "b_i", "b_h"), w)))

    mask = np.array([[False, True, False, False], [False, False, False, True]])
    idx = np.array([2, 0])
    store = nn.ParamStore()
    nn.init_transformer(store, "enc", 4, 5, 3, rng)
    tp = store.group("enc")
    for k in ("ln1_g", "ln2_g", "ln1_b", "ln2_b", "b_1", "b_2"):
        tp[k].data[...] += rng.normal(scale=0.3, size=tp[k].shape)
    names = sorted(tp)

    def block(X, *w):
        p = dict(zip(names, w))
        return nn.transformer_block(X, p["P"], p)

    return {
        "linear": (nn.linear, [T(rng.normal(size=(5, 3))), T(rng.normal(size=(3, 4))), T(rng.normal(size=4))]),
        "fm_cross": (nn.fm_cross, [T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 4)))]),
        "mlp": (lambda x, w1, b1, w2, b2: nn.mlp(x, [(w1, b1), (w2, b2)]),
                [T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 5))), T(rng.normal(size=5)),
                 T(rng.normal(size=(5, 2))), T(rng.normal(size=2))]),
        "gru_cell": (gru, [T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 4))),
                           *[T(rng.normal(scale=0.5, size=s)) for s in ((3, 12), (4, 12), (12,), (12,))]]),
        "layer_norm": (nn.layer_norm, [T(rng.normal(size=(3, 4))), T(rng.normal(size=4)), T(rng.normal(size=4))]),
        "transformer_block": (block, [T(rng.normal(size=(3, 4))), *[tp[n] for n in names]]),
        "masked_softmax": (lambda z: nn.masked_softmax(z, mask), [T(rng.normal(size=(2, 4)))]),
        "masked_log_prob": (lambda z: nn.masked_log_prob(z, mask, idx), [T(rng.normal(size=(2, 4)))]),
    }


def _se_instance(rng, seed):
    cfg = SimEnvConfig(n_user=2, n_item=3, d_model=4, fusion_hidden=(4,), d_ff=5, head_hidden=3, max_len=3)
    m = SimEnvModel.init(cfg, seed=seed)
    from cterank.data import make_session
    sessions = []
    for s in range(3):
        depth = int(rng.integers(1, 4))
        items = [ItemFeatures(f"i{k}", tuple(rng.normal(size=3).tolist()), 0) for k in range(depth)]
        sessions.append(make_session(f"s{s}", UserFeatures("u", tuple(rng.normal(size=2).tolist())), items,
                                     rng.integers(0, 2, depth).tolist(), bounce_at_end=bool(rng.random() < .5)))
    arr = session_arrays(sessions)
    return store_grad_error(lambda: env_loss(m, arr), m.params)


def _policy_instance(rng, seed):
    m = PolicyModel.init(PolicyConfig(2, 3, d_model=3, fusion_hidden=(4,),
                                      carry="chosen" if seed % 2 else "last"), seed=seed)
    n, B, k = 4, 2, 3
    users, feats = rng.normal(size=(B, 2)), rng.normal(size=(B, n, 3))
    actions = np.array([rng.permutation(n)[:k] for _ in range(B)])
    coef = rng.normal(size=(B, k))

    def loss():
        XP = m.input_projection(m.fuse(users, feats))
        h = T(np.zeros((B, 3)))
        mask = np.zeros((B, n), dtype=bool)
        total = None
        for t in range(k):
            H, logits = m.sweep(XP, h)
            term = nn.sum(nn.mul(nn.masked_log_prob(logits, mask, actions[:, t]), coef[:, t]))
            total = term if total is None else total + term
            mask[np.arange(B), actions[:, t]] = True
            h = m.carry(H, actions[:, t])
        return total

    return store_grad_error(loss, m.params)


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst: dict[str, float] = {}
    for i in range(20):
        for name, (fn, inputs) in _layer_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), max_grad_error(fn, inputs, seed=i))
        worst["se_loss"] = max(worst.get("se_loss", 0.0), _se_instance(rng, i))
        worst["policy_log_prob"] = max(worst.get("policy_log_prob", 0.0), _policy_instance(rng, i))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    report(1, all(v < 1e-4 for v in worst.values()) and elapsed < 60,
           f"{len(worst)} checks x 20 instances, worst rel. error {worst[top]:.1e} ({top}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------------------------
# 2. CTE identity


class TableEnv:
    def __init__(self, ctr, pbr):
        self.ctr, self.pbr = np.asarray(ctr, float), np.asarray(pbr, float)

    def estimate(self, user, feats, cats, prefixes):
        last = np.asarray(prefixes)[:, -1]
        return self.ctr[last], self.pbr[last]


def test_criterion_02_cte_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    user = UserFeatures("u", (1.0,))
    inside = 0
    for p in range(50):
        n = int(rng.integers(1, 9))
        ctr, pbr = rng.random(n), rng.random(n)
        pool = [ItemFeatures(f"i{k}", (0.0,), 0) for k in range(n)]
        exact = cte(CteProfile(tuple(ctr), tuple(pbr)))
        mean, se = mc_cte(list(range(n)), TableEnv(ctr, pbr), user, pool, 100_000, seed=p)
        inside += abs(mean - exact) <= 3 * se
    elapsed = time.perf_counter() - start
    report(2, inside >= 48 and elapsed < 120, f"{inside}/50 profiles within 3 SE, {elapsed:.1f}s")


# ---------------------------------------------------------------------------------------------
# 3. oracle gap


def test_criterion_03_oracle_gap():
    start = time.perf_counter()
    world = make_preset("adversarial")
    u, pool = world.user(0), world.catalog()
    gaps = {}
    for depth in (3, 5):
        _, best = optimal_ranking(world, u, pool, depth)
        greedy = list_cte(world, u, pool, greedy_ctr_rank(world, u, pool, depth))
        gaps[depth] = (best - greedy) / greedy
    elapsed = time.perf_counter() - start
    report(3, min(gaps.values()) >= 0.05 and elapsed < 10,
           "optimal over greedy-CTR " + ", ".join(f"T={d}: +{g:.1%}" for d, g in gaps.items())
           + f", {elapsed:.2f}s")


# ---------------------------------------------------------------------------------------------
# 4. SE fidelity


def test_criterion_04_se_fidelity():
    start = time.perf_counter()
    world = make_preset("default")
    train = generate_synthetic(world, 50_000, 10, 10, seed=11)
    test = generate_synthetic(world, 5_000, 10, 10, seed=12)
    cfg = SimEnvConfig(n_user=world.user_features.shape[1], n_item=world.item_features.shape[1], max_len=10)
    model, _ = train_env(train, cfg, EnvTrainConfig(lr=1e-2, batch_size=128, max_epochs=50, patience=5))
    with nn.no_grad():
        loss = float(env_loss(model, test).data)
    bayes = bayes_env_loss(world, test)
    rel = (loss - bayes) / bayes
    elapsed = time.perf_counter() - start
    report(4, rel <= 0.05 and elapsed < 600,
           f"held-out loss {loss:.4f} vs Bayes {bayes:.4f} (+{rel:.2%}), {elapsed:.0f}s")


# ---------------------------------------------------------------------------------------------
# 5-7. policy training on the six-item world

DESK = make_preset("desk6")
DESK_STATES = [(DESK.user(i), tuple(DESK.catalog())) for i in range(DESK.n_users)]
DESK_OPT = float(np.mean([optimal_ranking(DESK, u, p, 3)[1] for u, p in DESK_STATES]))


def desk_policy(seed):
    return PolicyModel.init(PolicyConfig(DESK.user_features.shape[1], DESK.item_features.shape[1], 16, (16,)),
                            seed=seed)


def desk_sampler(rng, n):
    return sample_initial_states(DESK, n, 6, rng)


def population_cte(env_truth, ranker):
    return float(np.mean([list_cte(env_truth, u, p, ranker(u, p)) for u, p in DESK_STATES]))


def test_criterion_05_policy_optimality():
    start = time.perf_counter()
    steps = []
    for seed in range(5):
        m = desk_policy(seed)
        hist = train_policy(m, DESK, desk_sampler,
                            TrainConfig(k=3, n_traj=8, lr=1e-2, baseline="sampled", batch_size=4,
                                        max_iters=20_000, eval_every=25, patience=10**9, seed=seed),
                            eval_states=DESK_STATES, target_cte=0.98 * DESK_OPT)
        reached = hist[-1]["eval_cte"] >= 0.98 * DESK_OPT
        steps.append(hist[-1]["iteration"] if reached else None)
    elapsed = time.perf_counter() - start
    ok = sum(s is not None for s in steps) >= 4 and elapsed < 900
    report(5, ok, f"steps to 98% of optimal {DESK_OPT:.4f} per seed: {steps}, {elapsed:.0f}s")


def test_criterion_06_method_ordering():
    """Full pipeline per seed: logs -> learned environment -> REINFORCE; scored on the true world."""
    start = time.perf_counter()
    greedy = population_cte(DESK, lambda u, p: greedy_ctr_rank(DESK, u, p, 3))
    alphas = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    wgcar = max(population_cte(DESK, lambda u, p, a=a: weighted_greedy_rank(DESK, u, p, 3, a)) for a in alphas)
    rl = []
    for seed in range(5):
        logs = generate_synthetic(DESK, 20_000, 6, 6, seed=100 + seed)
        env, _ = train_env(logs, SimEnvConfig(3, 6, d_model=16, fusion_hidden=(16,), d_ff=32, head_hidden=16,
                                              max_len=6),
                           EnvTrainConfig(lr=1e-2, batch_size=128, max_epochs=30, seed=seed))
        m = desk_policy(seed)
        train_policy(m, env, desk_sampler,
                     TrainConfig(k=3, n_traj=8, lr=1e-2, max_iters=600, eval_every=50, patience=6, seed=seed),
                     eval_states=DESK_STATES)
        rl.append(population_cte(DESK, lambda u, p: decode_incremental(m, u, p, 3).items))
    med = float(np.median(rl))
    gap_rl, gap_wg = (med - wgcar) / wgcar, (wgcar - greedy) / greedy
    elapsed = time.perf_counter() - start
    report(6, gap_rl >= 0.01 and gap_wg >= 0.01,
           f"median RL {med:.4f} > best WGCAR {wgcar:.4f} (+{gap_rl:.1%}) > greedy-CTR {greedy:.4f} "
           f"(+{gap_wg:.1%}); optimum {DESK_OPT:.4f}, {elapsed:.0f}s")


def test_criterion_07_baseline_variance():
    start = time.perf_counter()
    m = desk_policy(0)
    train_policy(m, DESK, desk_sampler, TrainConfig(k=3, n_traj=8, lr=1e-2, max_iters=30, eval_every=30, seed=0))
    rng = np.random.default_rng(77)
    grads = {"sampled": [], "none": []}
    for _ in range(1000):
        buf = rollout_batch(m, DESK, desk_sampler(rng, 1), 8, 3, rng)
        for mode in grads:
            apply_baseline(buf, mode, 1.0)
            g = policy_gradient(m, buf)
            grads[mode].append(np.concatenate([g[n].ravel() for n in sorted(g)]))
    var = {mode: float(np.var(np.stack(v), axis=0, ddof=1).sum()) for mode, v in grads.items()}
    elapsed = time.perf_counter() - start
    report(7, var["sampled"] < var["none"],
           f"total gradient variance sampled {var['sampled']:.3e} vs none {var['none']:.3e} "
           f"({var['none'] / var['sampled']:.1f}x), {elapsed:.0f}s")


# ---------------------------------------------------------------------------------------------
# 8. serving


def test_criterion_08_serving_equivalence_and_scaling():
    start = time.perf_counter()
    same = equivalence_check(1000, seed=5)
    bench = run_benchmark(BenchConfig(n=200, k_list=(4, 16), repeats=3, seed=0))
    ratio = {r["k"]: r["ratio"] for r in bench["rows"]}
    identical = all(r["identical"] for r in bench["rows"])
    elapsed = time.perf_counter() - start
    report(8, same == 1000 and identical and ratio[16] > ratio[4],
           f"{same}/1000 identical sequences; naive/incremental ratio k=4 {ratio[4]:.2f}, "
           f"k=16 {ratio[16]:.2f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------------------------
# 9. dataset pipeline goldens


def test_criterion_09_dataset_goldens():
    cfg = BounceConfig()
    scorer = by_rating(FIXTURE)
    worst, positions_ok = 0.0, True
    for qid, group in group_by_query(parse_ltr(FIXTURE, dim=2)):
        g = GOLDEN[qid]
        order, mmrs, decays = _walk(group, scorer(np.stack([e.features for e in group])), cfg)
        n = len(g["mmr"])
        decay_golden = [sum(g["mmr"][:j]) / j for j in range(1, n + 1)]
        worst = max(worst, np.max(np.abs(np.array(mmrs[:n]) - g["mmr"])),
                    np.max(np.abs(np.array(decays[:n]) - decay_golden)))
        positions_ok &= order == g["order"] and bounce_labels(decays, cfg.threshold)[1] == g["bounce"]
    sessions = build_yahoo_sessions(FIXTURE, cfg, dim=2, scorer=scorer)
    depths = [s.depth for s in sessions]
    ok = worst <= 1e-12 and positions_ok and depths == [3, 2, 3] and (cfg.lam, cfg.threshold) == (0.1, 0.8)
    report(9, ok, f"3 queries, max |MMR/decay - golden| {worst:.1e}, bounce positions and depths {depths}")


# ---------------------------------------------------------------------------------------------
# 10. metrics goldens


def test_criterion_10_metric_goldens():
    from cterank.data import make_session
    user = UserFeatures("u", (1.0,))

    def items(prefix, cats):
        return [ItemFeatures(f"{prefix}{k}", (0.0,), c) for k, c in enumerate(cats)]

    # session A: 4 impressions, clicks 1,0,1,1, bounce at 4; session B: censored at 6, one click
    sim = [make_session("A", user, items("a", [0] * 4), [1, 0, 1, 1], bounce_at_end=True),
           make_session("B", user, items("b", [0] * 6), [0, 0, 1, 0, 0, 0], bounce_at_end=False)]
    # rankings over 4 categories
    ra = RankedSession("A", items("x", [0, 0, 1, 1, 2, 0, 0, 0, 0, 0]), items("h", [0, 1]))
    rb = RankedSession("B", items("y", [3, 3, 3, 3, 3, 2, 2, 1, 0, 3]), items("g", [3]))
    golden = {
        "ac": 2.0, "ad": 5.0,
        "cc5": (3 / 4 + 1 / 4) / 2, "cc10": (3 / 4 + 4 / 4) / 2,
        # A@5: p=(.5,.5,0), q=(.4,.4,.2) -> q~=(.401,.401): 2 * .5 log(.5/.401)
        # B@5: p={3:1}, q={3:1} -> 0
        "kl5": (math.log(0.5 / 0.401)) / 2,
        # A@10: q=(.7,.2,.1) -> q~0=.698, q~1=.203 ; B@10: q3=.6 -> q~3=.604
        "kl10": ((0.5 * math.log(0.5 / 0.698) + 0.5 * math.log(0.5 / 0.203)) + math.log(1 / 0.604)) / 2,
    }
    got = {"ac": average_clicks(sim), "ad": average_depth(sim),
           "cc5": category_coverage([ra, rb], 5, 4), "cc10": category_coverage([ra, rb], 10, 4),
           "kl5": kl_at_k([ra, rb], 5)[0], "kl10": kl_at_k([ra, rb], 10)[0]}
    worst = max(abs(got[k] - golden[k]) for k in golden)
    same = RankedSession("S", items("z", [0, 1, 0, 1, 2]), items("w", [2, 1, 0, 1, 0]))
    kl_same = kl_at_k([same], 5)[0]
    ok = worst <= 1e-9 and kl_same == 0.0 and got["kl5"] >= 0 and got["kl10"] >= 0
    report(10, ok, f"AC, AD, CC@5/10, KL@5/10 max deviation {worst:.1e}; KL on p=q fixture {kl_same}")


# ---------------------------------------------------------------------------------------------
# 11. determinism


def test_criterion_11_pipeline_determinism(tmp_path):
    start = time.perf_counter()
    a = run_pipeline(tmp_path / "run1", seed=3)
    b = run_pipeline(tmp_path / "run2", seed=3)
    extra = ["s.jsonl", "env.json", "pol.json", "env.report.loss.png", "pol.report.curve.png", "eval.methods.png",
             "oracle.cte.png"]
    pairs = list(zip(a, b)) + [(tmp_path / "run1" / n, tmp_path / "run2" / n) for n in extra]
    differing = [x.name for x, y in pairs if x.read_bytes() != y.read_bytes()]
    elapsed = time.perf_counter() - start
    report(11, not differing,
           f"{len(pairs)} artifacts compared across two runs, differing: {differing or 'none'}, {elapsed:.0f}s")
