import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cterank import nn
from cterank.data import ItemFeatures, UserFeatures, make_session
from cterank.simenv import (EnvTrainConfig, SimEnvConfig, SimEnvModel, env_forward, env_loss,
                            env_rollout_estimate, session_arrays, train_env)
from cterank.world import generate_synthetic, make_preset

from gradcheck import store_grad_error

CFG = SimEnvConfig(n_user=2, n_item=3, d_model=4, fusion_hidden=(5, 4), d_ff=6, head_hidden=3, max_len=5)


def items(rng, n):
    return [ItemFeatures(f"i{k}", tuple(rng.normal(size=3).tolist()), k % 2) for k in range(n)]


def user(rng):
    return UserFeatures("u", tuple(rng.normal(size=2).tolist()))


def random_sessions(rng, n, max_depth=4):
    out = []
    for s in range(n):
        pool = items(rng, max_depth)
        depth = int(rng.integers(1, max_depth + 1))
        bounce = bool(rng.random() < 0.5)
        out.append(make_session(f"s{s}", user(rng), pool[:depth], rng.integers(0, 2, depth).tolist(),
                                bounce_at_end=bounce))
    return out


def test_zero_head_gives_one_half():
    rng = np.random.default_rng(0)
    m = SimEnvModel.init(CFG, seed=0)
    for name, t in m.params.group("head").items():
        t.data[...] = 0.0
    est = env_forward(m, user(rng), items(rng, 3))
    assert est.ctr == 0.5 and est.pbr == 0.5


def test_position_bias_is_modeled():
    rng = np.random.default_rng(1)
    m = SimEnvModel.init(CFG, seed=1)
    u, h = user(rng), items(rng, 4)
    a = env_forward(m, u, h)
    b = env_forward(m, u, [h[1], h[0], h[2], h[3]])
    assert (a.ctr, a.pbr) != (b.ctr, b.pbr)


def test_equal_positional_rows_make_prefix_order_irrelevant():
    rng = np.random.default_rng(2)
    m = SimEnvModel.init(CFG, seed=2)
    m.params["enc.P"].data[...] = m.params["enc.P"].data[0]
    u, h = user(rng), items(rng, 4)
    a = env_forward(m, u, h)
    b = env_forward(m, u, [h[2], h[0], h[1], h[3]])
    assert a.ctr == pytest.approx(b.ctr, abs=1e-12) and a.pbr == pytest.approx(b.pbr, abs=1e-12)


def test_deterministic_and_causal():
    rng = np.random.default_rng(3)
    m = SimEnvModel.init(CFG, seed=3)
    u, h = user(rng), items(rng, 5)
    assert env_forward(m, u, h[:3]) == env_forward(m, u, h[:3])
    full = m.logits(u.as_array()[None], np.array([[it.features for it in h]])).data[0]
    alt = [*h[:3], *items(np.random.default_rng(99), 2)]
    other = m.logits(u.as_array()[None], np.array([[it.features for it in alt]])).data[0]
    np.testing.assert_allclose(full[:3], other[:3], rtol=0, atol=1e-12)
    prefix = env_forward(m, u, h[:3])
    assert prefix.ctr == pytest.approx(1 / (1 + math.exp(-full[2, 0])), abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_estimates_inside_unit_interval(seed, t):
    rng = np.random.default_rng(seed)
    m = SimEnvModel.init(CFG, seed=seed)
    est = env_forward(m, user(rng), items(rng, t))
    assert 0 < est.ctr < 1 and 0 < est.pbr < 1


def test_capacity_and_rollout_edges():
    rng = np.random.default_rng(4)
    m = SimEnvModel.init(CFG, seed=4)
    u, h = user(rng), items(rng, 6)
    with pytest.raises(nn.CapacityError):
        env_forward(m, u, h)
    with pytest.raises(nn.CapacityError):
        env_forward(m, u, [])
    env_rollout_estimate(m, u, h[:4], h[4])             # length T-1 history accepts one more
    with pytest.raises(nn.CapacityError):
        env_rollout_estimate(m, u, h[:5], h[5])
    with pytest.raises(ValueError, match="already"):
        env_rollout_estimate(m, u, h[:2], h[1])


def test_loss_at_one_half_is_two_ln2_per_position():
    rng = np.random.default_rng(5)
    m = SimEnvModel.init(CFG, seed=5)
    for t in m.params.group("head").values():
        t.data[...] = 0.0
    sessions = random_sessions(rng, 6)
    positions = sum(s.depth for s in sessions)
    loss = float(env_loss(m, sessions).data)
    assert loss == pytest.approx(2 * math.log(2) * positions / len(sessions), abs=1e-12)


def test_loss_near_zero_for_confident_correct_predictions():
    rng = np.random.default_rng(6)
    m = SimEnvModel.init(CFG, seed=6)
    for t in m.params.group("head").values():
        t.data[...] = 0.0
    m.params["head.1.b"].data[...] = [-40.0, -40.0]
    sessions = [make_session("z", user(rng), items(rng, 3), [0, 0, 0], bounce_at_end=False)]
    assert float(env_loss(m, sessions).data) < 1e-15


def test_loss_is_finite_at_saturation():
    rng = np.random.default_rng(7)
    m = SimEnvModel.init(CFG, seed=7)
    for t in m.params.group("head").values():
        t.data[...] = 0.0
    m.params["head.1.b"].data[...] = [800.0, 800.0]        # p = 1 in float64
    sessions = [make_session("z", user(rng), items(rng, 2), [0, 0], bounce_at_end=False)]
    assert float(env_loss(m, sessions).data) == pytest.approx(2 * 800.0 * 2, rel=1e-12)


def test_loss_gradient_all_parameters():
    rng = np.random.default_rng(8)
    for trial in range(3):
        m = SimEnvModel.init(CFG, seed=trial)
        batch = session_arrays(random_sessions(rng, 3))
        assert store_grad_error(lambda: env_loss(m, batch), m.params) < 1e-4


def test_bounce_position_carries_click_label_and_later_positions_are_ignored():
    rng = np.random.default_rng(9)
    rec = make_session("b", user(rng), items(rng, 2), [0, 1], bounce_at_end=True)
    arr = session_arrays([rec, make_session("c", user(rng), items(rng, 4), [0] * 4, bounce_at_end=False)])
    assert arr.clicks[0].tolist() == [0, 1, 0, 0] and arr.bounces[0].tolist() == [0, 1, 0, 0]
    assert arr.valid[0].tolist() == [True, True, False, False]


def test_train_env_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        train_env([], CFG)


def test_train_env_same_seed_identical():
    rng = np.random.default_rng(10)
    sessions = random_sessions(rng, 20)
    cfg = EnvTrainConfig(max_epochs=3, batch_size=8, seed=4)
    a, ha = train_env(sessions, CFG, cfg)
    b, hb = train_env(sessions, CFG, cfg)
    assert ha == hb
    for name in a.params.names():
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_loss_decreases_monotonically_on_tiny_fixture():
    rng = np.random.default_rng(11)
    sessions = session_arrays(random_sessions(rng, 4))
    m = SimEnvModel.init(CFG, seed=11)
    prev = math.inf
    for _ in range(200):
        m.params.zero_grad()
        loss = env_loss(m, sessions)
        assert float(loss.data) <= prev + 1e-12
        prev = float(loss.data)
        loss.backward()
        nn.adagrad_step(m.params, m.params.grads(), 1e-3)
    assert prev < float(env_loss(SimEnvModel.init(CFG, seed=11), sessions).data)


def test_training_learns_a_world_and_checkpoint_round_trips(tmp_path):
    world = make_preset("demo4")
    sessions = generate_synthetic(world, 400, 4, 3, seed=0)
    m, hist = train_env(sessions, SimEnvConfig(n_user=world.user_features.shape[1],
                                               n_item=world.item_features.shape[1],
                                               d_model=8, fusion_hidden=(8,), d_ff=8, head_hidden=8, max_len=3),
                        EnvTrainConfig(max_epochs=15, batch_size=32))
    assert hist[-1]["val_loss"] < hist[0]["val_loss"]
    m.save(tmp_path / "env.json", run_config={"note": 1})
    back = SimEnvModel.load(tmp_path / "env.json")
    u, h = world.user(0), world.catalog()[:3]
    assert env_forward(back, u, h) == env_forward(m, u, h)
