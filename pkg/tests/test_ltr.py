import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cterank.ltr import (BounceConfig, LtrParseError, bounce_labels, build_yahoo_sessions, click_label,
                         decay_rate, exposure_sequence, mmr, parse_ltr, session_from_group)

FIXTURE = Path(__file__).parent / "fixtures" / "ltr_golden.txt"


def by_rating(path, dim=2):
    """Scores each document by rating/4, a perfect scorer for the fixture."""
    ratings = {tuple(ex.features): ex.rating for ex in parse_ltr(path, dim)}
    return lambda feats: np.array([ratings[tuple(f)] / 4.0 for f in feats])


# -- parsing ---------------------------------------------------------------------


def test_parse_single_line(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("2 qid:1 1:0.5\n")
    (ex,) = parse_ltr(p, dim=3)
    assert ex.rating == 2 and ex.query_id == "1"
    np.testing.assert_array_equal(ex.features, [0.5, 0, 0])


def test_parse_empty(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    assert parse_ltr(p) == []


@pytest.mark.parametrize("line,msg", [("2 qid:1 4:1.0", "outside 1..3"), ("x qid:1 1:1", "not an integer"),
                                      ("5 qid:1 1:1", "outside 0..4"), ("2.5 qid:1", "not an integer")])
def test_parse_errors_carry_line_number(tmp_path, line, msg):
    p = tmp_path / "bad.txt"
    p.write_text("1 qid:1 1:0\n" + line + "\n")
    with pytest.raises(LtrParseError, match=rf":2: .*{msg}"):
        parse_ltr(p, dim=3)


@pytest.mark.parametrize("rating,label", [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1)])
def test_click_label(rating, label):
    assert click_label(rating) == label


# -- exposure / mmr / decay / bounce ---------------------------------------------


def test_exposure_examples():
    assert exposure_sequence([0.9, 0.1, 0.5]) == [0, 2, 1]
    assert exposure_sequence([0.3, 0.3, 0.3]) == [0, 1, 2]
    assert exposure_sequence([]) == []


def test_exposure_with_perfect_scorer_sorts_by_rating():
    ratings = [1, 4, 0, 3, 3, 2]
    order = exposure_sequence(ratings)
    assert [ratings[i] for i in order] == [4, 3, 3, 2, 1, 0]
    assert order.index(3) < order.index(4)


def test_mmr_examples():
    a = np.array([1.0, 2.0])
    assert mmr(a, 1.0, [a.copy()], 0.1) == pytest.approx(0.1, abs=1e-15)
    assert mmr(a, 0.7, [np.array([5.0, -3.0])], 1.0) == 0.7
    assert mmr(np.zeros(2), 0.5, [np.array([2.0, 0.0]), np.array([0.0, 3.0])], 0.1) == pytest.approx(1.85, abs=1e-15)


def test_mmr_first_position_requires_distance():
    with pytest.raises(ValueError):
        mmr(np.zeros(2), 0.5, [], 0.1)
    assert mmr(np.zeros(2), 0.5, [], 0.1, first_distance=2.0) == pytest.approx(1.85, abs=1e-15)


@given(st.floats(0.01, 0.99), st.floats(0, 1), st.floats(0, 1), st.floats(0, 10), st.floats(0, 10))
def test_mmr_monotone(lam, r1, r2, d1, d2):
    lo_r, hi_r = sorted((r1, r2))
    lo_d, hi_d = sorted((d1, d2))
    assert mmr(np.zeros(1), lo_r, [], lam, lo_d) <= mmr(np.zeros(1), hi_r, [], lam, hi_d) + 1e-12


def test_decay_examples():
    assert decay_rate([1.0], 1) == 1.0
    assert decay_rate([1.0, 0.0], 2) == 0.5
    with pytest.raises(ValueError):
        decay_rate([1.0], 0)


@given(st.floats(-5, 5, allow_nan=False), st.integers(1, 20))
def test_decay_of_constant_is_constant(c, n):
    assert all(decay_rate([c] * n, j) == pytest.approx(c, abs=1e-12) for j in range(1, n + 1))


def test_bounce_labels_first_crossing():
    assert bounce_labels([0.9, 0.7, 0.9], 0.8) == ([0, 1], 2)
    assert bounce_labels([0.9, 0.85, 1.0], 0.8) == ([0, 0, 0], None)
    assert bounce_labels([0.8], 0.8) == ([0], None)         # strictly below the threshold
    assert BounceConfig().lam == 0.1 and BounceConfig().threshold == 0.8


@given(st.lists(st.floats(0, 2), min_size=1, max_size=12), st.floats(0.05, 2))
def test_bounce_labels_truncate_after_first_one(decay, thr):
    labels, pos = bounce_labels(decay, thr)
    assert sum(labels) <= 1
    if pos is None:
        assert len(labels) == len(decay)
    else:
        assert labels[-1] == 1 and len(labels) == pos and decay[pos - 1] < thr


# -- golden sessions ---------------------------------------------------------------
# Hand computation, lambda = 0.1, threshold 0.8, rating_j = score = rating/4.
#
# q1  file docs d0(0,.5) r0, d1(0,0) r4, d2(3,4) r3 -> exposure d1, d2, d0
#     max pairwise distance = |d1-d2| = 5
#     MMR = .1*1 + .9*5 = 4.6 ; .1*.75 + .9*5 = 4.575 ; 0 + .9*min(.5, sqrt(21.25)) = .45
#     decay 4.6, 4.5875, 3.2083.. -> no bounce, depth 3, clicks 1,1,0
# q2  d0(0,0) r4, d1(0,0) r4, d2(1,0) r2 -> exposure d0, d1, d2 ; first distance 1
#     MMR = .1 + .9 = 1.0 ; .1 + 0 = .1 ; decay 1.0, .55 -> bounce at 2
# q3  d0(2,0), d1(0,2), d2(-2,0) all r4 -> exposure d0, d1, d2 ; first distance 4
#     MMR = .1 + 3.6 = 3.7 ; .1 + .9*sqrt(8) ; .1 + .9*min(4, sqrt(8))
#     -> no bounce, depth 3

GOLDEN = {
    "1": {"order": [1, 2, 0], "mmr": [4.6, 4.575, 0.45], "bounce": None, "clicks": [1, 1, 0]},
    "2": {"order": [0, 1, 2], "mmr": [1.0, 0.1], "bounce": 2, "clicks": [1, 1]},
    "3": {"order": [0, 1, 2], "mmr": [3.7, 0.1 + 0.9 * math.sqrt(8), 0.1 + 0.9 * math.sqrt(8)],
          "bounce": None, "clicks": [1, 1, 1]},
}


def _walk(group, scores, cfg):
    from cterank.ltr import max_pairwise_distance
    feats = np.stack([ex.features for ex in group])
    order = exposure_sequence(scores)
    first = max_pairwise_distance(feats)
    mmrs, decays = [], []
    for j, idx in enumerate(order, start=1):
        mmrs.append(mmr(feats[idx], scores[idx], feats[order[:j - 1]], cfg.lam, first))
        decays.append(decay_rate(mmrs, j))
    return order, mmrs, decays


def test_golden_mmr_decay_and_bounce_positions():
    from cterank.ltr import group_by_query
    scorer = by_rating(FIXTURE)
    cfg = BounceConfig()
    for qid, group in group_by_query(parse_ltr(FIXTURE, dim=2)):
        g = GOLDEN[qid]
        order, mmrs, decays = _walk(group, scorer(np.stack([e.features for e in group])), cfg)
        assert order == g["order"]
        n = len(g["mmr"])
        np.testing.assert_allclose(mmrs[:n], g["mmr"], rtol=0, atol=1e-12)
        expected_decay = [sum(g["mmr"][:j]) / j for j in range(1, n + 1)]
        np.testing.assert_allclose(decays[:n], expected_decay, rtol=0, atol=1e-12)
        labels, pos = bounce_labels(decays, cfg.threshold)
        assert pos == g["bounce"]


def test_golden_session_records():
    sessions = build_yahoo_sessions(FIXTURE, BounceConfig(), dim=2, scorer=by_rating(FIXTURE))
    assert [s.session_id for s in sessions] == ["q1", "q2", "q3"]
    for s in sessions:
        g = GOLDEN[s.session_id[1:]]
        assert [imp.item.item_id for imp in s.impressions] == [f"{s.session_id}-d{i}" for i in g["order"][:s.depth]]
        assert [imp.click for imp in s.impressions] == g["clicks"]
        assert len(s.pool()) == 3
        if g["bounce"] is None:
            assert s.censored and s.depth == 3 and not any(i.bounce for i in s.impressions)
        else:
            assert not s.censored and s.depth == g["bounce"] and s.impressions[-1].bounce == 1


def test_default_cross_fitted_scorer_runs_on_fixture():
    sessions = build_yahoo_sessions(FIXTURE, dim=2)
    assert len(sessions) == 3
    for s in sessions:
        s.validate()


def test_all_top_rated_separated_query_never_bounces():
    from cterank.ltr import LtrExample
    group = [LtrExample("9", 4, np.array([5.0 * i, 0.0])) for i in range(5)]
    rec = session_from_group("9", group, np.ones(5), BounceConfig())
    assert rec.censored and rec.depth == 5
