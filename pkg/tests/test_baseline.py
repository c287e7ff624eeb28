from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfms.baseline import (
    CostMeter,
    RuleScores,
    TruncationConfig,
    TruncationTrace,
    match_optimal,
    match_truncated,
    top_n,
)
from tfms.domain import AdCrowdPair, AdId, CrowdId, TargetingType, UserId, ValuedPair
from tfms.errors import ContractViolation
from tfms.index import TargetingIndex
from tfms.nearline import fully_update
from tfms.scoring import ValueModel
from tfms.workload import generate
from worlds import Log, campaign

VALUES = ValueModel(seed=1)
RULES = RuleScores(seed=1)


def best_value(pairs):
    return max((vp.score for vp in pairs), default=0.0)


def assert_unbounded_equals_oracle(events, n):
    index = TargetingIndex.replay(events)
    config = TruncationConfig.unbounded(n=n)
    for user in index.users():
        a = match_truncated(user, index, config, CostMeter(), values=VALUES, rules=RULES)
        b = match_optimal(user, index, n, CostMeter(), values=VALUES)
        assert a == b, user


def test_unbounded_truncation_equals_oracle(small_workload):
    events, _ = small_workload
    assert_unbounded_equals_oracle(events, 20)


@pytest.mark.slow
def test_unbounded_truncation_equals_oracle_on_10k_users(small_spec):
    events, _ = generate(replace(small_spec, seed=10, users=10_000, horizon_days=1))
    assert_unbounded_equals_oracle(events, 50)


def adversarial(m):
    """One user in m + 1 keywords crowds; the best pair sits in the crowd
    the rule score ranks last."""
    user = UserId(1)
    crowds = [CrowdId(c) for c in range(3, 3 * (m + 2), 3)][: m + 1]
    ranked = sorted(crowds, key=lambda c: (-RULES.crowd_score(user, c), c))
    log = Log()
    types = {c: TargetingType.KEYWORDS for c in crowds}
    for i, crowd in enumerate(crowds):
        bid = 1000.0 if crowd == ranked[-1] else 1.0
        log.upsert(campaign(i + 1, {crowd: bid}, types=types))
    log.types = types
    log.join(1, *crowds)
    return user, ranked[-1], TargetingIndex.replay(log.events)


def test_truncation_hides_best_pair():
    m = 4
    user, hidden, index = adversarial(m)
    config = TruncationConfig(m=m, k=10, n=3)
    truncated = match_truncated(user, index, config, CostMeter(), values=VALUES, rules=RULES)
    optimal = match_optimal(user, index, 3, CostMeter(), values=VALUES)
    assert optimal[0].crowd == hidden
    assert all(vp.crowd != hidden for vp in truncated)
    assert best_value(truncated) < best_value(optimal)

    # the near-line cache recovers the optimum
    cache = fully_update(index, [user], 3, values=VALUES)
    assert best_value(cache.pairs_of(user)) == best_value(optimal)


def test_per_channel_crowd_limit_and_trace():
    log = Log()
    log.upsert(campaign(1, {c: 1.0 for c in range(1, 10)}))
    log.join(1, *range(1, 10))
    index = TargetingIndex.replay(log.events)
    meter, trace = CostMeter(), TruncationTrace()
    out = match_truncated(
        UserId(1), index, TruncationConfig(m=2, k=10, n=50), meter, values=VALUES, rules=RULES, trace=trace
    )
    # three crowds per channel, two kept in each
    assert meter.as_dict() == {"user_crowd_pairs": 6, "pairs_scored": 6}
    assert len(out) == 6
    for t in TargetingType:
        assert trace.crowds_total[t] == 3
        assert trace.crowds_kept[t] == 2
        assert trace.user_crowd_pct(t) == pytest.approx(100 / 3)
    assert trace.crowd_ad_pct() == 0.0


def test_ads_per_crowd_limit_uses_ad_score():
    log = Log()
    for cid in range(1, 8):
        log.upsert(campaign(cid, {3: 1.0}))
    log.join(1, 3)
    index = TargetingIndex.replay(log.events)
    trace = TruncationTrace()
    out = match_truncated(
        UserId(1), index, TruncationConfig(m=5, k=2, n=50), CostMeter(), values=VALUES, rules=RULES, trace=trace
    )
    expected = sorted((AdId(cid + 1000) for cid in range(1, 8)), key=lambda a: (-RULES.ad_score(a), a))[:2]
    assert {vp.ad for vp in out} == set(expected)
    assert trace.crowd_ad_pct() == pytest.approx(100 * 5 / 7)


def test_oracle_meter_counts_full_candidate_set():
    log = Log()
    log.upsert(campaign(1, {1: 1.0, 2: 1.0}))
    log.upsert(campaign(2, {2: 2.0}))
    log.join(1, 1, 2)
    index = TargetingIndex.replay(log.events)
    meter = CostMeter()
    out = match_optimal(UserId(1), index, 2, meter, values=VALUES)
    assert meter.as_dict() == {"user_crowd_pairs": 2, "pairs_scored": 3}
    assert len(out) == 2


def test_top_n_order_and_ties():
    pairs = [
        ValuedPair(AdCrowdPair(AdId(3), CrowdId(1)), 2.0),
        ValuedPair(AdCrowdPair(AdId(1), CrowdId(2)), 2.0),
        ValuedPair(AdCrowdPair(AdId(9), CrowdId(9)), 5.0),
    ]
    assert [vp.ad for vp in top_n(pairs, 2)] == [9, 1]
    assert top_n(pairs, 10) == [pairs[2], pairs[1], pairs[0]]


def test_truncation_config_checks():
    assert TruncationConfig.unbounded(5) == TruncationConfig(m=None, k=None, n=5)
    for bad in ({"m": 0}, {"k": -1}, {"n": 0}):
        with pytest.raises(ContractViolation, match="bad_truncation"):
            TruncationConfig(**bad)


def test_cost_meter_merge():
    a, b = CostMeter(), CostMeter()
    a.add(crowds=2, pairs=5)
    b.add(pairs=3)
    a.merge(b)
    assert a.as_dict() == {"user_crowd_pairs": 2, "pairs_scored": 8}


campaign_bids = st.dictionaries(st.integers(1, 6), st.floats(0.01, 100.0), min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(st.lists(campaign_bids, min_size=1, max_size=8), st.integers(-6, 10))
def test_scaling_every_bid_keeps_the_ranking(bids, exponent):
    # powers of two scale every value exactly, so ties stay ties
    def world(factor):
        log = Log()
        for cid, crowds in enumerate(bids, start=1):
            log.upsert(campaign(cid, {c: b * factor for c, b in crowds.items()}))
        log.join(1, *range(1, 7))
        return TargetingIndex.replay(log.events)

    user, scale = UserId(1), 2.0**exponent
    base, scaled = world(1.0), world(scale)
    optimal = match_optimal(user, base, 5, CostMeter(), values=VALUES)
    assert [vp.pair for vp in match_optimal(user, scaled, 5, CostMeter(), values=VALUES)] == [
        vp.pair for vp in optimal
    ]
    tight = TruncationConfig(m=1, k=2, n=5)
    assert [
        vp.pair for vp in match_truncated(user, scaled, tight, CostMeter(), values=VALUES, rules=RULES)
    ] == [vp.pair for vp in match_truncated(user, base, tight, CostMeter(), values=VALUES, rules=RULES)]
