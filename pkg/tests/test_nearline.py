import random
from dataclasses import replace

import pytest

from tfms.baseline import CostMeter, match_optimal
from tfms.domain import AdCrowdPair, AdId, CrowdId, UserId, ValuedPair
from tfms.errors import ContractViolation, SnapshotIntegrityError
from tfms.events import BidChanged, CampaignUpserted, MutationEvent, UserCrowdsChanged, Visit
from tfms.index import TargetingIndex
from tfms.nearline import (
    DeltaWindow,
    FlushStats,
    TopNCache,
    flush,
    fully_update,
    ingest,
    select_active_users,
)
from tfms.scoring import ValueModel
from tfms.workload import generate
from worlds import Log, campaign, tiny_log

VALUES = ValueModel(seed=2)


def initial_index(events):
    return TargetingIndex.replay(e for e in events if e.at < 0)


def scored(pairs):
    return [(vp.pair, vp.score) for vp in pairs]


def assert_matches_oracle(cache, index, users, n):
    for user in users:
        if user in cache:
            expected = match_optimal(user, index, n, CostMeter(), values=VALUES)
            assert scored(cache.pairs_of(user)) == scored(expected), user


def test_fully_update_equals_oracle_and_ignores_parallelism(small_workload):
    events, _ = small_workload
    index = initial_index(events)
    users = index.users()
    meter1, meter8 = CostMeter(), CostMeter()
    one = fully_update(index, users, 10, 1, values=VALUES, at=0, meter=meter1)
    eight = fully_update(index, users, 10, 8, values=VALUES, at=0, meter=meter8)
    assert one == eight
    assert meter1.as_dict() == meter8.as_dict()
    assert len(one) == len(users)
    for user in users:
        assert one.pairs_of(user) == tuple(match_optimal(user, index, 10, CostMeter(), values=VALUES))
        assert one.get(user).last_full_refresh == 0


def test_fully_update_rejects_concurrent_mutation():
    index = TargetingIndex.replay(tiny_log().events)
    extra = Log(at=1)
    event = extra.join(3, 1)

    class Mutating(ValueModel):
        fired = False

        def value_measure(self, user, pair, bid):
            if not self.fired:
                self.fired = True
                index.apply(event)
            return super().value_measure(user, pair, bid)

    with pytest.raises(ContractViolation, match="index_mutated_during_fully_update"):
        fully_update(index, index.users(), 5, values=Mutating())


def test_select_active_users_half_open_window():
    traffic = [Visit(0, 10, UserId(1)), Visit(1, 50, UserId(2)), Visit(2, 100, UserId(3))]
    assert select_active_users(traffic, 90, 100) == {1, 2}
    assert select_active_users(traffic, 50, 100) == {2}
    assert select_active_users(traffic, 0, 100) == frozenset()


def replay_with_full_cache(events, check_every=50):
    # n at least max |O(u)|: every flush leaves the cache equal to the oracle
    index = initial_index(events)
    n = 10_000
    cache = fully_update(index, index.users(), n, values=VALUES, at=0)
    window = DeltaWindow(window_length=0)
    mutations = [e for e in sorted(events, key=lambda e: e.order) if e.at >= 0]
    for i, event in enumerate(mutations):
        index.apply(event)
        ingest(event, window, index)
        touched = window.work_list()
        flush(window, cache, index, n, values=VALUES, at=event.at)
        assert_matches_oracle(cache, index, touched, n)
        if i % check_every == 0:
            assert_matches_oracle(cache, index, cache.users(), n)
    assert_matches_oracle(cache, index, cache.users(), n)
    return len(mutations)


def test_delta_exact_when_cache_holds_all_of_o_u(small_workload):
    events, _ = small_workload
    assert replay_with_full_cache(events) > 100


def increasing_events(index, rng, count, start_seq):
    """Bid raises, crowd joins and new campaigns: scores only go up."""
    events = []
    crowds = index.crowds()
    users = index.users()
    next_cid = max(c.id for c in index.campaigns()) + 1
    at = 0
    for seq in range(start_seq, start_seq + count):
        at += rng.randint(0, 30)
        roll = rng.random()
        if roll < 0.5:
            c = rng.choice(index.campaigns())
            t = rng.choice(c.targetings)
            body = BidChanged(c.id, t.crowd, round(t.bid * 1.5, 2))
        elif roll < 0.8:
            crowd = rng.choice(crowds)
            body = UserCrowdsChanged(rng.choice(users), added=((crowd, index.crowd_type(crowd)),))
        else:
            crowd = rng.choice(crowds)
            new = campaign(next_cid, {crowd: 2.0}, types={crowd: index.crowd_type(crowd)})
            body = CampaignUpserted(new)
            next_cid += 1
        event = MutationEvent(seq, at, body)
        index.apply(event)
        events.append(event)
    return events


def replay_increasing(events, count, seed=4):
    index = initial_index(events)
    n = 5
    cache = fully_update(index, index.users(), n, values=VALUES, at=0)
    # build the stream against a scratch copy, replay it on the real index
    scratch = TargetingIndex.from_bytes(index.to_bytes())
    stream = increasing_events(scratch, random.Random(seed), count, start_seq=len(events))
    window = DeltaWindow(window_length=0)
    stats = FlushStats()
    for event in stream:
        index.apply(event)
        ingest(event, window, index)
        touched = window.work_list()
        flush(window, cache, index, n, values=VALUES, at=event.at, stats=stats)
        assert_matches_oracle(cache, index, touched, n)
    assert_matches_oracle(cache, index, cache.users(), n)
    assert stats.downward_evictions == 0


def test_top_n_exact_under_score_increasing_events(quiet_workload):
    events, _ = quiet_workload
    replay_increasing(events, 300)


def test_window_batches_and_deduplicates_users():
    index = TargetingIndex.replay(tiny_log().events)
    cache = fully_update(index, [UserId(1), UserId(2)], 5, values=VALUES, at=0)
    window = DeltaWindow(window_length=300, opened_at=0)
    log = Log(at=10, seq=index.version)
    for event in (log.bid(1, 2, 3.0, at=10), log.bid(2, 2, 2.0, at=20), log.join(3, 2, at=30)):
        index.apply(event)
        ingest(event, window, index)
    # crowd 2 members: users 1, 2 and (after the join) 3
    assert window.work_list() == [1, 2, 3]
    assert not window.due(299)
    assert window.due(300)
    stats = FlushStats()
    meter = CostMeter()
    flush(window, cache, index, 5, values=VALUES, at=300, stats=stats, meter=meter)
    assert stats.users_updated == 2
    assert stats.skipped_uncached == 1
    assert meter.user_ad_pairs_scored > 0
    assert window.opened_at == 300 and not window.affected
    entry = cache.get(UserId(1))
    assert entry.last_delta == 300 and entry.refreshed_at == 300
    assert_matches_oracle(cache, index, [UserId(1), UserId(2)], 5)


def test_departed_crowd_pairs_removed():
    index = TargetingIndex.replay(tiny_log().events)
    cache = fully_update(index, [UserId(2)], 5, values=VALUES, at=0)
    window = DeltaWindow(window_length=0)
    event = MutationEvent(index.version, 5, UserCrowdsChanged(UserId(2), removed=(CrowdId(4),)))
    index.apply(event)
    ingest(event, window, index)
    stats = FlushStats()
    flush(window, cache, index, 5, values=VALUES, at=5, stats=stats)
    assert all(vp.crowd != 4 for vp in cache.pairs_of(UserId(2)))
    assert stats.pairs_removed == 1


def test_downward_rescore_is_not_backfilled():
    log = Log()
    log.upsert(campaign(1, {1: 5000.0}))
    log.upsert(campaign(2, {1: 1.0}))
    log.join(1, 1)
    index = TargetingIndex.replay(log.events)
    cache = fully_update(index, [UserId(1)], 1, values=VALUES, at=0)
    assert cache.pairs_of(UserId(1))[0].ad == 1001
    window = DeltaWindow(window_length=0)
    event = log.bid(1, 1, 0.001, at=5)
    index.apply(event)
    ingest(event, window, index)
    flush(window, cache, index, 1, values=VALUES, at=5)
    # the list keeps the re-scored pair; the better pair waits for the next fully update
    assert [vp.ad for vp in cache.pairs_of(UserId(1))] == [1001]
    assert match_optimal(UserId(1), index, 1, CostMeter(), values=VALUES)[0].ad == 1002


def test_downward_eviction_is_counted_and_warned(caplog):
    log = Log()
    log.upsert(campaign(1, {1: 5000.0}))
    log.upsert(campaign(2, {1: 1.0}))
    log.join(1, 1)
    index = TargetingIndex.replay(log.events)
    cache = fully_update(index, [UserId(1)], 1, values=VALUES, at=0)
    window = DeltaWindow(window_length=300)
    for event in (log.bid(1, 1, 0.001, at=5), log.bid(2, 1, 2.0, at=6)):
        index.apply(event)
        ingest(event, window, index)
    stats = FlushStats()
    with caplog.at_level("WARNING", logger="tfms.nearline"):
        flush(window, cache, index, 1, values=VALUES, at=300, stats=stats)
    assert [vp.ad for vp in cache.pairs_of(UserId(1))] == [1002]
    assert stats.pairs_evicted == 1
    assert stats.downward_evictions == 1
    assert "evicted after downward re-score" in caplog.text


def test_ingest_requires_applied_event():
    index = TargetingIndex()
    event = Log().join(1, 1)
    with pytest.raises(ContractViolation, match="ingest_before_apply"):
        ingest(event, DeltaWindow(), index)


def test_cache_contracts():
    cache = TopNCache(2)
    a = ValuedPair(AdCrowdPair(AdId(1), CrowdId(1)), 3.0)
    b = ValuedPair(AdCrowdPair(AdId(2), CrowdId(1)), 2.0)
    c = ValuedPair(AdCrowdPair(AdId(3), CrowdId(1)), 1.0)
    with pytest.raises(ContractViolation, match="list_too_long"):
        cache.put_full(UserId(1), [a, b, c], 0)
    with pytest.raises(ContractViolation, match="list_not_sorted"):
        cache.put_full(UserId(1), [b, a], 0)
    with pytest.raises(ContractViolation, match="duplicate_pair"):
        cache.put_full(UserId(1), [a, a], 0)
    with pytest.raises(ContractViolation, match="delta_for_uncached_user"):
        cache.put_delta(UserId(1), [a], 5)
    with pytest.raises(ContractViolation, match="bad_topn"):
        TopNCache(0)


def test_cache_snapshot_round_trip(tmp_path, small_workload):
    events, _ = small_workload
    index = initial_index(events)
    cache = fully_update(index, index.users()[:40], 8, values=VALUES, at=0)
    first = index.users()[0]
    cache.put_delta(first, cache.pairs_of(first)[:3], 77)
    path = tmp_path / "cache.snap"
    cache.snapshot(path)
    loaded = TopNCache.load(path)
    assert loaded == cache
    assert loaded.get(first).last_delta == 77
    data = bytearray(path.read_bytes())
    data[-1] ^= 0x01
    with pytest.raises(SnapshotIntegrityError, match="checksum_mismatch"):
        TopNCache.from_bytes(bytes(data))


@pytest.mark.slow
def test_delta_regimes_on_500_users(small_spec):
    spec = replace(small_spec, seed=8, users=500)
    events, _ = generate(spec)
    assert replay_with_full_cache(events, check_every=100) > 100
    quiet, _ = generate(replace(spec, advertiser_events_per_day=0.0, user_events_per_day=0.0))
    replay_increasing(quiet, 500)
