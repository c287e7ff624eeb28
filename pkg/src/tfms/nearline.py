"""Near-line top-n maintenance: daily fully update plus windowed delta update.

The fully update computes ``match_optimal`` for every active user and is
independent of the worker count. The delta pipeline buffers events for one
window, deduplicates affected users, and repairs each cached list from its
old contents plus the scored delta pairs. Lists are never backfilled from
O(u); anything lost to eviction waits for the next fully update.
"""

from __future__ import annotations

import bisect
import logging
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .baseline import CostMeter, match_optimal, top_n
from .domain import (
    AdCrowdPair,
    AdId,
    CrowdId,
    Timestamp,
    UserId,
    ValuedPair,
    rank_key,
)
from .errors import ContractViolation, SnapshotIntegrityError
from .events import MutationEvent, UserCrowdsChanged, Visit
from .index import TargetingIndex
from .scoring import ValueModel
from .snapshot import Packer, Unpacker, decode_snapshot, encode_snapshot, require, write_file_atomic

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"TFMSCAC1"
_SEC_META = 1
_SEC_ENTRIES = 2

DEFAULT_WINDOW = 5 * 60


@dataclass(frozen=True)
class CacheEntry:
    pairs: tuple[ValuedPair, ...]
    last_full_refresh: Timestamp
    last_delta: Optional[Timestamp] = None

    @property
    def refreshed_at(self) -> Timestamp:
        if self.last_delta is None:
            return self.last_full_refresh
        return max(self.last_full_refresh, self.last_delta)


def _check_list(pairs: Sequence[ValuedPair], n: int) -> None:
    if len(pairs) > n:
        raise ContractViolation(f"list_too_long: {len(pairs)} > {n}")
    seen: set[AdCrowdPair] = set()
    prev = None
    for vp in pairs:
        if vp.pair in seen:
            raise ContractViolation(f"duplicate_pair: {vp.pair}")
        seen.add(vp.pair)
        key = rank_key(vp)
        if prev is not None and key < prev:
            raise ContractViolation("list_not_sorted")
        prev = key


class TopNCache:
    """Per-user score-ordered lists. Each user's entry is replaced whole,
    so a concurrent reader sees either the old list or the new one."""

    def __init__(self, n: int):
        if n < 1:
            raise ContractViolation(f"bad_topn: {n}")
        self.n = n
        self._entries: dict[UserId, CacheEntry] = {}
        self._lock = threading.Lock()

    def get(self, user: UserId) -> Optional[CacheEntry]:
        with self._lock:
            return self._entries.get(user)

    def pairs_of(self, user: UserId) -> tuple[ValuedPair, ...]:
        entry = self.get(user)
        return entry.pairs if entry is not None else ()

    def __contains__(self, user: object) -> bool:
        with self._lock:
            return user in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def users(self) -> list[UserId]:
        with self._lock:
            return sorted(self._entries)

    def put_full(self, user: UserId, pairs: Sequence[ValuedPair], at: Timestamp) -> None:
        _check_list(pairs, self.n)
        with self._lock:
            self._entries[user] = CacheEntry(tuple(pairs), at, None)

    def put_delta(self, user: UserId, pairs: Sequence[ValuedPair], at: Timestamp) -> None:
        _check_list(pairs, self.n)
        with self._lock:
            old = self._entries.get(user)
            if old is None:
                raise ContractViolation(f"delta_for_uncached_user: {user}")
            self._entries[user] = CacheEntry(tuple(pairs), old.last_full_refresh, at)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TopNCache):
            return NotImplemented
        with self._lock:
            mine = dict(self._entries)
        return self.n == other.n and mine == other._entries

    __hash__ = None  # type: ignore[assignment]

    def to_bytes(self) -> bytes:
        with self._lock:
            entries = dict(self._entries)
        meta = Packer().u32(self.n)
        body = Packer().u32(len(entries))
        for user in sorted(entries):
            e = entries[user]
            body.u64(user).i64(e.last_full_refresh)
            body.u8(0 if e.last_delta is None else 1).i64(e.last_delta or 0)
            body.u32(len(e.pairs))
            for vp in e.pairs:
                body.u64(vp.pair.ad).u64(vp.pair.crowd).f64(vp.score).i64(vp.scored_at)
        return encode_snapshot(
            CACHE_MAGIC, [(_SEC_META, meta.getvalue()), (_SEC_ENTRIES, body.getvalue())]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "TopNCache":
        sections = decode_snapshot(CACHE_MAGIC, data)
        r = Unpacker(require(sections, _SEC_META, "meta"), "meta")
        n = r.u32()
        r.done()
        try:
            cache = cls(n)
            r = Unpacker(require(sections, _SEC_ENTRIES, "entries"), "entries")
            for _ in range(r.u32()):
                user = UserId(r.u64())
                full = r.i64()
                has_delta, delta = r.u8(), r.i64()
                pairs = tuple(
                    ValuedPair(AdCrowdPair(AdId(r.u64()), CrowdId(r.u64())), r.f64(), r.i64())
                    for _ in range(r.u32())
                )
                _check_list(pairs, n)
                cache._entries[user] = CacheEntry(pairs, full, delta if has_delta else None)
            r.done()
        except ContractViolation as e:
            raise SnapshotIntegrityError(f"bad_cache_entry: {e}") from e
        return cache

    def snapshot(self, path: Path) -> None:
        write_file_atomic(Path(path), self.to_bytes())
        logger.info("cache snapshot (%d users) written to %s", len(self), path)

    @classmethod
    def load(cls, path: Path) -> "TopNCache":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def fully_update(
    index: TargetingIndex,
    active_users: Iterable[UserId],
    n: int,
    parallelism: int = 1,
    *,
    values: ValueModel,
    at: Timestamp = 0,
    meter: Optional[CostMeter] = None,
) -> TopNCache:
    """Recompute top-n for every active user from the untruncated O(u).

    Users are striped over ``parallelism`` workers with private meters;
    results are inserted in user order, so the cache does not depend on
    the worker count.
    """
    if parallelism < 1:
        raise ContractViolation(f"bad_parallelism: {parallelism}")
    users = sorted(set(active_users))
    version = index.version

    def work(chunk: list[UserId]) -> tuple[list[tuple[UserId, list[ValuedPair]]], CostMeter]:
        m = CostMeter()
        return [(u, match_optimal(u, index, n, m, values=values, at=at)) for u in chunk], m

    if parallelism == 1 or len(users) <= 1:
        results = [work(users)]
    else:
        chunks = [users[i::parallelism] for i in range(parallelism)]
        with ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="fully-update") as pool:
            results = list(pool.map(work, chunks))

    if index.version != version:
        raise ContractViolation(f"index_mutated_during_fully_update: v{version} -> v{index.version}")

    cache = TopNCache(n)
    lists = sorted((item for rows, _ in results for item in rows), key=lambda item: item[0])
    for user, pairs in lists:
        cache.put_full(user, pairs, at)
    if meter is not None:
        for _, m in results:
            meter.merge(m)
    logger.info(
        "fully update at=%d: %d users, parallelism=%d, index v%d", at, len(users), parallelism, version
    )
    return cache


def select_active_users(traffic: Sequence[Visit], lookback: int, at: Timestamp) -> frozenset[UserId]:
    """Users with at least one visit in ``[at - lookback, at)``.

    ``traffic`` must be ordered by time.
    """
    if lookback <= 0:
        return frozenset()
    lo = bisect.bisect_left(traffic, at - lookback, key=lambda v: v.at)
    hi = bisect.bisect_left(traffic, at, key=lambda v: v.at)
    return frozenset(v.user for v in traffic[lo:hi])


@dataclass
class UserDelta:
    upserts: set[AdCrowdPair] = field(default_factory=set)
    removals: set[AdCrowdPair] = field(default_factory=set)
    joined: set[CrowdId] = field(default_factory=set)
    left: set[CrowdId] = field(default_factory=set)


@dataclass
class FlushStats:
    flushes: int = 0
    users_updated: int = 0
    skipped_uncached: int = 0
    pairs_removed: int = 0
    pairs_evicted: int = 0
    downward_evictions: int = 0


@dataclass
class DeltaWindow:
    window_length: int = DEFAULT_WINDOW
    opened_at: Timestamp = 0
    events: list[MutationEvent] = field(default_factory=list)
    affected: dict[UserId, UserDelta] = field(default_factory=dict)
    invalidations: int = 0
    bid_decreases: int = 0

    def __post_init__(self) -> None:
        if self.window_length < 0:
            raise ContractViolation(f"bad_window: {self.window_length}")

    @property
    def closes_at(self) -> Timestamp:
        return self.opened_at + self.window_length

    def due(self, now: Timestamp) -> bool:
        return now >= self.closes_at

    def delta_for(self, user: UserId) -> UserDelta:
        d = self.affected.get(user)
        if d is None:
            d = self.affected[user] = UserDelta()
        return d

    def work_list(self) -> list[UserId]:
        return sorted(self.affected)

    def reset(self, at: Timestamp) -> None:
        self.opened_at = at
        self.events.clear()
        self.affected.clear()
        self.invalidations = 0
        self.bid_decreases = 0


def ingest(event: MutationEvent, window: DeltaWindow, index: TargetingIndex) -> int:
    """Record the delta of an event that has just been applied to ``index``.

    Advertiser changes fan out to the crowd's current members. Returns the
    number of users touched.
    """
    change = index.last_change
    if change.version != index.version or change.version == 0:
        raise ContractViolation("ingest_before_apply")
    window.events.append(event)

    if isinstance(event.body, UserCrowdsChanged):
        d = window.delta_for(event.body.user)
        d.joined.update(change.joined)
        d.left.update(change.left)
        return 1

    by_crowd: dict[CrowdId, list[tuple[AdCrowdPair, bool]]] = defaultdict(list)
    for pair in change.upserted:
        by_crowd[pair.crowd].append((pair, True))
    for pair in change.removed:
        by_crowd[pair.crowd].append((pair, False))

    touched: set[UserId] = set()
    for crowd in sorted(by_crowd):
        members = index.users_of(crowd)
        for user in members:
            d = window.delta_for(user)
            for pair, upsert in by_crowd[crowd]:
                (d.upserts if upsert else d.removals).add(pair)
        touched.update(members)

    # validity-only changes are enforced at fetch
    window.invalidations += len(change.invalidated)
    window.bid_decreases += len(change.bid_decreases)
    return len(touched)


def flush(
    window: DeltaWindow,
    cache: TopNCache,
    index: TargetingIndex,
    n: int,
    *,
    values: ValueModel,
    at: Timestamp,
    meter: Optional[CostMeter] = None,
    stats: Optional[FlushStats] = None,
) -> TopNCache:
    """Merge each affected user's delta into the cached list and reset the window.

    Dispositions are resolved against the index as it stands now: a pair
    whose targeting or membership is gone is removed, a surviving upsert is
    re-scored at the current bid. Users without a cache entry are skipped.
    """
    stats = stats if stats is not None else FlushStats()
    stats.flushes += 1
    crowds_scored = 0
    pairs_scored = 0

    for user in window.work_list():
        entry = cache.get(user)
        if entry is None:
            stats.skipped_uncached += 1
            continue
        d = window.affected[user]
        members = {c for c, _ in index.crowds_of(user)}
        current = {vp.pair: vp for vp in entry.pairs}
        before = len(current)
        rescored_down: set[AdCrowdPair] = set()

        departed = {c for c in d.left if c not in members}
        if departed:
            for pair in [p for p in current if p.crowd in departed]:
                del current[pair]
                stats.pairs_removed += 1

        for pair in sorted(d.removals | d.upserts):
            bid = index.bid_of(pair)
            if bid is None or pair.crowd not in members:
                if current.pop(pair, None) is not None:
                    stats.pairs_removed += 1
                continue
            if pair in d.upserts:
                vp = ValuedPair(pair, values.value_measure(user, pair, bid), at)
                old = current.get(pair)
                if old is not None and vp.score < old.score:
                    rescored_down.add(pair)
                current[pair] = vp
                pairs_scored += 1

        for crowd in sorted(d.joined):
            if crowd not in members:
                continue
            crowds_scored += 1
            for ad, bid in index.ads_of(crowd):
                pair = AdCrowdPair(ad, crowd)
                current[pair] = ValuedPair(pair, values.value_measure(user, pair, bid), at)
                pairs_scored += 1

        merged = top_n(current.values(), n)
        if len(current) > n:
            kept = {vp.pair for vp in merged}
            evicted = [p for p in current if p not in kept]
            stats.pairs_evicted += len(evicted)
            down = sum(1 for p in evicted if p in rescored_down)
            if down:
                stats.downward_evictions += down
                logger.warning("user %d: %d pairs evicted after downward re-score", user, down)
        cache.put_delta(user, merged, at)
        stats.users_updated += 1
        logger.debug("flush user %d: %d -> %d pairs", user, before, len(merged))

    if meter is not None:
        meter.add(crowds=crowds_scored, pairs=pairs_scored)
    logger.debug(
        "flush at=%d: %d events, %d users, %d skipped",
        at,
        len(window.events),
        len(window.affected),
        stats.skipped_uncached,
    )
    window.reset(at)
    return cache
