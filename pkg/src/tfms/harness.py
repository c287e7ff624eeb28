"""Traffic replay: drives the simulated clock over event and traffic logs.

Every selected matcher sees the same requests at the same index version.
The auction is a single-slot stand-in: the eligible set is the part of
the current O(u) whose campaign is valid, a matcher's winner is the most
valuable pair it served that is eligible, and the oracle's winner is the
most valuable eligible pair overall.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .baseline import (
    CostMeter,
    RuleScores,
    TruncationConfig,
    TruncationTrace,
    match_optimal,
    match_truncated,
)
from .domain import DAY, AdCrowdPair, TargetingType, Timestamp, UserId, ValuedPair
from .errors import ContractViolation
from .events import MutationEvent, Visit
from .index import TargetingIndex
from .nearline import (
    DEFAULT_WINDOW,
    DeltaWindow,
    FlushStats,
    TopNCache,
    flush,
    fully_update,
    ingest,
    select_active_users,
)
from .report import CostTable, MatcherReport, NearlineStats, SimReport, summarize
from .scoring import ValueModel, is_valid
from .serving import fetch

logger = logging.getLogger(__name__)

ORACLE = "oracle"
TRUNCATED = "truncated"
FREE_USER_CROWD = "free_user_crowd"
FREE_CROWD_AD = "free_crowd_ad"
TFMS = "tfms"
MATCHERS = (ORACLE, TRUNCATED, FREE_USER_CROWD, FREE_CROWD_AD, TFMS)

# priorities at equal timestamps; flushes are driven by the window clock
# and so precede any mutation at the same instant
_FULL, _MUTATION, _VISIT = range(3)


@dataclass(frozen=True)
class TfmsConfig:
    topn: int = 50
    window: int = DEFAULT_WINDOW
    lookback: int = DAY
    fallback: bool = True
    parallelism: int = 1

    def __post_init__(self) -> None:
        if self.topn < 1 or self.window < 0 or self.lookback < 0 or self.parallelism < 1:
            raise ContractViolation(f"bad_tfms_config: {self}")

    def as_dict(self) -> dict:
        return {
            "topn": self.topn,
            "window": self.window,
            "lookback": self.lookback,
            "fallback": self.fallback,
            "parallelism": self.parallelism,
        }


def truncation_for(name: str, truncation: TruncationConfig) -> TruncationConfig:
    """The truncation setting of each truncating matcher."""
    if name == FREE_USER_CROWD:
        return TruncationConfig(m=None, k=truncation.k, n=truncation.n)
    if name == FREE_CROWD_AD:
        return TruncationConfig(m=truncation.m, k=None, n=truncation.n)
    return truncation


@dataclass
class _Tally:
    name: str
    meter: CostMeter = field(default_factory=CostMeter)
    trace: Optional[TruncationTrace] = None
    requests: int = 0
    impressions: int = 0
    revenue: float = 0.0
    clicks: float = 0.0
    recall_sum: float = 0.0
    recall_requests: int = 0
    winning: dict[TargetingType, int] = field(
        default_factory=lambda: {t: 0 for t in TargetingType}
    )

    def report(self) -> MatcherReport:
        r = MatcherReport(name=self.name)
        r.requests = self.requests
        r.impressions = self.impressions
        r.revenue = self.revenue
        r.rpm = 1000.0 * self.revenue / self.requests if self.requests else 0.0
        r.clicks = self.clicks
        r.pctr = self.clicks / self.requests if self.requests else 0.0
        r.ppc = self.revenue / self.clicks if self.clicks else 0.0
        r.pairs_scored = self.meter.user_ad_pairs_scored
        r.user_crowd_pairs = self.meter.user_crowd_pairs_examined
        r.pairs_per_request = r.pairs_scored / self.requests if self.requests else 0.0
        r.recall_requests = self.recall_requests
        r.recall_at_n = self.recall_sum / self.recall_requests if self.recall_requests else 0.0
        r.winning_impressions = {t.value: c for t, c in self.winning.items()}
        if self.trace is not None:
            r.truncated_user_crowd_pct = self.trace.user_crowd_pct()
            r.truncated_crowd_ad_pct = self.trace.crowd_ad_pct()
            r.truncation_by_type = {
                t.value: {
                    "user_crowd_pct": self.trace.user_crowd_pct(t),
                    "crowd_ad_pct": self.trace.crowd_ad_pct(t),
                }
                for t in TargetingType
            }
        return r


class _Nearline:
    """TFMS state for one run: cache, delta window and counters."""

    def __init__(self, config: TfmsConfig, values: ValueModel):
        self.config = config
        self.values = values
        self.cache = TopNCache(config.topn)
        self.window = DeltaWindow(window_length=config.window)
        self.active: frozenset[UserId] = frozenset()
        self.full_meter = CostMeter()
        self.delta_meter = CostMeter()
        self.flush_stats = FlushStats()
        self.stats = NearlineStats()
        self.shortfall: list[int] = []
        self.staleness: list[int] = []
        self.covered = 0

    def full_update(self, index: TargetingIndex, traffic: Sequence[Visit], at: Timestamp) -> None:
        self.active = select_active_users(traffic, self.config.lookback, at)
        self.cache = fully_update(
            index,
            self.active,
            self.config.topn,
            self.config.parallelism,
            values=self.values,
            at=at,
            meter=self.full_meter,
        )
        # the fresh cache already reflects every pending delta
        self.window.reset(at)
        self.stats.full_updates += 1
        self.stats.active_user_refreshes += len(self.active)

    def flush(self, index: TargetingIndex, at: Timestamp) -> None:
        self.stats.invalidations += self.window.invalidations
        flush(
            self.window,
            self.cache,
            index,
            self.config.topn,
            values=self.values,
            at=at,
            meter=self.delta_meter,
            stats=self.flush_stats,
        )

    def finish(self, requests: int) -> NearlineStats:
        s = self.stats
        s.full_pairs_scored = self.full_meter.user_ad_pairs_scored
        s.delta_pairs_scored = self.delta_meter.user_ad_pairs_scored
        s.flushes = self.flush_stats.flushes
        s.delta_users_updated = self.flush_stats.users_updated
        s.delta_skipped_uncached = self.flush_stats.skipped_uncached
        s.pairs_removed = self.flush_stats.pairs_removed
        s.pairs_evicted = self.flush_stats.pairs_evicted
        s.downward_evictions = self.flush_stats.downward_evictions
        s.active_coverage = self.covered / requests if requests else 0.0
        s.shortfall = summarize(self.shortfall)
        s.staleness = summarize(self.staleness)
        return s


def _timeline(
    events: Sequence[MutationEvent], visits: Sequence[Visit], end: Timestamp
) -> Iterator[tuple[Timestamp, int, int, object]]:
    def fulls() -> Iterator[tuple[Timestamp, int, int, object]]:
        for day in range(0, end, DAY):
            yield (day, _FULL, 0, None)

    muts = ((e.at, _MUTATION, e.seq, e) for e in sorted(events, key=lambda e: e.order) if e.at >= 0)
    reqs = ((v.at, _VISIT, v.seq, v) for v in sorted(visits, key=lambda v: (v.at, v.seq)) if 0 <= v.at < end)
    return heapq.merge(fulls(), muts, reqs, key=lambda item: item[:3])


def _horizon(events: Sequence[MutationEvent], visits: Sequence[Visit]) -> Timestamp:
    last = max([e.at for e in events] + [v.at for v in visits] + [0])
    return (last // DAY + 1) * DAY


def _winner(
    served: Sequence[ValuedPair], eligible: dict[AdCrowdPair, float]
) -> Optional[tuple[AdCrowdPair, float]]:
    best: Optional[tuple[AdCrowdPair, float]] = None
    for vp in served:
        value = eligible.get(vp.pair)
        if value is None:
            continue
        if best is None or (-value, vp.pair) < (-best[1], best[0]):
            best = (vp.pair, value)
    return best


def run(
    events: Sequence[MutationEvent],
    visits: Sequence[Visit],
    matchers: Sequence[str] = MATCHERS,
    truncation: TruncationConfig = TruncationConfig(),
    tfms: TfmsConfig = TfmsConfig(),
    *,
    seed: int = 0,
    workload: str = "",
    end: Optional[Timestamp] = None,
) -> SimReport:
    """Replay the logs against the selected matchers and collect metrics.

    Events before t = 0 build the initial world; visits before t = 0 only
    feed active-user selection. Fully updates run at each day boundary,
    flushes at each window boundary (after every mutation for window 0).
    """
    unknown = [m for m in matchers if m not in MATCHERS]
    if unknown or not matchers:
        raise ContractViolation(f"unknown_matcher: {unknown or 'none selected'}")
    selected = [m for m in MATCHERS if m in matchers]
    values = ValueModel(seed)
    rules = RuleScores(seed)
    n = truncation.n
    end = _horizon(events, visits) if end is None else end

    index = TargetingIndex()
    for e in sorted(events, key=lambda e: e.order):
        if e.at < 0:
            index.apply(e)
    traffic = sorted(visits, key=lambda v: (v.at, v.seq))

    tallies = {name: _Tally(name) for name in selected}
    for name in (TRUNCATED, FREE_USER_CROWD, FREE_CROWD_AD):
        if name in tallies:
            tallies[name].trace = TruncationTrace()
    nl = _Nearline(tfms, values) if TFMS in tallies else None
    scratch = CostMeter()
    requests = 0
    unknown_users: set[UserId] = set()

    logger.info(
        "run start: matchers=%s, index v%d, %d visits, horizon %d s",
        ",".join(selected),
        index.version,
        len(traffic),
        end,
    )
    for at, kind, _, item in _timeline(events, traffic, end):
        if nl is not None:
            if kind == _FULL:
                nl.full_update(index, traffic, at)
                continue
            while nl.config.window > 0 and nl.window.due(at):
                nl.flush(index, nl.window.closes_at)
        elif kind == _FULL:
            continue

        if kind == _MUTATION:
            assert isinstance(item, MutationEvent)
            index.apply(item)
            if nl is not None:
                ingest(item, nl.window, index)
                if nl.config.window == 0:
                    nl.flush(index, at)
            continue

        assert isinstance(item, Visit)
        user = item.user
        requests += 1
        eligible: dict[AdCrowdPair, float] = {}
        for pair, bid in index.candidates(user):
            campaign = index.campaign_of(pair.ad)
            if campaign is not None and is_valid(campaign, pair, at):
                eligible[pair] = values.value_measure(user, pair, bid)
        oracle_meter = tallies[ORACLE].meter if ORACLE in tallies else scratch
        oracle_top = match_optimal(user, index, n, oracle_meter, values=values, at=at)
        oracle_pairs = {vp.pair for vp in oracle_top}
        if not oracle_top and not index.crowds_of(user):
            unknown_users.add(user)

        for name, tally in tallies.items():
            tally.requests += 1
            if name == ORACLE:
                served: Sequence[ValuedPair] = oracle_top
                win = _winner(
                    [ValuedPair(p, v) for p, v in eligible.items()], eligible
                )
            elif name == TFMS:
                assert nl is not None
                served = _serve_tfms(nl, tally, user, index, truncation, rules, values, at)
                win = _winner(served, eligible)
            else:
                served = match_truncated(
                    user,
                    index,
                    truncation_for(name, truncation),
                    tally.meter,
                    values=values,
                    rules=rules,
                    at=at,
                    trace=tally.trace,
                )
                win = _winner(served, eligible)

            if oracle_top:
                hits = sum(1 for vp in served if vp.pair in oracle_pairs)
                tally.recall_sum += hits / len(oracle_top)
                tally.recall_requests += 1
            if win is not None:
                pair, value = win
                tally.impressions += 1
                tally.revenue += value / 1000.0
                tally.clicks += values.pctr(user, pair.ad)
                ctype = index.crowd_type(pair.crowd)
                if ctype is not None:
                    tally.winning[ctype] += 1

        if nl is not None and user in nl.active:
            nl.covered += 1

    if unknown_users:
        logger.warning("%d users in traffic have no crowd memberships", len(unknown_users))

    reports = {name: tally.report() for name, tally in tallies.items()}
    if nl is not None:
        stats = nl.finish(requests)
        reports[TFMS].nearline = stats
    report = SimReport(
        workload_checksum=workload,
        seed=seed,
        truncation={"m": truncation.m, "k": truncation.k, "n": truncation.n},
        tfms=tfms.as_dict(),
        requests=requests,
        matchers=reports,
    )
    report.cost = cost_model(report)
    logger.info(
        "run done: %d requests, %s",
        requests,
        ", ".join(f"{k} rpm={v.rpm:.4f}" for k, v in sorted(reports.items())),
    )
    return report


def _serve_tfms(
    nl: _Nearline,
    tally: _Tally,
    user: UserId,
    index: TargetingIndex,
    truncation: TruncationConfig,
    rules: RuleScores,
    values: ValueModel,
    at: Timestamp,
) -> Sequence[ValuedPair]:
    result = fetch(user, nl.cache, index, at)
    if result.cache_miss:
        nl.stats.cache_misses += 1
        if not nl.config.fallback:
            return ()
        nl.stats.fallback_requests += 1
        return match_truncated(
            user, index, truncation, tally.meter, values=values, rules=rules, at=at
        )
    # online work is one pass over the cached list
    tally.meter.add(pairs=result.cached)
    nl.stats.fetch_pairs += result.cached
    nl.stats.dropped_invalid += result.dropped_invalid
    assert result.staleness is not None
    nl.staleness.append(result.staleness)
    available = len(index.candidates(user))
    nl.shortfall.append(max(0, min(nl.config.topn, available) - result.cached))
    return result.served


def cost_model(report: SimReport, avg_visits: Optional[float] = None) -> Optional[CostTable]:
    """Relative-scale cost table from one run's meters.

    Needs the ``truncated`` and ``oracle`` reports. ``avg_visits`` defaults
    to requests per refreshed active user as measured by the TFMS run, and
    the active-user count is derived from it when given explicitly.
    ``tfms_full`` is the closed-form estimate; the identity check on the
    table uses the measured fully-update work instead.
    """
    base_r = report.matchers.get(TRUNCATED)
    oracle_r = report.matchers.get(ORACLE)
    if base_r is None or oracle_r is None or report.requests == 0:
        return None
    requests = report.requests
    tfms_r = report.matchers.get(TFMS)
    nearline = tfms_r.nearline if tfms_r is not None else None

    if avg_visits is None:
        if nearline is None or nearline.active_user_refreshes == 0:
            return None
        active = float(nearline.active_user_refreshes)
        avg_visits = requests / active
    else:
        if avg_visits <= 0:
            raise ContractViolation(f"bad_avg_visits: {avg_visits}")
        active = requests / avg_visits

    online_parallel = float(oracle_r.pairs_scored)
    return CostTable(
        requests=requests,
        active_users=active,
        avg_visits=avg_visits,
        base=float(base_r.pairs_scored),
        online_parallel=online_parallel,
        tfms_full=online_parallel * active / requests,
        tfms_full_measured=float(nearline.full_pairs_scored) if nearline else None,
        tfms_delta=float(nearline.delta_pairs_scored) if nearline else None,
    )
