"""Truncated two-stage matcher and the brute-force optimal matcher.

``match_truncated`` keeps the top-m crowds per channel by a rule score and
the top-k ads per crowd by a per-ad statistic before ranking by value.
``match_optimal`` scores all of O(u) and is the oracle every other path
is tested against. Both return the same total order (see ``rank_key``).
"""

from __future__ import annotations

import heapq
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .domain import (
    AdCrowdPair,
    AdId,
    CrowdId,
    TargetingType,
    Timestamp,
    UserId,
    ValuedPair,
    rank_key,
)
from .errors import ContractViolation
from .index import TargetingIndex
from .scoring import ValueModel, unit_draw

logger = logging.getLogger(__name__)

# production values; desk-scale runs override n
DEFAULT_M = 100
DEFAULT_K = 2000
DEFAULT_N = 50


@dataclass(frozen=True)
class TruncationConfig:
    """``None`` for m or k means unbounded (no truncation in that stage)."""

    m: Optional[int] = DEFAULT_M
    k: Optional[int] = DEFAULT_K
    n: int = DEFAULT_N

    def __post_init__(self) -> None:
        for name in ("m", "k"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ContractViolation(f"bad_truncation: {name}={v}")
        if self.n < 1:
            raise ContractViolation(f"bad_truncation: n={self.n}")

    @classmethod
    def unbounded(cls, n: int = DEFAULT_N) -> "TruncationConfig":
        return cls(m=None, k=None, n=n)


class CostMeter:
    """Exact pair counters. Safe to share between threads."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.user_crowd_pairs_examined = 0
        self.user_ad_pairs_scored = 0

    def add(self, crowds: int = 0, pairs: int = 0) -> None:
        with self._lock:
            self.user_crowd_pairs_examined += crowds
            self.user_ad_pairs_scored += pairs

    def merge(self, other: "CostMeter") -> None:
        self.add(other.user_crowd_pairs_examined, other.user_ad_pairs_scored)

    def as_dict(self) -> dict[str, int]:
        return {
            "user_crowd_pairs": self.user_crowd_pairs_examined,
            "pairs_scored": self.user_ad_pairs_scored,
        }

    def __repr__(self) -> str:
        return (
            f"CostMeter(crowds={self.user_crowd_pairs_examined}, "
            f"pairs={self.user_ad_pairs_scored})"
        )


@dataclass
class TruncationTrace:
    """Examined vs retained counts per channel, accumulated over requests."""

    crowds_total: dict[TargetingType, int] = field(default_factory=lambda: defaultdict(int))
    crowds_kept: dict[TargetingType, int] = field(default_factory=lambda: defaultdict(int))
    ads_total: dict[TargetingType, int] = field(default_factory=lambda: defaultdict(int))
    ads_kept: dict[TargetingType, int] = field(default_factory=lambda: defaultdict(int))

    @staticmethod
    def _pct(total: int, kept: int) -> float:
        return 100.0 * (total - kept) / total if total else 0.0

    def user_crowd_pct(self, t: Optional[TargetingType] = None) -> float:
        if t is None:
            return self._pct(sum(self.crowds_total.values()), sum(self.crowds_kept.values()))
        return self._pct(self.crowds_total[t], self.crowds_kept[t])

    def crowd_ad_pct(self, t: Optional[TargetingType] = None) -> float:
        if t is None:
            return self._pct(sum(self.ads_total.values()), sum(self.ads_kept.values()))
        return self._pct(self.ads_total[t], self.ads_kept[t])


class RuleScores:
    """Rule-based truncation statistics.

    Both scores are seeded per-entity draws that know nothing about the
    ads' value for the user, which is exactly the weakness truncation has.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def crowd_score(self, user: UserId, crowd: CrowdId) -> float:
        # crowd-side quality only; the user is ignored
        return unit_draw(self.seed, 0xC0, crowd)

    def ad_score(self, ad: AdId) -> float:
        # stand-in for a trailing 7-day CTR
        return 0.001 + 0.099 * unit_draw(self.seed, 0xAD, ad)


def top_n(scored: Iterable[ValuedPair], n: int) -> list[ValuedPair]:
    return heapq.nsmallest(n, scored, key=rank_key)


def match_truncated(
    user: UserId,
    index: TargetingIndex,
    config: TruncationConfig,
    meter: CostMeter,
    *,
    values: ValueModel,
    rules: RuleScores,
    at: Timestamp = 0,
    trace: Optional[TruncationTrace] = None,
) -> list[ValuedPair]:
    by_channel: dict[TargetingType, list[CrowdId]] = defaultdict(list)
    for crowd, t in index.crowds_of(user):
        by_channel[t].append(crowd)

    kept: list[tuple[CrowdId, TargetingType]] = []
    for t in TargetingType:
        crowds = by_channel.get(t)
        if not crowds:
            continue
        if config.m is not None and len(crowds) > config.m:
            crowds = sorted(crowds, key=lambda c: (-rules.crowd_score(user, c), c))[: config.m]
        if trace is not None:
            trace.crowds_total[t] += len(by_channel[t])
            trace.crowds_kept[t] += len(crowds)
        kept.extend((c, t) for c in crowds)

    scored: list[ValuedPair] = []
    for crowd, t in sorted(kept):
        ads = index.ads_of(crowd)
        retained: Iterable[tuple[AdId, float]] = ads
        if config.k is not None and len(ads) > config.k:
            retained = sorted(ads, key=lambda ab: (-rules.ad_score(ab[0]), ab[0]))[: config.k]
        n_kept = 0
        for ad, bid in retained:
            pair = AdCrowdPair(ad, crowd)
            scored.append(ValuedPair(pair, values.value_measure(user, pair, bid), at))
            n_kept += 1
        if trace is not None:
            trace.ads_total[t] += len(ads)
            trace.ads_kept[t] += n_kept

    meter.add(crowds=len(kept), pairs=len(scored))
    return top_n(scored, config.n)


def score_candidates(
    user: UserId, index: TargetingIndex, values: ValueModel, at: Timestamp = 0
) -> list[ValuedPair]:
    return [
        ValuedPair(pair, values.value_measure(user, pair, bid), at)
        for pair, bid in index.candidates(user)
    ]


def match_optimal(
    user: UserId,
    index: TargetingIndex,
    n: int,
    meter: CostMeter,
    *,
    values: ValueModel,
    at: Timestamp = 0,
) -> list[ValuedPair]:
    scored = score_candidates(user, index, values, at)
    meter.add(crowds=len(index.crowds_of(user)), pairs=len(scored))
    return top_n(scored, n)
