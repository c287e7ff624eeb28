"""Online fetch of a user's cached top-n with serving-time validity checks.

Fetch reads the cache and the campaign directory only. It never touches
crowd membership or the crowd -> ad index and never re-scores; stale
scores are served as cached and the staleness is reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

from .domain import AdId, Campaign, Timestamp, UserId, ValuedPair
from .nearline import TopNCache
from .scoring import is_valid


class CampaignSource(Protocol):
    def campaign_of(self, ad: AdId) -> Optional[Campaign]: ...


@dataclass(frozen=True)
class FetchResult:
    served: tuple[ValuedPair, ...]
    dropped_invalid: int
    cache_miss: bool
    staleness: Optional[int]

    @property
    def cached(self) -> int:
        return len(self.served) + self.dropped_invalid


def fetch(user: UserId, cache: TopNCache, campaigns: CampaignSource, at: Timestamp) -> FetchResult:
    entry = cache.get(user)
    if entry is None:
        return FetchResult(served=(), dropped_invalid=0, cache_miss=True, staleness=None)
    served = []
    dropped = 0
    for vp in entry.pairs:
        campaign = campaigns.campaign_of(vp.pair.ad)
        if campaign is not None and is_valid(campaign, vp.pair, at):
            served.append(vp)
        else:
            dropped += 1
    return FetchResult(
        served=tuple(served),
        dropped_invalid=dropped,
        cache_miss=False,
        staleness=at - entry.refreshed_at,
    )
