"""Core domain types shared by every matcher.

Identifiers are plain 64-bit unsigned integers wrapped in ``NewType`` so
that ordering and hashing are the integers' own (total and deterministic).
All types here are immutable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NewType, Optional

from .errors import ContractViolation

UserId = NewType("UserId", int)
CrowdId = NewType("CrowdId", int)
AdId = NewType("AdId", int)
CampaignId = NewType("CampaignId", int)

# Simulated timestamps are integer seconds.
DAY = 86_400
Timestamp = int

MAX_ID = (1 << 64) - 1


class TargetingType(str, enum.Enum):
    # automatic targeting is deliberately absent
    RETARGETING = "retargeting"
    KEYWORDS = "keywords"
    DEMOGRAPHIC = "demographic"


class CampaignStatus(str, enum.Enum):
    ACTIVE = "active"
    PAUSED = "paused"
    CANCELED = "canceled"


@dataclass(frozen=True)
class Targeting:
    crowd: CrowdId
    type: TargetingType
    bid: float

    def __post_init__(self) -> None:
        if not self.bid > 0:
            raise ContractViolation(f"non_positive_bid: crowd={self.crowd} bid={self.bid}")


@dataclass(frozen=True)
class Campaign:
    id: CampaignId
    ad: AdId
    status: CampaignStatus = CampaignStatus.ACTIVE
    budget_remaining: float = 0.0
    targetings: tuple[Targeting, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.budget_remaining < 0:
            raise ContractViolation(
                f"negative_budget: campaign={self.id} budget={self.budget_remaining}"
            )
        seen: set[CrowdId] = set()
        for t in self.targetings:
            if t.crowd in seen:
                raise ContractViolation(
                    f"duplicate_targeting: campaign={self.id} crowd={t.crowd}"
                )
            seen.add(t.crowd)
        # canonical order keeps snapshots and logs byte-stable
        object.__setattr__(
            self, "targetings", tuple(sorted(self.targetings, key=lambda t: t.crowd))
        )

    @property
    def servable(self) -> bool:
        return self.status is CampaignStatus.ACTIVE and self.budget_remaining > 0

    def targeting_for(self, crowd: CrowdId) -> Optional[Targeting]:
        for t in self.targetings:
            if t.crowd == crowd:
                return t
        return None

    def crowds(self) -> frozenset[CrowdId]:
        return frozenset(t.crowd for t in self.targetings)

    def with_status(self, status: CampaignStatus) -> "Campaign":
        return replace(self, status=status)

    def with_budget(self, remaining: float) -> "Campaign":
        return replace(self, budget_remaining=remaining)

    def with_bid(self, crowd: CrowdId, bid: float) -> "Campaign":
        current = self.targeting_for(crowd)
        if current is None:
            raise ContractViolation(f"crowd_not_targeted: campaign={self.id} crowd={crowd}")
        targetings = tuple(
            Targeting(t.crowd, t.type, bid) if t.crowd == crowd else t for t in self.targetings
        )
        return replace(self, targetings=targetings)


@dataclass(frozen=True, order=True)
class AdCrowdPair:
    ad: AdId
    crowd: CrowdId


@dataclass(frozen=True)
class ValuedPair:
    pair: AdCrowdPair
    score: float
    scored_at: Timestamp = 0

    @property
    def ad(self) -> AdId:
        return self.pair.ad

    @property
    def crowd(self) -> CrowdId:
        return self.pair.crowd


def rank_key(vp: ValuedPair) -> tuple[float, int, int]:
    """Global total order: score desc, AdId asc, CrowdId asc."""
    return (-vp.score, vp.pair.ad, vp.pair.crowd)
