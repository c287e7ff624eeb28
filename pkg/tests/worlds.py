"""Hand-built worlds for tests: a small event-log builder."""

from tfms.domain import (
    AdId,
    Campaign,
    CampaignId,
    CampaignStatus,
    CrowdId,
    Targeting,
    TargetingType,
    UserId,
)
from tfms.events import (
    BidChanged,
    BudgetChanged,
    CampaignStatusChanged,
    CampaignUpserted,
    MutationEvent,
    UserCrowdsChanged,
)

TYPES = list(TargetingType)


def type_of(crowd):
    return TYPES[crowd % 3]


def campaign(cid, bids, *, status=CampaignStatus.ACTIVE, budget=100.0, types=None):
    """``bids`` maps crowd -> bid; the ad id is ``cid + 1000``."""
    types = types or {}
    return Campaign(
        id=CampaignId(cid),
        ad=AdId(cid + 1000),
        status=status,
        budget_remaining=budget,
        targetings=tuple(
            Targeting(CrowdId(c), types.get(c, type_of(c)), b) for c, b in sorted(bids.items())
        ),
    )


class Log:
    """Appends events with increasing seq; ``at`` defaults to the last one."""

    def __init__(self, at=0, seq=0):
        self.events = []
        self.at = at
        self.seq = seq
        self.types = {}

    def _emit(self, body, at):
        if at is not None:
            self.at = at
        e = MutationEvent(self.seq, self.at, body)
        self.seq += 1
        self.events.append(e)
        return e

    def upsert(self, c, at=None):
        return self._emit(CampaignUpserted(c), at)

    def join(self, user, *crowds, at=None):
        added = tuple((CrowdId(c), self.types.get(c, type_of(c))) for c in crowds)
        return self._emit(UserCrowdsChanged(UserId(user), added=added), at)

    def leave(self, user, *crowds, at=None):
        return self._emit(UserCrowdsChanged(UserId(user), removed=tuple(CrowdId(c) for c in crowds)), at)

    def status(self, cid, status, at=None):
        return self._emit(CampaignStatusChanged(CampaignId(cid), status), at)

    def bid(self, cid, crowd, bid, at=None):
        return self._emit(BidChanged(CampaignId(cid), CrowdId(crowd), bid), at)

    def budget(self, cid, remaining, at=None):
        return self._emit(BudgetChanged(CampaignId(cid), remaining), at)


def tiny_log():
    """Three users, four crowds, three campaigns."""
    log = Log()
    log.upsert(campaign(1, {1: 1.0, 2: 2.0}))
    log.upsert(campaign(2, {2: 0.5, 3: 1.5}))
    log.upsert(campaign(3, {4: 3.0}))
    log.join(1, 1, 2)
    log.join(2, 2, 3, 4)
    log.join(3, 4)
    return log
