"""Synthetic long-tail worlds.

``generate`` turns a ``WorkloadSpec`` into an event log (campaign
creation, crowd memberships, then advertiser and user mutations over the
horizon) and a traffic log of visits. Crowd popularity, crowds per user and
targetings per campaign all follow Zipf-shaped laws; everything is drawn
from one ``numpy`` generator seeded by the spec, so the same spec always
yields the same logs.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .domain import (
    DAY,
    AdId,
    Campaign,
    CampaignId,
    CampaignStatus,
    CrowdId,
    Targeting,
    TargetingType,
    Timestamp,
    UserId,
)
from .errors import WorkloadSpecError
from .events import (
    BidChanged,
    BudgetChanged,
    CampaignStatusChanged,
    CampaignUpserted,
    EventBody,
    MutationEvent,
    UserCrowdsChanged,
    Visit,
    encode_event,
    encode_visit,
)

logger = logging.getLogger(__name__)

AD_OFFSET = 1_000_000
_TYPES = list(TargetingType)


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 7
    users: int = 2000
    crowds: int = 300
    campaigns: int = 1500
    # Zipf exponents: crowd popularity over ranks, and the (numpy.zipf)
    # tails of crowds-per-user and targetings-per-campaign
    crowd_size_exponent: float = 1.1
    crowds_per_user_exponent: float = 1.6
    targetings_per_campaign_exponent: float = 1.8
    max_crowds_per_user: int = 120
    max_targetings_per_campaign: int = 40
    visits_per_user_per_day: float = 8.2
    daily_active_fraction: float = 0.6
    advertiser_events_per_day: float = 200.0
    user_events_per_day: float = 100.0
    horizon_days: int = 2
    history_days: int = 1
    retargeting_share: float = 0.3
    keywords_share: float = 0.3
    demographic_share: float = 0.4
    bid_median: float = 1.0
    bid_sigma: float = 0.6
    budget_min: float = 50.0
    budget_max: float = 500.0

    @property
    def start(self) -> Timestamp:
        return -self.history_days * DAY

    @property
    def end(self) -> Timestamp:
        return self.horizon_days * DAY

    def validate(self) -> None:
        problems = []
        if self.users < 1:
            problems.append("users must be >= 1")
        if self.crowds < 0 or self.campaigns < 0:
            problems.append("counts must be >= 0")
        if self.crowds == 0 and self.campaigns > 0:
            problems.append("campaigns need at least one crowd to target")
        if self.crowd_size_exponent <= 0:
            problems.append("crowd_size_exponent must be > 0")
        for name in ("crowds_per_user_exponent", "targetings_per_campaign_exponent"):
            if getattr(self, name) <= 1:
                problems.append(f"{name} must be > 1")
        if self.max_crowds_per_user < 1 or self.max_targetings_per_campaign < 1:
            problems.append("per-entity maxima must be >= 1")
        if self.visits_per_user_per_day < 1:
            problems.append("visits_per_user_per_day must be >= 1")
        if not 0 < self.daily_active_fraction <= 1:
            problems.append("daily_active_fraction must be in (0, 1]")
        if self.advertiser_events_per_day < 0 or self.user_events_per_day < 0:
            problems.append("event rates must be >= 0")
        if self.horizon_days < 1 or self.history_days < 0:
            problems.append("horizon_days must be >= 1 and history_days >= 0")
        shares = (self.retargeting_share, self.keywords_share, self.demographic_share)
        if min(shares) < 0 or sum(shares) <= 0:
            problems.append("targeting type shares must be >= 0 with a positive sum")
        if self.bid_median <= 0 or self.bid_sigma < 0:
            problems.append("bid_median must be > 0 and bid_sigma >= 0")
        if not 0 < self.budget_min <= self.budget_max:
            problems.append("need 0 < budget_min <= budget_max")
        if problems:
            raise WorkloadSpecError("infeasible_spec: " + "; ".join(problems))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class _World:
    """Mutable shadow of the generated world, used to emit only valid events."""

    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        shares = np.array(
            [spec.retargeting_share, spec.keywords_share, spec.demographic_share], dtype=float
        )
        self.crowd_types = rng.choice(len(_TYPES), size=spec.crowds, p=shares / shares.sum())
        ranks = np.arange(1, spec.crowds + 1, dtype=float)
        weights = ranks ** -spec.crowd_size_exponent
        # popularity rank is independent of the crowd id
        self.popularity = np.empty(spec.crowds)
        self.popularity[rng.permutation(spec.crowds)] = weights / weights.sum()
        self.campaigns: dict[CampaignId, Campaign] = {}
        self.user_crowds: dict[UserId, set[CrowdId]] = {}
        self.seq = 0

    def crowd(self, i: int) -> CrowdId:
        return CrowdId(int(i) + 1)

    def ctype(self, crowd: CrowdId) -> TargetingType:
        return _TYPES[int(self.crowd_types[crowd - 1])]

    def pick_crowds(self, size: int, exclude: set[CrowdId] = frozenset()) -> list[CrowdId]:
        p = self.popularity.copy()
        for c in exclude:
            p[c - 1] = 0.0
        available = int(np.count_nonzero(p))
        size = min(size, available)
        if size <= 0:
            return []
        picked = self.rng.choice(self.spec.crowds, size=size, replace=False, p=p / p.sum())
        return sorted(self.crowd(i) for i in picked)

    def bid(self) -> float:
        raw = self.rng.lognormal(math.log(self.spec.bid_median), self.spec.bid_sigma)
        return max(0.01, round(float(raw), 2))

    def budget(self) -> float:
        return round(float(self.rng.uniform(self.spec.budget_min, self.spec.budget_max)), 2)

    def zipf_count(self, exponent: float, cap: int) -> int:
        return int(min(self.rng.zipf(exponent), cap))

    def new_campaign(self, cid: CampaignId) -> Campaign:
        spec = self.spec
        size = self.zipf_count(spec.targetings_per_campaign_exponent, spec.max_targetings_per_campaign)
        targetings = tuple(
            Targeting(c, self.ctype(c), self.bid()) for c in self.pick_crowds(size)
        )
        return Campaign(
            id=cid,
            ad=AdId(cid + AD_OFFSET),
            status=CampaignStatus.ACTIVE,
            budget_remaining=self.budget(),
            targetings=targetings,
        )

    def emit(self, at: Timestamp, body: EventBody) -> MutationEvent:
        event = MutationEvent(self.seq, at, body)
        self.seq += 1
        return event


def _initial_events(world: _World) -> list[MutationEvent]:
    spec = world.spec
    at = spec.start
    events = []
    for i in range(1, spec.campaigns + 1):
        c = world.new_campaign(CampaignId(i))
        world.campaigns[c.id] = c
        events.append(world.emit(at, CampaignUpserted(c)))
    if spec.crowds:
        cap = min(spec.max_crowds_per_user, spec.crowds)
        for u in range(1, spec.users + 1):
            user = UserId(u)
            crowds = world.pick_crowds(world.zipf_count(spec.crowds_per_user_exponent, cap))
            world.user_crowds[user] = set(crowds)
            added = tuple((c, world.ctype(c)) for c in crowds)
            events.append(world.emit(at, UserCrowdsChanged(user, added=added)))
    return events


def _advertiser_event(world: _World, at: Timestamp) -> EventBody | None:
    rng = world.rng
    live = sorted(cid for cid, c in world.campaigns.items() if c.status is not CampaignStatus.CANCELED)
    roll = float(rng.random())
    if roll < 0.05 or not live:
        if world.spec.crowds == 0:
            return None
        cid = CampaignId(max(world.campaigns, default=0) + 1)
        c = world.new_campaign(cid)
        world.campaigns[cid] = c
        return CampaignUpserted(c)

    cid = live[int(rng.integers(len(live)))]
    c = world.campaigns[cid]
    if roll < 0.50 and c.targetings:
        t = c.targetings[int(rng.integers(len(c.targetings)))]
        bid = max(0.01, round(t.bid * float(rng.uniform(0.6, 1.6)), 2))
        world.campaigns[cid] = c.with_bid(t.crowd, bid)
        return BidChanged(cid, t.crowd, bid)
    if roll < 0.70:
        remaining = 0.0 if rng.random() < 0.2 else world.budget()
        world.campaigns[cid] = c.with_budget(remaining)
        return BudgetChanged(cid, remaining)
    if roll < 0.85:
        if rng.random() < 0.1:
            status = CampaignStatus.CANCELED
        elif c.status is CampaignStatus.ACTIVE:
            status = CampaignStatus.PAUSED
        else:
            status = CampaignStatus.ACTIVE
        world.campaigns[cid] = c.with_status(status)
        return CampaignStatusChanged(cid, status)

    # targeting edit: add a crowd, or drop one when there are several
    targeted = set(c.crowds())
    if len(targeted) > 1 and rng.random() < 0.4:
        gone = sorted(targeted)[int(rng.integers(len(targeted)))]
        targetings = tuple(t for t in c.targetings if t.crowd != gone)
    else:
        extra = world.pick_crowds(1, exclude=targeted)
        if not extra:
            return None
        targetings = c.targetings + (Targeting(extra[0], world.ctype(extra[0]), world.bid()),)
    new = Campaign(c.id, c.ad, c.status, c.budget_remaining, targetings)
    world.campaigns[cid] = new
    return CampaignUpserted(new)


def _user_event(world: _World) -> EventBody | None:
    rng = world.rng
    spec = world.spec
    user = UserId(int(rng.integers(1, spec.users + 1)))
    crowds = world.user_crowds.setdefault(user, set())
    if crowds and (rng.random() < 0.4 or len(crowds) >= min(spec.max_crowds_per_user, spec.crowds)):
        gone = sorted(crowds)[int(rng.integers(len(crowds)))]
        crowds.discard(gone)
        return UserCrowdsChanged(user, removed=(gone,))
    extra = world.pick_crowds(1, exclude=crowds)
    if not extra:
        return None
    crowds.add(extra[0])
    return UserCrowdsChanged(user, added=((extra[0], world.ctype(extra[0])),))


def _mutations(world: _World) -> list[MutationEvent]:
    spec = world.spec
    rng = world.rng
    events = []
    total_rate = spec.advertiser_events_per_day + spec.user_events_per_day
    if total_rate <= 0:
        return events
    advertiser_share = spec.advertiser_events_per_day / total_rate
    for day in range(spec.horizon_days):
        count = int(rng.poisson(total_rate))
        times = np.sort(rng.integers(day * DAY, (day + 1) * DAY, size=count))
        for at in times:
            at = int(at)
            if rng.random() < advertiser_share:
                body = _advertiser_event(world, at)
            else:
                body = _user_event(world) if spec.crowds else None
            if body is not None:
                events.append(world.emit(at, body))
    return events


def _traffic(spec: WorkloadSpec, rng: np.random.Generator) -> list[Visit]:
    f = spec.daily_active_fraction
    if f >= 1.0:
        propensity = np.ones(spec.users)
    else:
        propensity = rng.beta(2.0, 2.0 * (1.0 - f) / f, size=spec.users)
    extra_mean = spec.visits_per_user_per_day - 1.0
    raw: list[tuple[int, int]] = []
    for day in range(-spec.history_days, spec.horizon_days):
        active = np.nonzero(rng.random(spec.users) < propensity)[0]
        counts = 1 + rng.poisson(extra_mean, size=len(active))
        for idx, k in zip(active, counts):
            times = rng.integers(day * DAY, (day + 1) * DAY, size=int(k))
            raw.extend((int(t), int(idx) + 1) for t in times)
    raw.sort()
    return [Visit(seq, at, UserId(user)) for seq, (at, user) in enumerate(raw)]


def generate(spec: WorkloadSpec) -> tuple[list[MutationEvent], list[Visit]]:
    """Deterministic (event log, traffic log) for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)
    events = _initial_events(world)
    initial = len(events)
    events.extend(_mutations(world))
    visits = _traffic(spec, rng)
    logger.info(
        "generated seed=%d: %d events (%d initial), %d visits",
        spec.seed,
        len(events),
        initial,
        len(visits),
    )
    return events, visits


def workload_checksum(events: Sequence[MutationEvent], visits: Sequence[Visit]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for e in events:
        h.update(encode_event(e).encode("utf-8"))
        h.update(b"\n")
    h.update(b"\x00")
    for v in visits:
        h.update(encode_visit(v).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def crowd_sizes(events: Sequence[MutationEvent]) -> np.ndarray:
    """Member count per crowd after replaying the membership events."""
    members: dict[CrowdId, set[UserId]] = {}
    for e in events:
        body = e.body
        if isinstance(body, UserCrowdsChanged):
            for c in body.removed:
                members.get(c, set()).discard(body.user)
            for c, _ in body.added:
                members.setdefault(c, set()).add(body.user)
    return np.array(sorted((len(s) for s in members.values() if s), reverse=True), dtype=float)


def estimate_tail_exponent(sizes: np.ndarray, head: int = 1, tail: int | None = None) -> float:
    """Rank-size slope of a descending size array, fitted on log-log axes.

    ``head`` skips the saturated top ranks; ``tail`` bounds the fitted range.
    """
    sizes = np.asarray(sizes, dtype=float)
    sizes = sizes[sizes > 0]
    stop = len(sizes) if tail is None else min(tail, len(sizes))
    if stop - head < 2:
        raise ValueError("not enough ranks to fit")
    ranks = np.arange(head + 1, stop + 1, dtype=float)
    slope, _ = np.polyfit(np.log(ranks), np.log(sizes[head:stop]), 1)
    return float(-slope)
