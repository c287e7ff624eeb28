"""Targeting index: user -> crowds, crowd -> ads and crowd -> users.

All three maps are updated under one writer lock per ``apply`` so readers
never see a half-applied event, and every read returns a frozen copy of
the sets it touches.

Lifecycle rules: Active and Paused campaigns are listed in ``crowd_ads``;
a Canceled campaign is removed immediately. Pause and budget are validity
concerns checked at serving time.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .domain import (
    AdCrowdPair,
    AdId,
    Campaign,
    CampaignId,
    CampaignStatus,
    CrowdId,
    Targeting,
    TargetingType,
    UserId,
)
from .errors import ContractViolation, SnapshotIntegrityError, UnknownCampaignError
from .events import (
    BidChanged,
    BudgetChanged,
    CampaignStatusChanged,
    CampaignUpserted,
    MutationEvent,
    UserCrowdsChanged,
)
from .snapshot import Packer, Unpacker, decode_snapshot, encode_snapshot, require, write_file_atomic

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"TFMSIDX1"

_SEC_META = 1
_SEC_CAMPAIGNS = 2
_SEC_USER_CROWDS = 3
_SEC_CROWD_ADS = 4
_SEC_CROWD_USERS = 5
_SEC_CROWD_TYPES = 6

_TYPES = list(TargetingType)
_STATUSES = list(CampaignStatus)


@dataclass(frozen=True)
class IndexChange:
    """What one applied event did to O(u) for the users it reaches.

    ``upserted`` pairs are new or re-bid and must be (re)scored,
    ``removed`` pairs left every candidate set, ``invalidated`` pairs only
    changed validity (pause, budget).
    """

    version: int
    user: Optional[UserId] = None
    joined: tuple[CrowdId, ...] = ()
    left: tuple[CrowdId, ...] = ()
    upserted: tuple[AdCrowdPair, ...] = ()
    removed: tuple[AdCrowdPair, ...] = ()
    invalidated: tuple[AdCrowdPair, ...] = ()
    bid_decreases: tuple[AdCrowdPair, ...] = ()


@dataclass
class IndexStats:
    """Read counters; the serving path asserts these stay untouched."""

    crowds_of: int = 0
    ads_of: int = 0
    users_of: int = 0
    candidates: int = 0

    def total(self) -> int:
        return self.crowds_of + self.ads_of + self.users_of + self.candidates


@dataclass
class _Maps:
    campaigns: dict[CampaignId, Campaign] = field(default_factory=dict)
    ad_owner: dict[AdId, CampaignId] = field(default_factory=dict)
    user_crowds: dict[UserId, dict[CrowdId, TargetingType]] = field(default_factory=dict)
    crowd_ads: dict[CrowdId, dict[AdId, float]] = field(default_factory=dict)
    crowd_users: dict[CrowdId, set[UserId]] = field(default_factory=dict)
    # crowd -> (type, number of memberships and targetings referencing it)
    crowd_types: dict[CrowdId, tuple[TargetingType, int]] = field(default_factory=dict)


class TargetingIndex:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._m = _Maps()
        self._version = 0
        self.stats = IndexStats()
        self.last_change = IndexChange(version=0)

    @classmethod
    def replay(cls, events: Iterable[MutationEvent]) -> "TargetingIndex":
        index = cls()
        for event in sorted(events, key=lambda e: e.order):
            index.apply(event)
        return index

    # -- reads -------------------------------------------------------------

    @property
    def version(self) -> int:
        return self._version

    def crowds_of(self, user: UserId) -> frozenset[tuple[CrowdId, TargetingType]]:
        with self._lock:
            self.stats.crowds_of += 1
            return frozenset(self._m.user_crowds.get(user, {}).items())

    def ads_of(self, crowd: CrowdId) -> frozenset[tuple[AdId, float]]:
        with self._lock:
            self.stats.ads_of += 1
            return frozenset(self._m.crowd_ads.get(crowd, {}).items())

    def users_of(self, crowd: CrowdId) -> frozenset[UserId]:
        with self._lock:
            self.stats.users_of += 1
            return frozenset(self._m.crowd_users.get(crowd, ()))

    def candidates(self, user: UserId) -> frozenset[tuple[AdCrowdPair, float]]:
        """Exact O(u): the join of the user's crowds with each crowd's ads."""
        with self._lock:
            self.stats.candidates += 1
            out = []
            for crowd in self._m.user_crowds.get(user, {}):
                for ad, bid in self._m.crowd_ads.get(crowd, {}).items():
                    out.append((AdCrowdPair(ad, crowd), bid))
            return frozenset(out)

    def crowd_type(self, crowd: CrowdId) -> Optional[TargetingType]:
        with self._lock:
            entry = self._m.crowd_types.get(crowd)
            return entry[0] if entry else None

    def bid_of(self, pair: AdCrowdPair) -> Optional[float]:
        with self._lock:
            return self._m.crowd_ads.get(pair.crowd, {}).get(pair.ad)

    def is_member(self, user: UserId, crowd: CrowdId) -> bool:
        with self._lock:
            return crowd in self._m.user_crowds.get(user, {})

    def campaign(self, campaign_id: CampaignId) -> Optional[Campaign]:
        with self._lock:
            return self._m.campaigns.get(campaign_id)

    def campaign_of(self, ad: AdId) -> Optional[Campaign]:
        with self._lock:
            cid = self._m.ad_owner.get(ad)
            return self._m.campaigns.get(cid) if cid is not None else None

    def campaigns(self) -> list[Campaign]:
        with self._lock:
            return [self._m.campaigns[k] for k in sorted(self._m.campaigns)]

    def users(self) -> list[UserId]:
        with self._lock:
            return sorted(self._m.user_crowds)

    def crowds(self) -> list[CrowdId]:
        with self._lock:
            return sorted(self._m.crowd_types)

    # -- writes ------------------------------------------------------------

    def apply(self, event: MutationEvent) -> int:
        """Apply one event and return the new version.

        Events are validated completely before any map is touched, so a
        rejected event leaves the index (and its version) unchanged.
        """
        with self._lock:
            body = event.body
            if isinstance(body, UserCrowdsChanged):
                change = self._apply_user(body)
            elif isinstance(body, CampaignUpserted):
                change = self._apply_upsert(body.campaign)
            elif isinstance(body, CampaignStatusChanged):
                change = self._apply_status(body)
            elif isinstance(body, BidChanged):
                change = self._apply_bid(body)
            elif isinstance(body, BudgetChanged):
                change = self._apply_budget(body)
            else:
                raise ContractViolation(f"unknown_event: {type(body).__name__}")
            self._version += 1
            self.last_change = IndexChange(version=self._version, **change)
            logger.debug("applied seq=%d at=%d -> v%d", event.seq, event.at, self._version)
            return self._version

    def _check_type(self, crowd: CrowdId, t: TargetingType) -> None:
        entry = self._m.crowd_types.get(crowd)
        if entry is not None and entry[0] is not t:
            raise ContractViolation(
                f"crowd_type_conflict: crowd={crowd} has {entry[0].value}, got {t.value}"
            )

    def _ref(self, crowd: CrowdId, t: TargetingType) -> None:
        entry = self._m.crowd_types.get(crowd)
        self._m.crowd_types[crowd] = (t, 1) if entry is None else (entry[0], entry[1] + 1)

    def _unref(self, crowd: CrowdId) -> None:
        t, refs = self._m.crowd_types[crowd]
        if refs <= 1:
            del self._m.crowd_types[crowd]
        else:
            self._m.crowd_types[crowd] = (t, refs - 1)

    def _require(self, campaign_id: CampaignId) -> Campaign:
        c = self._m.campaigns.get(campaign_id)
        if c is None:
            raise UnknownCampaignError(f"unknown_campaign: {campaign_id}")
        return c

    def _apply_user(self, body: UserCrowdsChanged) -> dict:
        for crowd, t in body.added:
            self._check_type(crowd, t)
        m = self._m
        user = body.user
        crowds = m.user_crowds.setdefault(user, {})
        left: list[CrowdId] = []
        joined: list[CrowdId] = []
        for crowd in body.removed:
            if crowd in crowds:
                del crowds[crowd]
                members = m.crowd_users[crowd]
                members.discard(user)
                if not members:
                    del m.crowd_users[crowd]
                self._unref(crowd)
                left.append(crowd)
        for crowd, t in body.added:
            if crowd not in crowds:
                crowds[crowd] = t
                m.crowd_users.setdefault(crowd, set()).add(user)
                self._ref(crowd, t)
                joined.append(crowd)
        if not crowds:
            del m.user_crowds[user]
        return {"user": user, "joined": tuple(joined), "left": tuple(left)}

    def _index_pairs(self, c: Campaign) -> dict[AdCrowdPair, float]:
        if c.status is CampaignStatus.CANCELED:
            return {}
        return {AdCrowdPair(c.ad, t.crowd): t.bid for t in c.targetings}

    def _apply_upsert(self, new: Campaign) -> dict:
        m = self._m
        owner = m.ad_owner.get(new.ad)
        if owner is not None and owner != new.id:
            raise ContractViolation(f"ad_owned_elsewhere: ad={new.ad} owner={owner}")
        for t in new.targetings:
            self._check_type(t.crowd, t.type)
        old = m.campaigns.get(new.id)
        if old is not None and old.status is CampaignStatus.CANCELED:
            if new.status is not CampaignStatus.CANCELED:
                raise ContractViolation(f"campaign_canceled: {new.id}")

        before = self._index_pairs(old) if old is not None else {}
        if old is not None:
            for pair in before:
                self._drop_pair(pair)
            for t in old.targetings:
                self._unref(t.crowd)
            if old.ad != new.ad:
                del m.ad_owner[old.ad]
        m.campaigns[new.id] = new
        m.ad_owner[new.ad] = new.id
        for t in new.targetings:
            self._ref(t.crowd, t.type)
        after = self._index_pairs(new)
        for pair, bid in after.items():
            m.crowd_ads.setdefault(pair.crowd, {})[pair.ad] = bid

        upserted = sorted(p for p, b in after.items() if before.get(p) != b)
        removed = sorted(p for p in before if p not in after)
        decreases = sorted(p for p, b in after.items() if p in before and b < before[p])
        invalidated = sorted(after) if not new.servable else []
        return {
            "upserted": tuple(upserted),
            "removed": tuple(removed),
            "invalidated": tuple(invalidated),
            "bid_decreases": tuple(decreases),
        }

    def _drop_pair(self, pair: AdCrowdPair) -> None:
        ads = self._m.crowd_ads.get(pair.crowd)
        if ads is None:
            return
        ads.pop(pair.ad, None)
        if not ads:
            del self._m.crowd_ads[pair.crowd]

    def _apply_status(self, body: CampaignStatusChanged) -> dict:
        old = self._require(body.campaign)
        if old.status is CampaignStatus.CANCELED and body.status is not CampaignStatus.CANCELED:
            raise ContractViolation(f"campaign_canceled: {old.id}")
        new = old.with_status(body.status)
        self._m.campaigns[new.id] = new
        pairs = tuple(sorted(self._index_pairs(old)))
        if body.status is CampaignStatus.CANCELED:
            for pair in pairs:
                self._drop_pair(pair)
            return {"removed": pairs}
        if body.status is CampaignStatus.PAUSED:
            return {"invalidated": pairs}
        return {}

    def _apply_bid(self, body: BidChanged) -> dict:
        old = self._require(body.campaign)
        new = old.with_bid(body.crowd, body.bid)
        previous = old.targeting_for(body.crowd)
        assert previous is not None
        self._m.campaigns[new.id] = new
        if old.status is CampaignStatus.CANCELED:
            return {}
        pair = AdCrowdPair(new.ad, body.crowd)
        self._m.crowd_ads.setdefault(body.crowd, {})[new.ad] = body.bid
        decreases = (pair,) if body.bid < previous.bid else ()
        return {"upserted": (pair,), "bid_decreases": decreases}

    def _apply_budget(self, body: BudgetChanged) -> dict:
        old = self._require(body.campaign)
        new = old.with_budget(body.remaining)
        self._m.campaigns[new.id] = new
        if new.servable:
            return {}
        return {"invalidated": tuple(sorted(self._index_pairs(new)))}

    # -- consistency -------------------------------------------------------

    def check_consistency(self) -> None:
        """Full-scan check of every cross-map invariant; raises on violation."""
        with self._lock:
            _check_maps(self._m, ContractViolation)

    def canonical_state(self) -> tuple:
        """Everything but the version, in a comparable canonical form."""
        with self._lock:
            m = self._m
            return (
                tuple(m.campaigns[k] for k in sorted(m.campaigns)),
                tuple((u, tuple(sorted(cs.items()))) for u, cs in sorted(m.user_crowds.items())),
                tuple((c, tuple(sorted(a.items()))) for c, a in sorted(m.crowd_ads.items())),
                tuple((c, tuple(sorted(us))) for c, us in sorted(m.crowd_users.items())),
                tuple(sorted(m.crowd_types.items())),
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TargetingIndex):
            return NotImplemented
        return self._version == other._version and self.canonical_state() == other.canonical_state()

    __hash__ = None  # type: ignore[assignment]

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        with self._lock:
            m = self._m
            meta = Packer().u64(self._version)

            camps = Packer().u32(len(m.campaigns))
            for cid in sorted(m.campaigns):
                c = m.campaigns[cid]
                camps.u64(c.id).u64(c.ad).u8(_STATUSES.index(c.status)).f64(c.budget_remaining)
                camps.u32(len(c.targetings))
                for t in c.targetings:
                    camps.u64(t.crowd).u8(_TYPES.index(t.type)).f64(t.bid)

            uc = Packer().u32(len(m.user_crowds))
            for user in sorted(m.user_crowds):
                crowds = m.user_crowds[user]
                uc.u64(user).u32(len(crowds))
                for crowd in sorted(crowds):
                    uc.u64(crowd).u8(_TYPES.index(crowds[crowd]))

            ca = Packer().u32(len(m.crowd_ads))
            for crowd in sorted(m.crowd_ads):
                ads = m.crowd_ads[crowd]
                ca.u64(crowd).u32(len(ads))
                for ad in sorted(ads):
                    ca.u64(ad).f64(ads[ad])

            cu = Packer().u32(len(m.crowd_users))
            for crowd in sorted(m.crowd_users):
                users = m.crowd_users[crowd]
                cu.u64(crowd).u32(len(users))
                for user in sorted(users):
                    cu.u64(user)

            ct = Packer().u32(len(m.crowd_types))
            for crowd in sorted(m.crowd_types):
                t, refs = m.crowd_types[crowd]
                ct.u64(crowd).u8(_TYPES.index(t)).u32(refs)

            return encode_snapshot(
                INDEX_MAGIC,
                [
                    (_SEC_META, meta.getvalue()),
                    (_SEC_CAMPAIGNS, camps.getvalue()),
                    (_SEC_USER_CROWDS, uc.getvalue()),
                    (_SEC_CROWD_ADS, ca.getvalue()),
                    (_SEC_CROWD_USERS, cu.getvalue()),
                    (_SEC_CROWD_TYPES, ct.getvalue()),
                ],
            )

    def snapshot(self, path: Path) -> None:
        data = self.to_bytes()
        write_file_atomic(Path(path), data)
        logger.info("index snapshot v%d written to %s (%d bytes)", self._version, path, len(data))

    @classmethod
    def from_bytes(cls, data: bytes) -> "TargetingIndex":
        sections = decode_snapshot(INDEX_MAGIC, data)
        try:
            return cls._from_sections(sections)
        except (IndexError, ValueError, ContractViolation) as e:
            raise SnapshotIntegrityError(f"bad_section_content: {e}") from e

    @classmethod
    def _from_sections(cls, sections: dict[int, bytes]) -> "TargetingIndex":
        m = _Maps()

        r = Unpacker(require(sections, _SEC_META, "meta"), "meta")
        version = r.u64()
        r.done()

        r = Unpacker(require(sections, _SEC_CAMPAIGNS, "campaigns"), "campaigns")
        for _ in range(r.u32()):
            cid, ad, status, budget = r.u64(), r.u64(), _STATUSES[r.u8()], r.f64()
            targetings = tuple(
                Targeting(CrowdId(r.u64()), _TYPES[r.u8()], r.f64()) for _ in range(r.u32())
            )
            c = Campaign(CampaignId(cid), AdId(ad), status, budget, targetings)
            m.campaigns[c.id] = c
            m.ad_owner[c.ad] = c.id
        r.done()

        r = Unpacker(require(sections, _SEC_USER_CROWDS, "user_crowds"), "user_crowds")
        for _ in range(r.u32()):
            user = UserId(r.u64())
            m.user_crowds[user] = {CrowdId(r.u64()): _TYPES[r.u8()] for _ in range(r.u32())}
        r.done()

        r = Unpacker(require(sections, _SEC_CROWD_ADS, "crowd_ads"), "crowd_ads")
        for _ in range(r.u32()):
            crowd = CrowdId(r.u64())
            m.crowd_ads[crowd] = {AdId(r.u64()): r.f64() for _ in range(r.u32())}
        r.done()

        r = Unpacker(require(sections, _SEC_CROWD_USERS, "crowd_users"), "crowd_users")
        for _ in range(r.u32()):
            crowd = CrowdId(r.u64())
            m.crowd_users[crowd] = {UserId(r.u64()) for _ in range(r.u32())}
        r.done()

        r = Unpacker(require(sections, _SEC_CROWD_TYPES, "crowd_types"), "crowd_types")
        for _ in range(r.u32()):
            crowd = CrowdId(r.u64())
            m.crowd_types[crowd] = (_TYPES[r.u8()], r.u32())
        r.done()

        _check_maps(m)
        index = cls()
        index._m = m
        index._version = version
        index.last_change = IndexChange(version=version)
        return index

    @classmethod
    def load(cls, path: Path) -> "TargetingIndex":
        with open(path, "rb") as fh:
            data = fh.read()
        index = cls.from_bytes(data)
        logger.info("index snapshot v%d loaded from %s", index.version, path)
        return index


def _check_maps(m: _Maps, error: type[Exception] = SnapshotIntegrityError) -> None:
    """Recompute the derived maps from campaigns and memberships and compare."""

    def fail(what: str) -> None:
        raise error(f"inconsistent_maps: {what}")

    crowd_users: dict[CrowdId, set[UserId]] = {}
    refs: dict[CrowdId, tuple[TargetingType, int]] = {}

    def ref(crowd: CrowdId, t: TargetingType) -> None:
        entry = refs.get(crowd)
        if entry is not None and entry[0] is not t:
            fail(f"crowd {crowd} has two types")
        refs[crowd] = (t, 1 if entry is None else entry[1] + 1)

    for user, crowds in m.user_crowds.items():
        if not crowds:
            fail(f"user {user} has an empty crowd set")
        for crowd, t in crowds.items():
            crowd_users.setdefault(crowd, set()).add(user)
            ref(crowd, t)
    crowd_ads: dict[CrowdId, dict[AdId, float]] = {}
    for c in m.campaigns.values():
        if m.ad_owner.get(c.ad) != c.id:
            fail(f"ad {c.ad} owner")
        for t in c.targetings:
            ref(t.crowd, t.type)
            if c.status is not CampaignStatus.CANCELED:
                crowd_ads.setdefault(t.crowd, {})[c.ad] = t.bid
    if crowd_users != m.crowd_users:
        fail("crowd_users is not the inverse of user_crowds")
    if crowd_ads != m.crowd_ads:
        fail("crowd_ads disagrees with campaign targetings")
    if refs != m.crowd_types:
        fail("crowd type registry")
