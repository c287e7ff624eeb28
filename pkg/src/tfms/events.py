"""Mutation and traffic events plus their line-delimited JSON codec.

One record per line: ``{"seq", "at", "kind", "payload"}``. Records are
written with sorted keys and compact separators so the same log always
serializes to the same bytes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Union

from .domain import (
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
from .errors import LogFormatError, TfmsError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UserCrowdsChanged:
    user: UserId
    added: tuple[tuple[CrowdId, TargetingType], ...] = ()
    removed: tuple[CrowdId, ...] = ()


@dataclass(frozen=True)
class CampaignUpserted:
    campaign: Campaign


@dataclass(frozen=True)
class CampaignStatusChanged:
    campaign: CampaignId
    status: CampaignStatus


@dataclass(frozen=True)
class BidChanged:
    campaign: CampaignId
    crowd: CrowdId
    bid: float


@dataclass(frozen=True)
class BudgetChanged:
    campaign: CampaignId
    remaining: float


EventBody = Union[
    UserCrowdsChanged, CampaignUpserted, CampaignStatusChanged, BidChanged, BudgetChanged
]


@dataclass(frozen=True)
class MutationEvent:
    seq: int
    at: Timestamp
    body: EventBody

    @property
    def order(self) -> tuple[int, int]:
        return (self.at, self.seq)


@dataclass(frozen=True)
class Visit:
    seq: int
    at: Timestamp
    user: UserId


_KINDS = {
    UserCrowdsChanged: "user_crowds",
    CampaignUpserted: "campaign_upsert",
    CampaignStatusChanged: "campaign_status",
    BidChanged: "bid",
    BudgetChanged: "budget",
}


def kind_of(body: EventBody) -> str:
    return _KINDS[type(body)]


def _campaign_to_dict(c: Campaign) -> dict:
    return {
        "id": c.id,
        "ad": c.ad,
        "status": c.status.value,
        "budget": c.budget_remaining,
        "targetings": [[t.crowd, t.type.value, t.bid] for t in c.targetings],
    }


def _campaign_from_dict(d: dict) -> Campaign:
    return Campaign(
        id=CampaignId(int(d["id"])),
        ad=AdId(int(d["ad"])),
        status=CampaignStatus(d["status"]),
        budget_remaining=float(d["budget"]),
        targetings=tuple(
            Targeting(CrowdId(int(c)), TargetingType(t), float(b)) for c, t, b in d["targetings"]
        ),
    )


def _payload(body: EventBody) -> dict:
    if isinstance(body, UserCrowdsChanged):
        return {
            "user": body.user,
            "added": [[c, t.value] for c, t in body.added],
            "removed": list(body.removed),
        }
    if isinstance(body, CampaignUpserted):
        return _campaign_to_dict(body.campaign)
    if isinstance(body, CampaignStatusChanged):
        return {"campaign": body.campaign, "status": body.status.value}
    if isinstance(body, BidChanged):
        return {"campaign": body.campaign, "crowd": body.crowd, "bid": body.bid}
    if isinstance(body, BudgetChanged):
        return {"campaign": body.campaign, "remaining": body.remaining}
    raise TypeError(f"unsupported event body {type(body).__name__}")


def _body(kind: str, p: dict) -> EventBody:
    if kind == "user_crowds":
        return UserCrowdsChanged(
            user=UserId(int(p["user"])),
            added=tuple((CrowdId(int(c)), TargetingType(t)) for c, t in p["added"]),
            removed=tuple(CrowdId(int(c)) for c in p["removed"]),
        )
    if kind == "campaign_upsert":
        return CampaignUpserted(_campaign_from_dict(p))
    if kind == "campaign_status":
        return CampaignStatusChanged(CampaignId(int(p["campaign"])), CampaignStatus(p["status"]))
    if kind == "bid":
        return BidChanged(
            CampaignId(int(p["campaign"])), CrowdId(int(p["crowd"])), float(p["bid"])
        )
    if kind == "budget":
        return BudgetChanged(CampaignId(int(p["campaign"])), float(p["remaining"]))
    raise KeyError(kind)


def encode_event(event: MutationEvent) -> str:
    record = {
        "seq": event.seq,
        "at": event.at,
        "kind": kind_of(event.body),
        "payload": _payload(event.body),
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def encode_visit(visit: Visit) -> str:
    record = {"seq": visit.seq, "at": visit.at, "kind": "visit", "payload": {"user": visit.user}}
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _parse_lines(lines: Iterable[str], source: str) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            _ = record["seq"], record["at"], record["kind"], record["payload"]
        except (ValueError, KeyError, TypeError) as e:
            raise LogFormatError(f"bad_record: {source}:{lineno}: {e}") from e
        yield lineno, record


def decode_events(lines: Iterable[str], source: str = "<events>") -> list[MutationEvent]:
    events: list[MutationEvent] = []
    for lineno, r in _parse_lines(lines, source):
        try:
            body = _body(r["kind"], r["payload"])
            events.append(MutationEvent(int(r["seq"]), int(r["at"]), body))
        except (ValueError, KeyError, TypeError, TfmsError) as e:
            raise LogFormatError(f"bad_event: {source}:{lineno}: {e!r}") from e
    return events


def decode_visits(lines: Iterable[str], source: str = "<traffic>") -> list[Visit]:
    visits: list[Visit] = []
    for lineno, r in _parse_lines(lines, source):
        if r["kind"] != "visit":
            raise LogFormatError(f"bad_visit: {source}:{lineno}: kind={r['kind']!r}")
        try:
            visits.append(Visit(int(r["seq"]), int(r["at"]), UserId(int(r["payload"]["user"]))))
        except (ValueError, KeyError, TypeError) as e:
            raise LogFormatError(f"bad_visit: {source}:{lineno}: {e!r}") from e
    return visits


def write_lines(fh: IO[str], lines: Iterable[str]) -> None:
    for line in lines:
        fh.write(line)
        fh.write("\n")


def write_events(path: Path, events: Iterable[MutationEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_lines(fh, (encode_event(e) for e in events))


def write_visits(path: Path, visits: Iterable[Visit]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_lines(fh, (encode_visit(v) for v in visits))


def _decoded(fh: IO[bytes], source: str) -> Iterator[str]:
    for lineno, raw in enumerate(fh, start=1):
        try:
            yield raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise LogFormatError(f"bad_encoding: {source}:{lineno}: {e.reason}") from e


def read_events(path: Path) -> list[MutationEvent]:
    with open(path, "rb") as fh:
        events = decode_events(_decoded(fh, str(path)), str(path))
    logger.debug("read %d events from %s", len(events), path)
    return events


def read_visits(path: Path) -> list[Visit]:
    with open(path, "rb") as fh:
        visits = decode_visits(_decoded(fh, str(path)), str(path))
    logger.debug("read %d visits from %s", len(visits), path)
    return visits
