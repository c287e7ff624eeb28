"""Simulation reports: JSON and CSV writers, and report comparison.

JSON is written with sorted keys and a fixed indent so identical runs give
byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .domain import TargetingType
from .errors import ReportFormatError, ReportMismatchError

logger = logging.getLogger(__name__)

TYPE_NAMES = [t.value for t in TargetingType]


def summarize(samples: Sequence[float]) -> dict[str, float]:
    """count/mean/p50/p90/p99/max of a sample; zeros for an empty one."""
    if len(samples) == 0:
        return {"count": 0, "mean": 0.0, "p50": 0.0, "p90": 0.0, "p99": 0.0, "max": 0.0}
    arr = np.asarray(samples, dtype=float)
    p50, p90, p99 = np.percentile(arr, [50, 90, 99])
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "p50": float(p50),
        "p90": float(p90),
        "p99": float(p99),
        "max": float(arr.max()),
    }


@dataclass
class NearlineStats:
    full_updates: int = 0
    active_user_refreshes: int = 0
    full_pairs_scored: int = 0
    delta_pairs_scored: int = 0
    flushes: int = 0
    delta_users_updated: int = 0
    delta_skipped_uncached: int = 0
    pairs_removed: int = 0
    pairs_evicted: int = 0
    downward_evictions: int = 0
    invalidations: int = 0
    cache_misses: int = 0
    fallback_requests: int = 0
    # cached pairs read on hits; fallback scoring is not included
    fetch_pairs: int = 0
    dropped_invalid: int = 0
    active_coverage: float = 0.0
    shortfall: dict[str, float] = field(default_factory=lambda: summarize([]))
    staleness: dict[str, float] = field(default_factory=lambda: summarize([]))


@dataclass
class MatcherReport:
    name: str
    requests: int = 0
    impressions: int = 0
    revenue: float = 0.0
    rpm: float = 0.0
    # expected clicks; pctr is clicks per request and ppc revenue per click,
    # so rpm == 1000 * pctr * ppc
    clicks: float = 0.0
    pctr: float = 0.0
    ppc: float = 0.0
    pairs_scored: int = 0
    user_crowd_pairs: int = 0
    pairs_per_request: float = 0.0
    recall_at_n: float = 0.0
    recall_requests: int = 0
    truncated_user_crowd_pct: Optional[float] = None
    truncated_crowd_ad_pct: Optional[float] = None
    truncation_by_type: dict[str, dict[str, float]] = field(default_factory=dict)
    winning_impressions: dict[str, int] = field(
        default_factory=lambda: {name: 0 for name in TYPE_NAMES}
    )
    nearline: Optional[NearlineStats] = None

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MatcherReport":
        d = dict(d)
        nearline = d.pop("nearline", None)
        report = cls(**d)
        if nearline is not None:
            report.nearline = NearlineStats(**nearline)
        return report


@dataclass
class CostTable:
    """Pair-count computation cost, absolute and relative to the truncated base."""

    requests: int
    active_users: float
    avg_visits: float
    base: float
    online_parallel: float
    tfms_full: float
    tfms_full_measured: Optional[float] = None
    tfms_delta: Optional[float] = None

    def relative(self) -> dict[str, Optional[float]]:
        def rel(v: Optional[float]) -> Optional[float]:
            if v is None:
                return None
            return v / self.base if self.base else 0.0

        total = None
        if self.tfms_delta is not None:
            total = rel(self.tfms_full + self.tfms_delta)
        return {
            "base": 1.0,
            "online_parallel": rel(self.online_parallel),
            "tfms_full": rel(self.tfms_full),
            "tfms_full_measured": rel(self.tfms_full_measured),
            "tfms_delta": rel(self.tfms_delta),
            "tfms_total": total,
        }

    @property
    def identity_ratio(self) -> Optional[float]:
        """Measured fully-update work over online_parallel work."""
        if self.tfms_full_measured is None or not self.online_parallel:
            return None
        return self.tfms_full_measured / self.online_parallel

    @property
    def identity_error(self) -> Optional[float]:
        """Relative gap between the measured ratio and 1 / avg_visits."""
        ratio = self.identity_ratio
        if ratio is None:
            return None
        expected = 1.0 / self.avg_visits
        return abs(ratio - expected) / expected

    def identity_holds(self, tolerance: float = 0.01) -> bool:
        error = self.identity_error
        return error is not None and error <= tolerance

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["relative"] = self.relative()
        d["identity_ratio"] = self.identity_ratio
        d["identity_error"] = self.identity_error
        return d


@dataclass
class SimReport:
    workload_checksum: str
    seed: int
    truncation: dict[str, Optional[int]]
    tfms: dict[str, Any]
    requests: int
    matchers: dict[str, MatcherReport]
    cost: Optional[CostTable] = None

    def comparison(self, baseline: str = "truncated") -> dict[str, dict[str, Optional[float]]]:
        if baseline not in self.matchers:
            return {}
        base = self.matchers[baseline]
        return {
            name: matcher_deltas(base, m)
            for name, m in sorted(self.matchers.items())
            if name != baseline
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "workload_checksum": self.workload_checksum,
            "seed": self.seed,
            "truncation": self.truncation,
            "tfms": self.tfms,
            "requests": self.requests,
            "matchers": {name: asdict(m) for name, m in sorted(self.matchers.items())},
            "cost": self.cost.as_dict() if self.cost is not None else None,
            "comparison": self.comparison(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimReport":
        cost = d.get("cost")
        if cost is not None:
            derived = ("relative", "identity_ratio", "identity_error")
            cost = {k: v for k, v in cost.items() if k not in derived}
        return cls(
            workload_checksum=d["workload_checksum"],
            seed=d["seed"],
            truncation=d["truncation"],
            tfms=d["tfms"],
            requests=d["requests"],
            matchers={k: MatcherReport.from_dict(v) for k, v in d["matchers"].items()},
            cost=CostTable(**cost) if cost is not None else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[tuple[str, str, Any]]:
        rows: list[tuple[str, str, Any]] = []
        for name, m in sorted(self.matchers.items()):
            rows.extend((name, metric, value) for metric, value in _flatten(asdict(m)))
        if self.cost is not None:
            rows.extend(("cost", metric, value) for metric, value in _flatten(self.cost.as_dict()))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["matcher", "metric", "value"])
        writer.writerows(self.csv_rows())
        return buf.getvalue()

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "report.json"
        csv_path = out_dir / "report.csv"
        json_path.write_text(self.to_json(), encoding="utf-8")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        logger.info("report written to %s and %s", json_path, csv_path)
        return json_path, csv_path

    @classmethod
    def read(cls, path: Path) -> "SimReport":
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            return cls.from_dict(json.loads(raw.decode("utf-8")))
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise ReportFormatError(f"bad_report: {path}: {e!r}") from e


def _flatten(d: dict[str, Any], prefix: str = "") -> Iterable[tuple[str, Any]]:
    for key in sorted(d):
        value = d[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, name + ".")
        elif key != "name":
            yield name, value


def _rel(a: float, b: float) -> Optional[float]:
    """Relative change of b against a in percent; None when a is 0 and b is not."""
    if a == b:
        return 0.0
    if a == 0:
        return None
    return 100.0 * (b - a) / a


def matcher_deltas(a: MatcherReport, b: MatcherReport) -> dict[str, Optional[float]]:
    deltas: dict[str, Optional[float]] = {
        "rpm_pct": _rel(a.rpm, b.rpm),
        "pctr_pct": _rel(a.pctr, b.pctr),
        "ppc_pct": _rel(a.ppc, b.ppc),
        "pairs_scored_pct": _rel(a.pairs_scored, b.pairs_scored),
        "user_crowd_pairs_pct": _rel(a.user_crowd_pairs, b.user_crowd_pairs),
        "recall_at_n_diff": b.recall_at_n - a.recall_at_n,
        "impressions_pct": _rel(a.impressions, b.impressions),
    }
    for t in TYPE_NAMES:
        deltas[f"winning_impressions.{t}_pct"] = _rel(
            a.winning_impressions.get(t, 0), b.winning_impressions.get(t, 0)
        )
    return deltas


def compare(a: SimReport, b: SimReport) -> dict[str, dict[str, Optional[float]]]:
    """Deltas of B against A.

    When each report holds a single matcher the two are compared directly
    (e.g. an oracle-only run against a truncated-only run); otherwise every
    matcher present in both is compared with its namesake.
    """
    if a.workload_checksum != b.workload_checksum:
        raise ReportMismatchError(
            f"workload_mismatch: {a.workload_checksum} != {b.workload_checksum}"
        )
    if len(a.matchers) == 1 and len(b.matchers) == 1:
        (na, ma), (nb, mb) = next(iter(a.matchers.items())), next(iter(b.matchers.items()))
        label = na if na == nb else f"{na}->{nb}"
        return {label: matcher_deltas(ma, mb)}
    common = sorted(set(a.matchers) & set(b.matchers))
    if not common:
        raise ReportMismatchError("no_common_matchers")
    return {name: matcher_deltas(a.matchers[name], b.matchers[name]) for name in common}


def format_table(deltas: dict[str, dict[str, Optional[float]]]) -> str:
    metrics = sorted({metric for row in deltas.values() for metric in row})
    lines = ["\t".join(["matcher"] + metrics)]
    for name, row in deltas.items():
        cells = [name]
        for metric in metrics:
            v = row.get(metric)
            cells.append("n/a" if v is None else f"{v:+.2f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
