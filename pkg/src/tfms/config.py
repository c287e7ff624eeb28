"""INI run configs and workload spec files."""

from __future__ import annotations

import configparser
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

from .baseline import DEFAULT_K, DEFAULT_M, DEFAULT_N, TruncationConfig
from .domain import DAY
from .errors import ConfigError, TfmsError
from .harness import MATCHERS, TfmsConfig
from .workload import WorkloadSpec

logger = logging.getLogger(__name__)

UNBOUNDED = "unbounded"

# section -> keys, in file order
_LAYOUT: dict[str, tuple[str, ...]] = {
    "paths": ("workload", "out"),
    "run": ("matchers", "seed"),
    "truncation": ("m", "k", "n"),
    "tfms": ("topn", "window_mins", "lookback_days", "fallback", "parallelism"),
}


@dataclass(frozen=True)
class RunConfig:
    workload: Path = Path("workload")
    out: Path = Path("out")
    matchers: tuple[str, ...] = MATCHERS
    seed: int = 0
    m: Optional[int] = DEFAULT_M
    k: Optional[int] = DEFAULT_K
    n: int = DEFAULT_N
    topn: int = DEFAULT_N
    window_mins: int = 5
    lookback_days: int = 1
    fallback: bool = True
    parallelism: int = 1

    def __post_init__(self) -> None:
        unknown = [m for m in self.matchers if m not in MATCHERS]
        if unknown or not self.matchers:
            raise ConfigError(f"bad_value: matchers={','.join(self.matchers)}")
        if self.window_mins < 0 or self.lookback_days < 0:
            raise ConfigError("bad_value: window_mins and lookback_days must be >= 0")
        try:
            self.truncation()
            self.tfms()
        except TfmsError as e:
            raise ConfigError(f"bad_value: {e}") from e

    def truncation(self) -> TruncationConfig:
        return TruncationConfig(m=self.m, k=self.k, n=self.n)

    def tfms(self) -> TfmsConfig:
        return TfmsConfig(
            topn=self.topn,
            window=self.window_mins * 60,
            lookback=self.lookback_days * DAY,
            fallback=self.fallback,
            parallelism=self.parallelism,
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with every non-None override applied (CLI flags)."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in _LAYOUT.items():
            parser[section] = {key: _format(getattr(self, key)) for key in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = _parse(text, source)
        values: dict[str, Any] = {}
        for section in parser.sections():
            if section not in _LAYOUT:
                raise ConfigError(f"unknown_section: [{section}] in {source}")
            for key, raw in parser[section].items():
                if key not in _LAYOUT[section]:
                    raise ConfigError(f"unknown_key: {section}.{key} in {source}")
                values[key] = _convert(key, raw, source)
        return cls(**values)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        config = cls.from_text(path.read_text(encoding="utf-8"), str(path))
        # relative paths in a config file are relative to the file
        base = path.parent
        return replace(
            config,
            workload=config.workload if config.workload.is_absolute() else base / config.workload,
            out=config.out if config.out.is_absolute() else base / config.out,
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format(value: Any) -> str:
    if value is None:
        return UNBOUNDED
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _parse(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"bad_config: {source}: {e}") from e
    if parser.defaults():
        raise ConfigError(f"unknown_section: [{parser.default_section}] in {source}")
    return parser


def _convert(key: str, raw: str, source: str) -> Any:
    raw = raw.strip()
    try:
        if key in ("workload", "out"):
            return Path(raw)
        if key == "matchers":
            return tuple(m.strip() for m in raw.split(",") if m.strip())
        if key in ("m", "k") and raw.lower() == UNBOUNDED:
            return None
        if key == "fallback":
            return _boolean(raw)
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"bad_value: {key}={raw!r} in {source}") from e


def _boolean(raw: str) -> bool:
    states = configparser.ConfigParser.BOOLEAN_STATES
    if raw.lower() not in states:
        raise ValueError(raw)
    return states[raw.lower()]


def load_workload_spec(path: Path) -> WorkloadSpec:
    """Read a ``[workload]`` INI section into a validated WorkloadSpec."""
    path = Path(path)
    return workload_spec_from_text(path.read_text(encoding="utf-8"), str(path))


def workload_spec_from_text(text: str, source: str = "<spec>") -> WorkloadSpec:
    parser = _parse(text, source)
    extra = [s for s in parser.sections() if s != "workload"]
    if extra:
        raise ConfigError(f"unknown_section: [{extra[0]}] in {source}")
    if not parser.has_section("workload"):
        raise ConfigError(f"missing_section: [workload] in {source}")
    defaults = WorkloadSpec()
    known = set(WorkloadSpec.field_names())
    values: dict[str, Any] = {}
    for key, raw in parser["workload"].items():
        if key not in known:
            raise ConfigError(f"unknown_key: workload.{key} in {source}")
        kind = type(getattr(defaults, key))
        try:
            values[key] = kind(raw.strip())
        except ValueError as e:
            raise ConfigError(f"bad_value: {key}={raw!r} in {source}") from e
    spec = WorkloadSpec(**values)
    spec.validate()
    logger.debug("workload spec from %s: %s", source, spec)
    return spec


def workload_spec_to_text(spec: WorkloadSpec) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["workload"] = {name: str(getattr(spec, name)) for name in WorkloadSpec.field_names()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
