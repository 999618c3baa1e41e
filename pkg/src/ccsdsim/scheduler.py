"""Temperature-aware placement of (de)compression work.

Every request is routed from a cached temperature reading that is refreshed
only by :meth:`Scheduler.poll`.  Three temperature bands exist:

* below ``t_soft``: everything runs on the device,
* ``t_soft <= T < t_hard`` (regulation): decompression moves to the host
  under the space-oriented variant,
* ``T >= t_hard`` (guard): compression moves to the host, or is skipped by
  the performance-oriented variant.

The routing functions are pure; :class:`Scheduler` only adds the polling
cache, the incompressible-data filter and the frequency-based selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, Optional

import numpy as np

from .device import Device, Mode, Origin
from .hostfs import CompressionRoute

__all__ = [
    "Scheme",
    "PolicyConfig",
    "RouteDecision",
    "compression_target",
    "decompression_target",
    "route_compression",
    "route_decompression",
    "FpcSelector",
    "DEFAULT_FILE_TYPES",
    "Scheduler",
]


class Scheme(str, Enum):
    BASELINE = "Baseline"
    F2FSC = "F2FSC"
    FPC = "FPC"
    TCS = "TCS"
    WALTZS = "Waltzs"
    WALTZP = "Waltzp"

    @classmethod
    def parse(cls, name: "str | Scheme") -> "Scheme":
        if isinstance(name, Scheme):
            return name
        for s in cls:
            if s.value.lower() == str(name).lower():
                return s
        raise ValueError(f"unknown scheme {name!r}; choose from {', '.join(s.value for s in cls)}")


# schemes that honour the incompressible label
FILTERING_SCHEMES = frozenset({Scheme.FPC, Scheme.TCS, Scheme.WALTZS, Scheme.WALTZP})
# schemes that run the reserved-space arbiter by default
OSA_SCHEMES = frozenset({Scheme.WALTZS, Scheme.WALTZP})


@dataclass(frozen=True)
class PolicyConfig:
    scheme: Scheme = Scheme.BASELINE
    t_soft: float = 76.0
    t_hard: float = 85.0
    t_emergency: float = 86.0
    poll_interval: float = 1.0
    burst_slope: Optional[float] = None  # °C/s that halves the poll interval

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if not self.t_soft < self.t_hard < self.t_emergency:
            raise ValueError("need t_soft < t_hard < t_emergency")
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be > 0")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "t_soft": self.t_soft,
            "t_hard": self.t_hard,
            "t_emergency": self.t_emergency,
            "poll_interval": self.poll_interval,
            "burst_slope": self.burst_slope,
        }


@dataclass(frozen=True)
class RouteDecision:
    compression: CompressionRoute
    decompression: CompressionRoute  # DEVICE or HOST


def compression_target(
    temp: float, scheme: Scheme, t_soft: float, t_hard: float, selected: bool = False
) -> CompressionRoute:
    """Where a compressible write is compressed.  ``selected`` is the FPC predicate."""
    if scheme is Scheme.BASELINE:
        return CompressionRoute.DEVICE
    if scheme is Scheme.F2FSC:
        return CompressionRoute.HOST
    if scheme is Scheme.FPC:
        return CompressionRoute.HOST if selected else CompressionRoute.DEVICE
    if temp < t_hard:
        return CompressionRoute.DEVICE
    return CompressionRoute.SKIP if scheme is Scheme.WALTZP else CompressionRoute.HOST


def decompression_target(
    temp: float, scheme: Scheme, t_soft: float, t_hard: float, origin: Origin
) -> CompressionRoute:
    """Where previously compressed data is decompressed."""
    if origin is Origin.HOST or scheme is Scheme.F2FSC:
        return CompressionRoute.HOST
    if scheme in (Scheme.BASELINE, Scheme.FPC):
        return CompressionRoute.DEVICE
    limit = t_hard if scheme is Scheme.WALTZP else t_soft
    return CompressionRoute.DEVICE if temp < limit else CompressionRoute.HOST


def route_compression(temp: float, policy: PolicyConfig, selected: bool = False) -> CompressionRoute:
    return compression_target(temp, policy.scheme, policy.t_soft, policy.t_hard, selected)


def route_decompression(temp: float, policy: PolicyConfig, origin: Origin) -> CompressionRoute:
    return decompression_target(temp, policy.scheme, policy.t_soft, policy.t_hard, origin)


DEFAULT_FILE_TYPES: Mapping[str, str] = {
    "text": "host",
    "log": "host",
    "html": "host",
    "mail": "host",
    "video": "incompressible",
    "image": "incompressible",
    "archive": "incompressible",
}


class FpcSelector:
    """File-type table plus an access-frequency hot set.

    A block is hot when its access count is strictly above the
    ``hot_percentile`` of all tracked counts.  The percentile is refreshed
    every ``refresh_every`` observations so decisions stay cheap.
    """

    def __init__(
        self,
        table: Mapping[str, str] | None = None,
        hot_percentile: float = 90.0,
        refresh_every: int = 256,
    ) -> None:
        self.table = dict(DEFAULT_FILE_TYPES if table is None else table)
        for v in self.table.values():
            if v not in ("host", "device", "incompressible"):
                raise ValueError(f"bad file-type route {v!r}")
        self.hot_percentile = hot_percentile
        self.refresh_every = refresh_every
        self.counts: Dict[int, int] = {}
        self.threshold = math.inf
        self._seen = 0

    def observe(self, key: int) -> int:
        c = self.counts.get(key, 0) + 1
        self.counts[key] = c
        self._seen += 1
        if self._seen % self.refresh_every == 0:
            self.refresh()
        return c

    def refresh(self) -> None:
        if self.counts:
            vals = np.fromiter(self.counts.values(), dtype=np.int64, count=len(self.counts))
            self.threshold = float(np.percentile(vals, self.hot_percentile))

    def classify(self, file_type: Optional[str], key: Optional[int] = None) -> str:
        """``host``, ``device`` or ``incompressible`` for one request."""
        kind = self.table.get(file_type or "", "device")
        if kind != "device":
            return kind
        if key is not None and self.counts.get(key, 0) > self.threshold:
            return "host"
        return "device"


class Scheduler:
    def __init__(self, policy: PolicyConfig, fpc: FpcSelector | None = None) -> None:
        self.policy = policy
        self.fpc = fpc if fpc is not None else FpcSelector()
        self.cached_temp: float = -math.inf
        self.last_poll: Optional[float] = None
        self.next_poll = 0.0
        self.device_shutdown = False
        self.polls = 0

    @property
    def filters_incompressible(self) -> bool:
        return self.policy.scheme in FILTERING_SCHEMES

    def poll(self, device: Device, now: float) -> float:
        """Refresh the cached reading and schedule the next poll."""
        info = device.smart_query()
        interval = self.policy.poll_interval
        if info.mode is Mode.SHUTDOWN:
            self.device_shutdown = True
        else:
            prev, prev_t = self.cached_temp, self.last_poll
            self.cached_temp = info.temperature
            slope = self.policy.burst_slope
            if slope is not None and prev_t is not None and now > prev_t:
                if (self.cached_temp - prev) / (now - prev_t) > slope:
                    interval /= 2
        self.last_poll = now
        self.next_poll = now + interval
        self.polls += 1
        return self.cached_temp

    def due(self, now: float) -> bool:
        return now >= self.next_poll

    def decide_write(self, file_type: Optional[str] = None, key: Optional[int] = None):
        """(route, incompressible_flag) for one write request."""
        scheme = self.policy.scheme
        selected = False
        if scheme is Scheme.FPC:
            if key is not None:
                self.fpc.observe(key)
            kind = self.fpc.classify(file_type, key)
            if kind == "incompressible":
                return CompressionRoute.SKIP, True
            selected = kind == "host"
        elif self.filters_incompressible and self.fpc.table.get(file_type or "") == "incompressible":
            return CompressionRoute.SKIP, True
        return route_compression(self.cached_temp, self.policy, selected), False

    def decide_read(self, key: Optional[int] = None) -> bool:
        """Whether device-compressed data should be decompressed on the device."""
        if self.policy.scheme is Scheme.FPC and key is not None:
            self.fpc.observe(key)
        return route_decompression(self.cached_temp, self.policy, Origin.DEVICE) is CompressionRoute.DEVICE
