"""Compression-capable SSD model.

The device compresses every ``chunk_size`` piece of a write independently,
packs the variable-length results back to back into flash pages, and keeps
a per-LBA mapping to the packed extents.  One LBA covers exactly one chunk.

Two bits on each command steer the engine:

* ``compression_flag`` (1 = the host already handled this data, store it
  verbatim and never decompress it),
* the top bit of the wire LBA marks data that nobody should compress.

Timing is a two-stage pipeline, one engine and one flash channel, each a
calendar of booked busy intervals.  The device never advances its own clock; the caller
passes ``now`` on every submission and calls :meth:`Device.tick` once per
simulation quantum to fold the accumulated activity into the thermal model.
"""

from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

from . import thermal
from .thermal import ThermalParams, ThermalState

__all__ = [
    "Origin",
    "Mode",
    "DataDesc",
    "IoCommand",
    "Completion",
    "SmartInfo",
    "DeviceConfig",
    "Device",
    "DeviceError",
    "DeviceOffline",
    "DeviceOutOfSpace",
    "LbaNotFound",
    "ProtocolViolation",
    "INCOMPRESSIBLE_BIT",
]

INCOMPRESSIBLE_BIT = 1 << 63
LBA_MASK = INCOMPRESSIBLE_BIT - 1


class Origin(str, Enum):
    RAW = "raw"
    DEVICE = "device"
    HOST = "host"


ORIGIN_CODE = {Origin.RAW: 0, Origin.DEVICE: 1, Origin.HOST: 2}
CODE_ORIGIN = {v: k for k, v in ORIGIN_CODE.items()}


class Mode(str, Enum):
    NORMAL = "normal"
    THROTTLED = "throttled"
    SHUTDOWN = "shutdown"


class DeviceError(RuntimeError):
    pass


class DeviceOffline(DeviceError):
    """The device latched a thermal emergency and refuses commands."""


class DeviceOutOfSpace(DeviceError):
    pass


class LbaNotFound(DeviceError, KeyError):
    pass


class ProtocolViolation(DeviceError):
    pass


@dataclass(frozen=True)
class DataDesc:
    """What a payload looks like: bytes carried, declared ratio, who compressed it."""

    size: int
    ratio: float = 1.0
    origin: Origin = Origin.RAW

    def __post_init__(self) -> None:
        if self.size < 0:
            raise ValueError("size must be >= 0")
        if not self.ratio >= 1.0:
            raise ValueError("compression ratio must be >= 1")


@dataclass(frozen=True)
class IoCommand:
    op: str
    lba: int
    length: int
    compression_flag: int = 0
    incompressible_flag: int = 0
    data: Optional[DataDesc] = None

    def __post_init__(self) -> None:
        if self.op not in ("read", "write", "trim"):
            raise ValueError(f"unknown op {self.op!r}")
        if self.compression_flag not in (0, 1) or self.incompressible_flag not in (0, 1):
            raise ValueError("flags are single bits")
        if self.length <= 0:
            raise ValueError("length must be > 0")
        if not 0 <= self.lba <= LBA_MASK:
            raise ValueError("lba out of range")

    @property
    def wire_lba(self) -> int:
        """LBA as it travels on the wire, incompressible label in the top bit."""
        return self.lba | (INCOMPRESSIBLE_BIT if self.incompressible_flag else 0)

    @property
    def ratio(self) -> float:
        return self.data.ratio if self.data is not None else 1.0

    @classmethod
    def from_wire(
        cls,
        op: str,
        wire_lba: int,
        length: int,
        ratio: float = 1.0,
        flags: int = 0,
    ) -> "IoCommand":
        """Inverse of :meth:`wire_lba` / :meth:`wire_flags`."""
        origin = CODE_ORIGIN[(flags >> 1) & 0b11]
        data = DataDesc(length, ratio, origin) if op == "write" else None
        return cls(
            op=op,
            lba=wire_lba & LBA_MASK,
            length=length,
            compression_flag=flags & 1,
            incompressible_flag=1 if wire_lba & INCOMPRESSIBLE_BIT else 0,
            data=data,
        )

    @property
    def wire_flags(self) -> int:
        origin = self.data.origin if self.data is not None else Origin.RAW
        return self.compression_flag | (ORIGIN_CODE[origin] << 1)


@dataclass(frozen=True)
class Completion:
    latency: float
    physical_bytes: int = 0
    data: Optional[DataDesc] = None
    engine_chunks: int = 0
    decompressed: bool = False


@dataclass(frozen=True)
class SmartInfo:
    temperature: int
    physical_used: int
    logical_used: int
    model_temperature: float
    mode: Mode

    @property
    def saved_space(self) -> int:
        return max(self.logical_used - self.physical_used, 0)


@dataclass(frozen=True)
class DeviceConfig:
    capacity: int = 200 * 2**30
    page_size: int = 16 * 1024
    chunk_size: int = 4 * 1024
    pages_per_block: int = 64
    op_fraction: float = 0.07
    throttle_temp: float = 76.0
    emergency_temp: float = 86.0
    throttled_fraction: float = 0.1
    throttling: bool = True
    engine_latency: float = 10e-6
    program_bandwidth: float = 1.0e9
    read_bandwidth: float = 2.0e9
    metadata_bytes: int = 16
    gc_free_blocks: int = 2
    write_buffer_bytes: int = 1 << 20  # writes are acknowledged once buffered

    def __post_init__(self) -> None:
        if self.page_size % self.chunk_size:
            raise ValueError("chunk_size must divide page_size")
        if not 0 < self.throttled_fraction < 1:
            raise ValueError("throttled_fraction must be in (0, 1)")
        if not self.throttle_temp < self.emergency_temp:
            raise ValueError("throttle_temp must be below emergency_temp")
        if self.capacity <= 0 or self.op_fraction < 0:
            raise ValueError("bad capacity / op_fraction")
        if self.engine_latency <= 0 or self.program_bandwidth <= 0 or self.read_bandwidth <= 0:
            raise ValueError("rates must be positive")

    @property
    def block_bytes(self) -> int:
        return self.page_size * self.pages_per_block

    @property
    def n_blocks(self) -> int:
        return max(math.ceil(self.capacity * (1 + self.op_fraction) / self.block_bytes), self.gc_free_blocks + 2)

    @property
    def engine_rate(self) -> float:
        """Nominal engine throughput in raw bytes/s."""
        return self.chunk_size / self.engine_latency

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class _Entry:
    __slots__ = ("size", "stored", "ratio", "origin", "stored_raw", "pieces")

    def __init__(self, size, stored, ratio, origin, stored_raw, pieces):
        self.size = size
        self.stored = stored
        self.ratio = ratio
        self.origin = origin
        self.stored_raw = stored_raw
        self.pieces = pieces


class _Calendar:
    """Non-overlapping busy intervals of one resource.

    Requests book work ahead of the simulation clock, possibly out of time
    order, so a booking takes the earliest gap that fits rather than the
    end of the queue.  Intervals that finished before the last drained
    quantum are pruned.
    """

    def __init__(self) -> None:
        self._starts: List[float] = []
        self._spans: List[List[float]] = []

    def book(self, ready: float, duration: float, weight: float = 1.0) -> float:
        """Reserve ``duration`` seconds at or after ``ready``; returns the end time."""
        starts, spans = self._starts, self._spans
        i = bisect.bisect_right(starts, ready) - 1
        t = ready
        if i >= 0 and spans[i][1] > t:
            t = spans[i][1]
        j = i + 1
        while j < len(spans) and spans[j][0] < t + duration:
            t = max(t, spans[j][1])
            j += 1
        starts.insert(j, t)
        spans.insert(j, [t, t + duration, weight])
        return t + duration

    def take(self, t0: float, t1: float) -> Tuple[float, float]:
        """(busy seconds, weighted seconds) inside ``[t0, t1]``."""
        busy = work = 0.0
        for s, e, w in self._spans:
            if s >= t1:
                break
            lo, hi = max(s, t0), min(e, t1)
            if hi > lo:
                busy += hi - lo
                work += (hi - lo) * w
        n = 0
        for s, e, w in self._spans:
            if e > t1:
                break
            n += 1
        if n:
            del self._spans[:n]
            del self._starts[:n]
        return busy, work


class Device:
    """One simulated CCSD.  Single owner; all calls serialized by the caller."""

    def __init__(
        self,
        config: DeviceConfig | None = None,
        thermal_params: ThermalParams | None = None,
        start_temp: float | None = None,
    ) -> None:
        self.config = cfg = config or DeviceConfig()
        self.thermal_params = thermal_params or ThermalParams()
        t0 = self.thermal_params.ambient_temp if start_temp is None else float(start_temp)
        self.temp_state = ThermalState(temp=t0, time=0.0)
        self.mode = Mode.NORMAL
        self.shutdown_time: Optional[float] = None

        self.mapping: Dict[int, _Entry] = {}
        n = cfg.n_blocks
        self._block_valid = [0] * n
        self._block_lbas: List[Dict[int, None]] = [dict() for _ in range(n)]
        self._erase_count = [0] * n
        self._free: List[int] = list(range(1, n))
        heapq.heapify(self._free)
        self._open = 0
        self._cursor = 0  # bytes appended into the open block
        self._in_gc = False

        self._valid_bytes = 0
        self._logical_bytes = 0

        # counters
        self.pages_programmed = 0
        self.engine_chunks_compressed = 0
        self.engine_chunks_decompressed = 0
        self.host_bytes_written = 0
        self.gc_migrated_bytes = 0
        self.gc_blocks_erased = 0

        self._engine = _Calendar()
        self._flash = _Calendar()
        self._last_tick = 0.0

    # ------------------------------------------------------------------
    # accounting helpers

    @property
    def physical_bytes_written(self) -> int:
        return self.pages_programmed * self.config.page_size

    @property
    def physical_used(self) -> int:
        return self._valid_bytes

    @property
    def logical_used(self) -> int:
        return self._logical_bytes

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    def reset_activity(self, start_temp: float | None = None) -> None:
        """Forget timing, counters and heat while keeping the stored data.

        Used after pre-filling so a run starts from a cold, idle device.
        """
        t0 = self.thermal_params.ambient_temp if start_temp is None else float(start_temp)
        self.temp_state = ThermalState(temp=t0, time=0.0)
        self.mode = Mode.NORMAL
        self.shutdown_time = None
        self.pages_programmed = 0
        self.engine_chunks_compressed = 0
        self.engine_chunks_decompressed = 0
        self.host_bytes_written = 0
        self.gc_migrated_bytes = 0
        self.gc_blocks_erased = 0
        self._engine = _Calendar()
        self._flash = _Calendar()
        self._last_tick = 0.0

    def counters(self) -> dict:
        return {
            "physical_bytes_written": self.physical_bytes_written,
            "pages_programmed": self.pages_programmed,
            "engine_chunks_compressed": self.engine_chunks_compressed,
            "engine_chunks_decompressed": self.engine_chunks_decompressed,
            "host_bytes_written": self.host_bytes_written,
            "gc_migrated_bytes": self.gc_migrated_bytes,
            "gc_blocks_erased": self.gc_blocks_erased,
        }

    def lookup(self, lba: int) -> DataDesc:
        """Descriptor of what was last written to ``lba``."""
        e = self.mapping.get(lba)
        if e is None:
            raise LbaNotFound(lba)
        return DataDesc(e.size, e.ratio, e.origin)

    def stored_bytes(self, lba: int) -> int:
        e = self.mapping.get(lba)
        if e is None:
            raise LbaNotFound(lba)
        return e.stored

    def is_stored_raw(self, lba: int) -> bool:
        return self.mapping[lba].stored_raw

    # ------------------------------------------------------------------
    # packing

    def _open_new_block(self) -> None:
        if not self._in_gc and len(self._free) < self.config.gc_free_blocks:
            self._collect()
        if not self._free:
            raise DeviceOutOfSpace("no free flash blocks")
        self._open = heapq.heappop(self._free)
        self._cursor = 0

    def _append(self, lba: int, nbytes: int) -> List[Tuple[int, int]]:
        page = self.config.page_size
        cap = self.config.block_bytes
        pieces: List[Tuple[int, int]] = []
        if not self._in_gc and self._cursor + nbytes > cap and len(self._free) < self.config.gc_free_blocks:
            # reclaim before any piece lands, so no half-placed entry is ever a victim
            self._collect()
        remaining = nbytes
        while remaining:
            if self._cursor >= cap:
                self._open_new_block()
            take = min(remaining, cap - self._cursor)
            before = self._cursor
            self._cursor += take
            self.pages_programmed += self._cursor // page - before // page
            b = self._open
            self._block_valid[b] += take
            self._block_lbas[b][lba] = None
            pieces.append((b, take))
            remaining -= take
        self._valid_bytes += nbytes
        return pieces

    def _drop(self, lba: int) -> Optional[_Entry]:
        e = self.mapping.pop(lba, None)
        if e is None:
            return None
        for b, n in e.pieces:
            self._block_valid[b] -= n
            self._block_lbas[b].pop(lba, None)
        self._valid_bytes -= e.stored
        self._logical_bytes -= e.size
        return e

    def _store(self, lba: int, size: int, stored: int, ratio: float, origin: Origin, stored_raw: bool) -> None:
        self._drop(lba)
        pieces = self._append(lba, stored)
        self.mapping[lba] = _Entry(size, stored, ratio, origin, stored_raw, pieces)
        self._logical_bytes += size

    def sync(self) -> int:
        """Pad and program a partially filled page; returns pages programmed."""
        page = self.config.page_size
        rem = self._cursor % page
        if rem == 0:
            return 0
        self._cursor += page - rem
        self.pages_programmed += 1
        return 1

    # ------------------------------------------------------------------
    # garbage collection

    def _victim(self) -> Optional[int]:
        best, best_valid = None, None
        free = set(self._free)
        for b, v in enumerate(self._block_valid):
            if b == self._open or b in free:
                continue
            if best_valid is None or v < best_valid:
                best, best_valid = b, v
        return best

    def gc_step(self) -> Tuple[int, int]:
        """Reclaim one greedy victim block.  Returns (pages erased, bytes migrated)."""
        victim = self._victim()
        if victim is None or self._block_valid[victim] >= self.config.block_bytes:
            raise DeviceOutOfSpace("no reclaimable flash block")
        migrated = 0
        was = self._in_gc
        self._in_gc = True
        try:
            for lba in list(self._block_lbas[victim]):
                e = self._drop(lba)
                pieces = self._append(lba, e.stored)
                e.pieces = pieces
                self.mapping[lba] = e
                self._logical_bytes += e.size
                migrated += e.stored
        finally:
            self._in_gc = was
        assert self._block_valid[victim] == 0
        self._block_lbas[victim].clear()
        self._erase_count[victim] += 1
        heapq.heappush(self._free, victim)
        self.gc_migrated_bytes += migrated
        self.gc_blocks_erased += 1
        return self.config.pages_per_block, migrated

    def _collect(self) -> None:
        while len(self._free) < self.config.gc_free_blocks:
            victim = self._victim()
            if victim is None or self._block_valid[victim] >= self.config.block_bytes:
                return
            self.gc_step()

    # ------------------------------------------------------------------
    # commands

    def _check_online(self) -> None:
        if self.mode is Mode.SHUTDOWN:
            raise DeviceOffline("device shut down after thermal emergency; restart required")

    def _engine_latency(self) -> Tuple[float, float]:
        """(seconds per chunk, heat weight) for the current mode."""
        lat = self.config.engine_latency
        if self.mode is Mode.THROTTLED:
            return lat / self.config.throttled_fraction, self.config.throttled_fraction
        return lat, 1.0

    def _run_engine(self, ready: float, chunks: int) -> float:
        if not chunks:
            return ready
        per, weight = self._engine_latency()
        return self._engine.book(ready, chunks * per, weight)

    def _run_flash(self, ready: float, seconds: float) -> float:
        if seconds <= 0:
            return ready
        return self._flash.book(ready, seconds)

    def submit_write(self, cmd: IoCommand, now: float) -> Completion:
        self._check_online()
        if cmd.op != "write":
            raise ValueError("submit_write needs a write command")
        cfg = self.config
        chunk = cfg.chunk_size
        desc = cmd.data or DataDesc(cmd.length, 1.0, Origin.RAW)
        n = -(-cmd.length // chunk)
        pages_before = self.pages_programmed
        stored_total = 0
        compress = not cmd.compression_flag and not cmd.incompressible_flag
        if compress:
            ratio = desc.ratio
            for i in range(n):
                raw = min(chunk, cmd.length - i * chunk)
                packed = math.ceil(raw / ratio)
                if packed + cfg.metadata_bytes >= raw:
                    self._store(cmd.lba + i, raw, raw, ratio, Origin.DEVICE, True)
                    stored_total += raw
                else:
                    self._store(cmd.lba + i, raw, packed + cfg.metadata_bytes, ratio, Origin.DEVICE, False)
                    stored_total += packed + cfg.metadata_bytes
            self.engine_chunks_compressed += n
            ready = self._run_engine(now, n)
        else:
            # verbatim: payload bytes spread over the LBAs it spans
            origin = desc.origin if cmd.compression_flag else Origin.RAW
            base, extra = divmod(cmd.length, n)
            for i in range(n):
                nbytes = base + (1 if i < extra else 0)
                size = chunk if origin is not Origin.RAW else nbytes
                stored_raw = origin is Origin.RAW or (origin is Origin.DEVICE and nbytes >= chunk)
                self._store(cmd.lba + i, size, nbytes, desc.ratio, origin, stored_raw)
                stored_total += nbytes
            ready = now
        self.host_bytes_written += cmd.length
        programmed = self.pages_programmed - pages_before
        flushed = self._run_flash(ready, programmed * cfg.page_size / cfg.program_bandwidth)
        # acknowledged from the write buffer; a full buffer pushes back
        end = max(ready, flushed - cfg.write_buffer_bytes / cfg.program_bandwidth)
        return Completion(latency=end - now, physical_bytes=stored_total, data=desc, engine_chunks=n if compress else 0)

    def submit_read(self, cmd: IoCommand, decompress_on_device: bool, now: float) -> Completion:
        self._check_online()
        if cmd.op != "read":
            raise ValueError("submit_read needs a read command")
        cfg = self.config
        n = -(-cmd.length // cfg.chunk_size)
        entries = []
        for i in range(n):
            e = self.mapping.get(cmd.lba + i)
            if e is None:
                raise LbaNotFound(cmd.lba + i)
            entries.append(e)
        if decompress_on_device and any(e.origin is Origin.HOST for e in entries):
            raise ProtocolViolation("host-compressed data can only be decompressed by the host")
        stored = sum(e.stored for e in entries)
        raw = sum(e.size for e in entries)
        chunks = 0
        if decompress_on_device:
            chunks = sum(1 for e in entries if e.origin is Origin.DEVICE and not e.stored_raw)
        ready = self._run_flash(now, stored / cfg.read_bandwidth)
        end = self._run_engine(ready, chunks)
        self.engine_chunks_decompressed += chunks
        first = entries[0]
        if decompress_on_device or all(e.stored_raw for e in entries):
            desc = DataDesc(raw, first.ratio, first.origin)
        else:
            desc = DataDesc(stored, first.ratio, first.origin)
        return Completion(latency=end - now, data=desc, engine_chunks=chunks, decompressed=chunks > 0)

    def submit_trim(self, cmd: IoCommand, now: float = 0.0) -> Completion:
        self._check_online()
        n = -(-cmd.length // self.config.chunk_size)
        for i in range(n):
            self._drop(cmd.lba + i)
        return Completion(latency=0.0)

    def submit(self, cmd: IoCommand, now: float, decompress_on_device: bool = False) -> Completion:
        if cmd.op == "write":
            return self.submit_write(cmd, now)
        if cmd.op == "read":
            return self.submit_read(cmd, decompress_on_device, now)
        return self.submit_trim(cmd, now)

    # ------------------------------------------------------------------
    # telemetry / thermal

    def smart_query(self) -> SmartInfo:
        t = self.temp_state.temp
        return SmartInfo(
            temperature=math.floor(t),
            physical_used=self._valid_bytes,
            logical_used=self._logical_bytes,
            model_temperature=t,
            mode=self.mode,
        )

    def tick(self, now: float) -> Mode:
        """Fold activity since the previous tick into the thermal state."""
        dt = now - self._last_tick
        if dt < 0:
            raise ValueError("time went backwards")
        if dt > 0:
            e_busy, e_work = self._engine.take(self._last_tick, now)
            f_busy, _ = self._flash.take(self._last_tick, now)
            if self.mode is Mode.SHUTDOWN:
                power = 0.0
            else:
                busy = max(e_busy, f_busy) / dt
                power = thermal.heat_rate(self.thermal_params, busy=busy, engine=e_work / dt)
            self.temp_state = thermal.step(self.temp_state, self.thermal_params, power, dt)
            self._last_tick = now
        t = self.temp_state.temp
        cfg = self.config
        if self.mode is not Mode.SHUTDOWN:
            if t >= cfg.emergency_temp:
                self.mode = Mode.SHUTDOWN
                self.shutdown_time = now
            elif cfg.throttling and t >= cfg.throttle_temp:
                self.mode = Mode.THROTTLED
            else:
                self.mode = Mode.NORMAL
        return self.mode
