"""Log-structured host file layer with optional transparent compression.

The layer owns one flat file address space of ``block_size`` blocks grouped
into fixed-size clusters.  Storage is a set of segments; slot ``s`` of the
storage pool is device LBA ``s``.  New data is appended to a user log,
segment cleaning (SC) copies live slots of a victim segment into a separate
cleaning log, and a reserved space (RS) of spare segments sits beyond the
user partition so that cleaning has somewhere to go.

A cluster is either *host-compressed* (its compressed payload lives in a
run of slots and nothing else of the cluster is stored) or *passthrough*
(each block has its own slot and the device may compress it).  The two
never mix inside one cluster.

All device traffic goes through a :class:`Channel`, which forwards commands
to a :class:`~ccsdsim.device.Device` (if any) and keeps the request clock.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from .device import Completion, DataDesc, Device, IoCommand, Origin

__all__ = [
    "CompressionRoute",
    "LoggingMode",
    "HostCostModel",
    "COST_PRESETS",
    "HostFsConfig",
    "ClusterMeta",
    "Channel",
    "IoResult",
    "HostFs",
    "HostFsFull",
    "COMP_FLAG",
    "select_logging_mode",
]

COMP_FLAG = -1  # first_slot marker of a host-compressed cluster


class CompressionRoute(str, Enum):
    DEVICE = "device"  # passthrough, the device engine compresses
    HOST = "host"
    SKIP = "skip"  # stored raw, nobody compresses


class LoggingMode(str, Enum):
    NORMAL = "normal"
    THREAD = "thread"


class HostFsFull(RuntimeError):
    pass


def select_logging_mode(free_fraction: float, watermark: float) -> LoggingMode:
    """Thread logging once free space drops strictly below ``watermark``."""
    return LoggingMode.THREAD if free_fraction < watermark else LoggingMode.NORMAL


@dataclass(frozen=True)
class HostCostModel:
    """Per-worker host codec throughput in raw bytes/s."""

    name: str = "zstd"
    compress_rate: float = 6.2e6
    decompress_rate: float = 19e6
    request_overhead: float = 5e-6

    def compress_time(self, nbytes: int) -> float:
        return nbytes / self.compress_rate

    def decompress_time(self, nbytes: int) -> float:
        return nbytes / self.decompress_rate

    def scaled(self, factor: float) -> "HostCostModel":
        return replace(self, compress_rate=self.compress_rate / factor, decompress_rate=self.decompress_rate / factor)


COST_PRESETS: Dict[str, HostCostModel] = {
    "zstd": HostCostModel("zstd", 6.2e6, 19e6),
    "lz4": HostCostModel("lz4", 7.5e6, 24e6),
    "lzo": HostCostModel("lzo", 7.0e6, 22e6),
}


@dataclass(frozen=True)
class HostFsConfig:
    partition_bytes: int = 64 * 2**20
    block_size: int = 4096
    segment_bytes: int = 512 * 1024
    cluster_size: int = 16 * 1024
    rs_base_fraction: float = 0.01
    rsr_max: float = 0.2
    sc_watermark: float = 0.05
    tl_watermark: float = 0.005
    rate_window: float = 1.0
    with_ccsd: bool = True
    algorithm: str = "zstd"

    def __post_init__(self) -> None:
        if self.segment_bytes % self.block_size or self.cluster_size % self.block_size:
            raise ValueError("segment and cluster sizes must be block multiples")
        if self.segment_bytes % self.cluster_size:
            raise ValueError("cluster_size must divide segment_bytes")
        if self.partition_bytes < 4 * self.segment_bytes:
            raise ValueError("partition too small")
        if not 0 <= self.rsr_max <= 1 or not 0 <= self.rs_base_fraction <= 1:
            raise ValueError("reserved-space fractions must lie in [0, 1]")
        if self.algorithm not in COST_PRESETS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    @property
    def blocks_per_segment(self) -> int:
        return self.segment_bytes // self.block_size

    @property
    def blocks_per_cluster(self) -> int:
        return self.cluster_size // self.block_size

    @property
    def user_segments(self) -> int:
        return self.partition_bytes // self.segment_bytes

    @property
    def rs_base_segments(self) -> int:
        return max(2, round(self.rs_base_fraction * self.user_segments))

    @property
    def max_extra_segments(self) -> int:
        return math.ceil(self.rsr_max * self.user_segments)

    @classmethod
    def from_mount_options(cls, options: str, **overrides) -> "HostFsConfig":
        """Parse ``with_CCSD=true,granularity=4096,algorithm=zstd,...``."""
        kw = dict(overrides)
        for item in filter(None, (s.strip() for s in options.split(","))):
            key, _, val = item.partition("=")
            key = key.strip().lower()
            if key == "with_ccsd":
                kw["with_ccsd"] = val.strip().lower() in ("1", "true", "yes", "on")
            elif key in ("granularity", "block_size"):
                kw["block_size"] = int(val)
            elif key in ("algorithm", "compress_algorithm"):
                kw["algorithm"] = val.strip()
            elif key in ("cluster_size", "segment_bytes", "partition_bytes"):
                kw[key] = int(val)
            elif key in ("rsr_max", "sc_watermark", "tl_watermark", "rs_base_fraction"):
                kw[key] = float(val)
            else:
                raise ValueError(f"unknown mount option {key!r}")
        return cls(**kw)


@dataclass
class ClusterMeta:
    first_slot: int  # COMP_FLAG for host-compressed clusters
    slots: List[int]
    origin: Origin
    cluster_size: int
    stored_ratio: float

    @property
    def host_compressed(self) -> bool:
        return self.first_slot == COMP_FLAG


class Channel:
    """Serial command path of one request.

    ``now`` advances by every device latency and every host CPU charge, so
    after a request ``now - start`` is its service time.
    """

    def __init__(self, device: Optional[Device] = None, now: float = 0.0, trace: Optional[list] = None) -> None:
        self.device = device
        self.trace = trace
        self.now = now
        self.host_time = 0.0
        self.device_time = 0.0
        self.commands: List[Tuple[IoCommand, bool]] = []
        self.engine_chunks_decompressed = 0
        self.physical_bytes = 0

    def submit(self, cmd: IoCommand, decompress_on_device: bool = False) -> Completion:
        self.commands.append((cmd, decompress_on_device))
        if self.trace is not None:
            self.trace.append((self.now, cmd, decompress_on_device))
        if self.device is None:
            # no backing device: data comes back as it would from a plain disk
            desc = cmd.data if cmd.op == "write" else DataDesc(cmd.length)
            return Completion(latency=0.0, data=desc)
        c = self.device.submit(cmd, self.now, decompress_on_device)
        self.now += c.latency
        self.device_time += c.latency
        self.engine_chunks_decompressed += c.engine_chunks if cmd.op == "read" else 0
        self.physical_bytes += c.physical_bytes
        return c

    def host(self, seconds: float) -> None:
        self.now += seconds
        self.host_time += seconds


@dataclass
class IoResult:
    commands: List[Tuple[IoCommand, bool]]
    host_time: float
    host_compressed: bool = False
    host_decompressed: bool = False
    device_decompressed: bool = False
    bytes: int = 0


_FREE, _OPEN, _DIRTY, _RETIRED = 0, 1, 2, 3


class _Log:
    """Append cursor of one log: the slots still writable in its segment."""

    def __init__(self) -> None:
        self.segment: Optional[int] = None
        self.slots: Deque[int] = deque()
        self.ssr = False


class HostFs:
    def __init__(
        self,
        config: HostFsConfig | None = None,
        cost: HostCostModel | None = None,
        channel_factory=None,
    ) -> None:
        self.config = cfg = config or HostFsConfig()
        self.cost = cost or COST_PRESETS[cfg.algorithm]
        bps = cfg.blocks_per_segment
        self.n_user_segments = cfg.user_segments
        self.n_blocks = self.n_user_segments * bps  # file address space
        n_ids = self.n_user_segments + cfg.rs_base_segments + cfg.max_extra_segments
        self.max_segments = n_ids

        self.owner: List[int] = [-1] * (n_ids * bps)  # slot -> owner key, -1 = invalid
        self.seg_valid = [0] * n_ids
        self.seg_state = [_RETIRED] * n_ids
        self._free: List[int] = []
        active = self.n_user_segments + cfg.rs_base_segments
        for s in range(active):
            self.seg_state[s] = _FREE
            self._free.append(s)
        self._free_count = active
        self.active_segments = active
        self.rs_extra = 0  # granted extra segments
        self._pending_shrink = 0

        self.blk_slot = [-1] * self.n_blocks
        self.blk_dev = bytearray(self.n_blocks)  # 1 = device may hold it compressed
        self.blk_ratio = [1.0] * self.n_blocks
        self.clusters: Dict[int, ClusterMeta] = {}

        self._user = _Log()
        self._gc = _Log()

        # counters
        self.sc_invocations = 0
        self.sc_blocks_copied = 0
        self.ssr_allocations = 0
        self.stalls = 0
        self.user_blocks_written = 0
        self._sc_times: Deque[float] = deque()
        self._copy_times: Deque[Tuple[float, int]] = deque()
        self._copy_window = 0

    def reset_counters(self) -> None:
        self.sc_invocations = 0
        self.sc_blocks_copied = 0
        self.ssr_allocations = 0
        self.stalls = 0
        self.user_blocks_written = 0
        self._sc_times.clear()
        self._copy_times.clear()
        self._copy_window = 0

    # ------------------------------------------------------------------
    # space accounting

    @property
    def free_segments(self) -> int:
        return self._free_count

    @property
    def free_fraction(self) -> float:
        return self._free_count / self.active_segments

    @property
    def rs_segments(self) -> int:
        return self.config.rs_base_segments + self.rs_extra

    @property
    def rs_bytes(self) -> int:
        return self.rs_segments * self.config.segment_bytes

    def valid_blocks(self) -> int:
        return sum(self.seg_valid)

    def _take_free(self) -> Optional[int]:
        if not self._free:
            return None
        s = heapq.heappop(self._free)
        self._free_count -= 1
        self.seg_state[s] = _OPEN
        return s

    def _release(self, s: int) -> None:
        self.seg_state[s] = _FREE
        heapq.heappush(self._free, s)
        self._free_count += 1
        self._settle_shrink()

    def _retire_free(self) -> None:
        s = max(self._free)
        self._free.remove(s)
        heapq.heapify(self._free)
        self._free_count -= 1
        self.seg_state[s] = _RETIRED
        self.active_segments -= 1

    def _settle_shrink(self) -> None:
        # cleaning needs two free segments to make progress, so a deferred
        # shrink is only paid out of the surplus above that floor
        while self._pending_shrink and self._free_count > 2:
            self._pending_shrink -= 1
            self._retire_free()

    def resize_reserved(self, extra_bytes: int) -> int:
        """Set the granted extra reserved space; returns what is now granted.

        Expansion brings retired segment ids back as free segments.  Shrinking
        retires free segments only while more than two remain free; the
        remainder is deferred until cleaning frees segments.
        """
        cfg = self.config
        target = min(max(int(extra_bytes) // cfg.segment_bytes, 0), cfg.max_extra_segments)
        while self.rs_extra < target and self._pending_shrink:
            self._pending_shrink -= 1
            self.rs_extra += 1
        while self.rs_extra < target:
            s = self.seg_state.index(_RETIRED)
            self.seg_state[s] = _FREE
            heapq.heappush(self._free, s)
            self._free_count += 1
            self.active_segments += 1
            self.rs_extra += 1
        while self.rs_extra > target:
            self._pending_shrink += 1
            self.rs_extra -= 1
        self._settle_shrink()
        return self.rs_extra * cfg.segment_bytes

    # ------------------------------------------------------------------
    # rolling cleaning rates

    def _trim_window(self, now: float) -> None:
        w = self.config.rate_window
        while self._sc_times and self._sc_times[0] <= now - w:
            self._sc_times.popleft()
        while self._copy_times and self._copy_times[0][0] <= now - w:
            self._copy_window -= self._copy_times.popleft()[1]

    def sc_rate(self, now: float) -> float:
        """Cleaning invocations per second over the rolling window."""
        self._trim_window(now)
        return len(self._sc_times) / self.config.rate_window

    def copy_rate(self, now: float) -> float:
        """Blocks copied by cleaning per second over the rolling window."""
        self._trim_window(now)
        return self._copy_window / self.config.rate_window

    # ------------------------------------------------------------------
    # slot ownership

    def _owner_key(self, fb: int) -> int:
        return fb

    def _set_owner(self, slot: int, key: int) -> None:
        self.owner[slot] = key
        self.seg_valid[slot // self.config.blocks_per_segment] += 1

    def _invalidate(self, slot: int, chan: Channel) -> None:
        self.owner[slot] = -1
        self.seg_valid[slot // self.config.blocks_per_segment] -= 1
        chan.submit(IoCommand("trim", slot, self.config.block_size))

    # host-compressed cluster slots are owned by ``n_blocks + cid * bpc + i``
    def _cluster_key(self, cid: int, i: int) -> int:
        return self.n_blocks + cid * self.config.blocks_per_cluster + i

    # ------------------------------------------------------------------
    # allocation

    def _refill_user(self, chan: Channel) -> None:
        cfg = self.config
        log = self._user
        if log.segment is not None and self.seg_state[log.segment] == _OPEN:
            self.seg_state[log.segment] = _DIRTY
        log.segment = None
        if self.free_fraction < cfg.sc_watermark:
            # one victim per new segment below the watermark, more if nearly out
            self.segment_clean(chan)
            guard = self.active_segments
            while self._free_count < 2 and guard > 0:
                if not self.segment_clean(chan):
                    break
                guard -= 1
        if self._pending_shrink:
            self._reclaim_for_shrink(chan)
        mode = select_logging_mode(self.free_fraction, cfg.tl_watermark)
        if mode is LoggingMode.NORMAL and self._free_count >= 2:
            s = self._take_free()
            bps = cfg.blocks_per_segment
            log.segment, log.slots, log.ssr = s, deque(range(s * bps, (s + 1) * bps)), False
            return
        s = self._ssr_target()
        if s is None:
            s = self._take_free()
            if s is None:
                raise HostFsFull("no free segment and nothing to reuse")
            bps = cfg.blocks_per_segment
            log.segment, log.slots, log.ssr = s, deque(range(s * bps, (s + 1) * bps)), False
            return
        bps = cfg.blocks_per_segment
        self.seg_state[s] = _OPEN
        log.segment, log.ssr = s, True
        log.slots = deque(i for i in range(s * bps, (s + 1) * bps) if self.owner[i] < 0)
        self.stalls += 1

    def _reclaim_for_shrink(self, chan: Channel) -> None:
        """Clean cheap victims so a deferred shrink can retire segments.

        Only victims at most half valid are taken, so every pass frees more
        than it consumes; data parked in fuller segments keeps the shrink
        waiting.
        """
        half = self.config.blocks_per_segment // 2
        guard = self.active_segments
        while self._pending_shrink and guard > 0:
            guard -= 1
            if self._free_count > 2:
                self._settle_shrink()
                continue
            victim = self.pick_victim()
            if victim is None or self.seg_valid[victim] > half or not self.segment_clean(chan):
                return

    def _ssr_target(self) -> Optional[int]:
        bps = self.config.blocks_per_segment
        best, best_valid = None, bps
        for s, st in enumerate(self.seg_state):
            if st == _DIRTY and self.seg_valid[s] < best_valid:
                best, best_valid = s, self.seg_valid[s]
        return best

    def _next_user_slot(self, chan: Channel, flush) -> int:
        log = self._user
        if not log.slots:
            flush()
            self._refill_user(chan)
        if log.ssr:
            self.ssr_allocations += 1
        return log.slots.popleft()

    def _next_gc_slot(self) -> Optional[int]:
        log = self._gc
        if not log.slots:
            if log.segment is not None and self.seg_state[log.segment] == _OPEN:
                self.seg_state[log.segment] = _DIRTY
            s = self._take_free()
            if s is None:
                log.segment = None
                return None
            bps = self.config.blocks_per_segment
            log.segment, log.slots = s, deque(range(s * bps, (s + 1) * bps))
        return log.slots.popleft()

    def _gc_capacity(self) -> int:
        return len(self._gc.slots) + self._free_count * self.config.blocks_per_segment

    # ------------------------------------------------------------------
    # segment cleaning

    def pick_victim(self) -> Optional[int]:
        """Greedy: closed segment with the fewest valid blocks, lowest id on ties."""
        bps = self.config.blocks_per_segment
        best, best_valid = None, bps
        for s, st in enumerate(self.seg_state):
            if st == _DIRTY and self.seg_valid[s] < best_valid:
                best, best_valid = s, self.seg_valid[s]
        return best

    def segment_clean(self, chan: Channel) -> bool:
        """Clean one greedy victim.  Returns False when nothing could be done."""
        victim = self.pick_victim()
        if victim is None:
            return False
        valid = self.seg_valid[victim]
        if valid > self._gc_capacity():
            self.stalls += 1
            return False
        bps = self.config.blocks_per_segment
        bs = self.config.block_size
        copied = 0
        for old in range(victim * bps, (victim + 1) * bps):
            key = self.owner[old]
            if key < 0:
                continue
            c = chan.submit(IoCommand("read", old, bs), False)
            if key < self.n_blocks:
                origin = Origin.DEVICE if self.blk_dev[key] else Origin.RAW
                ratio = self.blk_ratio[key]
            else:
                meta = self.clusters[(key - self.n_blocks) // self.config.blocks_per_cluster]
                origin, ratio = Origin.HOST, meta.stored_ratio
            payload = c.data.size if c.data is not None else bs
            new = self._next_gc_slot()
            chan.submit(IoCommand("write", new, payload, compression_flag=1, data=DataDesc(payload, ratio, origin)))
            self._invalidate(old, chan)
            self._set_owner(new, key)
            if key < self.n_blocks:
                self.blk_slot[key] = new
            else:
                cid, i = divmod(key - self.n_blocks, self.config.blocks_per_cluster)
                self.clusters[cid].slots[i] = new
            copied += 1
        self._release(victim)
        self.sc_invocations += 1
        self.sc_blocks_copied += copied
        self._sc_times.append(chan.now)
        self._copy_times.append((chan.now, copied))
        self._copy_window += copied
        return True

    # ------------------------------------------------------------------
    # metadata views

    def cluster_meta(self, cid: int) -> ClusterMeta:
        meta = self.clusters.get(cid)
        if meta is not None:
            return meta
        bpc = self.config.blocks_per_cluster
        slots = self.blk_slot[cid * bpc : (cid + 1) * bpc]
        dev = any(self.blk_dev[cid * bpc + i] for i in range(bpc))
        return ClusterMeta(
            first_slot=slots[0],
            slots=list(slots),
            origin=Origin.DEVICE if dev else Origin.RAW,
            cluster_size=self.config.cluster_size,
            stored_ratio=self.blk_ratio[cid * bpc],
        )

    def block_origin(self, fb: int) -> Optional[Origin]:
        """Who compressed the data at file block ``fb`` (None for a hole)."""
        cid = fb // self.config.blocks_per_cluster
        if cid in self.clusters:
            return Origin.HOST
        if self.blk_slot[fb] < 0:
            return None
        return Origin.DEVICE if self.blk_dev[fb] else Origin.RAW

    # ------------------------------------------------------------------
    # reads

    def _read_cluster_payload(self, meta: ClusterMeta, chan: Channel) -> None:
        for start, n in _runs(meta.slots):
            chan.submit(IoCommand("read", start, n * self.config.block_size), False)

    def _read_blocks(self, fbs: Sequence[int], chan: Channel, device_decompress: bool, res: IoResult) -> None:
        bs = self.config.block_size
        slots = [self.blk_slot[fb] for fb in fbs if self.blk_slot[fb] >= 0]
        devs = {self.blk_slot[fb]: self.blk_dev[fb] for fb in fbs if self.blk_slot[fb] >= 0}
        for start, n in _runs(slots):
            # split runs by whether the device may hold them compressed
            i = 0
            while i < n:
                kind = devs[start + i]
                j = i
                while j < n and devs[start + j] == kind:
                    j += 1
                on_dev = bool(kind) and device_decompress
                chan.submit(IoCommand("read", start + i, (j - i) * bs), on_dev)
                if kind and on_dev:
                    res.device_decompressed = True
                elif kind:
                    chan.host(self.cost.decompress_time((j - i) * bs))
                    res.host_decompressed = True
                i = j

    def host_read(
        self,
        offset: int,
        length: int,
        chan: Optional[Channel] = None,
        device_decompress: bool = True,
    ) -> IoResult:
        """Read ``length`` bytes.  ``device_decompress`` routes device-compressed
        blocks; host-compressed clusters always decompress on the host."""
        chan = chan or Channel()
        fbs = self._blocks(offset, length)
        start_host = chan.host_time
        first_cmd = len(chan.commands)
        res = IoResult([], 0.0, bytes=length)
        chan.host(self.cost.request_overhead)
        bpc = self.config.blocks_per_cluster
        plain: List[int] = []
        for cid, members in _by_cluster(fbs, bpc):
            meta = self.clusters.get(cid)
            if meta is None:
                plain.extend(members)
                continue
            if plain:
                self._read_blocks(plain, chan, device_decompress, res)
                plain = []
            self._read_cluster_payload(meta, chan)
            chan.host(self.cost.decompress_time(meta.cluster_size))
            res.host_decompressed = True
        if plain:
            self._read_blocks(plain, chan, device_decompress, res)
        res.commands = chan.commands[first_cmd:]
        res.host_time = chan.host_time - start_host
        return res

    # ------------------------------------------------------------------
    # writes

    def _blocks(self, offset: int, length: int) -> range:
        bs = self.config.block_size
        if offset % bs or length % bs or length <= 0:
            raise ValueError("offset and length must be positive block multiples")
        fb0 = offset // bs
        fb1 = fb0 + length // bs
        if fb1 > self.n_blocks:
            raise ValueError("write beyond the end of the partition")
        return range(fb0, fb1)

    def _drop_cluster(self, cid: int, chan: Channel) -> None:
        meta = self.clusters.pop(cid, None)
        if meta is not None:
            for s in meta.slots:
                self._invalidate(s, chan)

    def host_write(
        self,
        offset: int,
        length: int,
        ratio: float,
        route: CompressionRoute,
        chan: Optional[Channel] = None,
        incompressible: bool = False,
        device_decompress: bool = True,
    ) -> IoResult:
        """Write ``length`` bytes of data with compression ratio ``ratio``.

        ``device_decompress`` only matters when a partial cluster write has
        to read back device-compressed neighbours.
        """
        if not self.config.with_ccsd and route is CompressionRoute.DEVICE:
            route = CompressionRoute.SKIP
        chan = chan or Channel()
        fbs = self._blocks(offset, length)
        start_host = chan.host_time
        first_cmd = len(chan.commands)
        res = IoResult([], 0.0, bytes=length)
        chan.host(self.cost.request_overhead)
        bpc = self.config.blocks_per_cluster
        for cid, members in _by_cluster(fbs, bpc):
            full = len(members) == bpc
            if route is CompressionRoute.HOST and not incompressible:
                self._write_host_cluster(cid, members, full, ratio, chan, device_decompress, res)
            else:
                self._write_plain(cid, members, full, ratio, route, incompressible, chan, res)
        self.user_blocks_written += len(fbs)
        res.commands = chan.commands[first_cmd:]
        res.host_time = chan.host_time - start_host
        return res

    def _write_plain(self, cid, members, full, ratio, route, incompressible, chan, res) -> None:
        bpc = self.config.blocks_per_cluster
        meta = self.clusters.get(cid)
        targets = list(members)
        if meta is not None:
            if not full:
                # convert: bring the whole cluster back as passthrough blocks
                self._read_cluster_payload(meta, chan)
                chan.host(self.cost.decompress_time(meta.cluster_size))
                res.host_decompressed = True
                targets = list(range(cid * bpc, (cid + 1) * bpc))
            self._drop_cluster(cid, chan)
        device = route is CompressionRoute.DEVICE and not incompressible
        self._place_blocks(targets, ratio, device, incompressible, chan)

    def _place_blocks(self, fbs, ratio, device, incompressible, chan) -> None:
        bs = self.config.block_size
        run: List[Tuple[int, int]] = []  # (slot, fb)

        def flush() -> None:
            if not run:
                return
            first = run[0][0]
            n = len(run)
            data = DataDesc(n * bs, ratio, Origin.RAW)
            chan.submit(
                IoCommand(
                    "write",
                    first,
                    n * bs,
                    compression_flag=0 if device else 1,
                    incompressible_flag=1 if incompressible else 0,
                    data=data,
                )
            )
            for slot, fb in run:
                old = self.blk_slot[fb]
                if old >= 0:
                    self._invalidate(old, chan)
                self._set_owner(slot, fb)
                self.blk_slot[fb] = slot
                self.blk_dev[fb] = 1 if device else 0
                self.blk_ratio[fb] = ratio
            run.clear()

        for fb in fbs:
            slot = self._next_user_slot(chan, flush)
            if run and slot != run[-1][0] + 1:
                flush()
            run.append((slot, fb))
        flush()

    def _write_host_cluster(self, cid, members, full, ratio, chan, device_decompress, res) -> None:
        cfg = self.config
        bpc = cfg.blocks_per_cluster
        bs = cfg.block_size
        meta = self.clusters.get(cid)
        if not full:
            # read-modify-write of the rest of the cluster
            if meta is not None:
                self._read_cluster_payload(meta, chan)
                chan.host(self.cost.decompress_time(meta.cluster_size))
                res.host_decompressed = True
            else:
                others = [fb for fb in range(cid * bpc, (cid + 1) * bpc) if fb not in members]
                self._read_blocks(others, chan, device_decompress, res)
        chan.host(self.cost.compress_time(cfg.cluster_size))
        res.host_compressed = True
        nslots = math.ceil(math.ceil(cfg.cluster_size / ratio) / bs)
        if nslots >= bpc:
            # no block saved: keep the cluster raw
            self._drop_cluster(cid, chan)
            self._place_blocks(range(cid * bpc, (cid + 1) * bpc), ratio, False, False, chan)
            return
        # invalidate whatever the cluster held before
        self._drop_cluster(cid, chan)
        for fb in range(cid * bpc, (cid + 1) * bpc):
            if self.blk_slot[fb] >= 0:
                self._invalidate(self.blk_slot[fb], chan)
                self.blk_slot[fb] = -1
                self.blk_dev[fb] = 0
        payload = math.ceil(cfg.cluster_size / ratio)
        meta = ClusterMeta(COMP_FLAG, [], Origin.HOST, cfg.cluster_size, ratio)
        self.clusters[cid] = meta
        run: List[int] = []
        sent = [0]

        def flush() -> None:
            if not run:
                return
            nbytes = min(len(run) * bs, payload - sent[0])
            chan.submit(
                IoCommand("write", run[0], nbytes, compression_flag=1, data=DataDesc(nbytes, ratio, Origin.HOST))
            )
            sent[0] += nbytes
            run.clear()

        for i in range(nslots):
            slot = self._next_user_slot(chan, flush)
            if run and slot != run[-1] + 1:
                flush()
            run.append(slot)
            meta.slots.append(slot)
            self._set_owner(slot, self._cluster_key(cid, i))
        flush()

    def host_trim(self, offset: int, length: int, chan: Optional[Channel] = None) -> IoResult:
        chan = chan or Channel()
        first_cmd = len(chan.commands)
        bpc = self.config.blocks_per_cluster
        for cid, members in _by_cluster(self._blocks(offset, length), bpc):
            if cid in self.clusters:
                if len(members) < bpc:
                    continue  # partial trim of a compressed cluster keeps it
                self._drop_cluster(cid, chan)
                continue
            for fb in members:
                if self.blk_slot[fb] >= 0:
                    self._invalidate(self.blk_slot[fb], chan)
                    self.blk_slot[fb] = -1
                    self.blk_dev[fb] = 0
        return IoResult(chan.commands[first_cmd:], 0.0, bytes=length)

    # ------------------------------------------------------------------

    def check_invariants(self) -> None:
        """Assert internal consistency; used by tests."""
        bps = self.config.blocks_per_segment
        counts = [0] * self.max_segments
        seen = set()
        for slot, key in enumerate(self.owner):
            if key >= 0:
                counts[slot // bps] += 1
                assert key not in seen, f"owner {key} stored twice"
                seen.add(key)
        assert counts == self.seg_valid, "segment valid counts drifted"
        for fb, slot in enumerate(self.blk_slot):
            if slot >= 0:
                assert self.owner[slot] == fb
                assert fb // self.config.blocks_per_cluster not in self.clusters
        for cid, meta in self.clusters.items():
            assert meta.first_slot == COMP_FLAG
            for i, slot in enumerate(meta.slots):
                assert self.owner[slot] == self._cluster_key(cid, i)
        for s, st in enumerate(self.seg_state):
            if st in (_FREE, _RETIRED):
                assert self.seg_valid[s] == 0
        assert self._free_count == sum(1 for st in self.seg_state if st == _FREE)
        assert self.active_segments == sum(1 for st in self.seg_state if st != _RETIRED)


def _runs(slots: Sequence[int]):
    """Split a slot list into (start, count) runs of consecutive slots."""
    out: List[Tuple[int, int]] = []
    for s in slots:
        if out and s == out[-1][0] + out[-1][1]:
            out[-1] = (out[-1][0], out[-1][1] + 1)
        else:
            out.append((s, 1))
    return out


def _by_cluster(fbs: Sequence[int], bpc: int):
    out: List[Tuple[int, List[int]]] = []
    for fb in fbs:
        cid = fb // bpc
        if out and out[-1][0] == cid:
            out[-1][1].append(fb)
        else:
            out.append((cid, [fb]))
    return out
