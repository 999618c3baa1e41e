"""Request streams: FIO-style synthetic patterns and Filebench-style profiles.

Every stream is a pure function of ``(spec, seed)``.  Each simulated worker
draws from its own generator, so the requests a worker sees do not depend
on how the event loop interleaves workers.

Compressibility is declared, never measured: a request carries the ratio
the data would compress to.  Profiles assign one ratio and one file type per
cluster so rewrites of the same data keep the same properties.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .device import DataDesc, IoCommand

__all__ = [
    "PATTERNS",
    "PROFILES",
    "Request",
    "SyntheticSpec",
    "ProfileSpec",
    "load_profile",
    "spec_from_dict",
    "RequestStream",
    "generate",
    "zipf_weights",
    "sample_ratios",
    "prefill",
    "TraceRecord",
    "write_trace",
    "read_trace",
]

PATTERNS = ("seq-read", "seq-write", "rand-read", "rand-write")
PROFILES = ("webserver", "varmail", "fileserver", "oltp")
RATIO_BINS = 16
_BATCH = 2048


@dataclass(frozen=True)
class Request:
    op: str  # "read" | "write"
    offset: int
    length: int
    ratio: float
    file_type: str
    worker: int
    seq: int


@dataclass(frozen=True)
class SyntheticSpec:
    pattern: str = "seq-write"
    io_size: Optional[int] = None  # 128KB sequential, 4KB random
    workers: int = 8
    ratio: float = 2.0
    duration: float = 1200.0
    working_set: Optional[int] = None  # bytes, defaults to the whole partition
    fill_level: Optional[float] = None  # defaults to 0 for writes, the working set for reads
    file_type: str = "data"

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")
        if self.io_size is None:
            object.__setattr__(self, "io_size", 128 * 1024 if self.pattern.startswith("seq") else 4096)
        if self.io_size <= 0:
            raise ValueError("io_size must be > 0")
        if not self.ratio >= 1.0:
            raise ValueError("ratio must be >= 1")
        if self.duration <= 0 or self.workers <= 0:
            raise ValueError("duration and workers must be > 0")
        if self.fill_level is not None and not 0 <= self.fill_level <= 1:
            raise ValueError("fill_level must lie in [0, 1]")

    @property
    def name(self) -> str:
        return self.pattern

    @property
    def is_read(self) -> bool:
        return self.pattern.endswith("read")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "synthetic"
        return d


@dataclass(frozen=True)
class ProfileSpec:
    name: str = "oltp"
    ratio_range: Tuple[float, float] = (3.0, 4.0)
    read_fraction: float = 0.3
    io_sizes: Tuple[int, ...] = (4096,)
    io_weights: Tuple[float, ...] = (1.0,)
    file_types: Mapping[str, float] = field(default_factory=lambda: {"data": 1.0})
    working_set_fraction: float = 0.5
    zipf_s: float = 0.99
    fill_level: Optional[float] = 0.9
    workers: int = 8
    duration: float = 1200.0

    def __post_init__(self) -> None:
        lo, hi = self.ratio_range
        if not 1.0 <= lo <= hi:
            raise ValueError("ratio_range must satisfy 1 <= lo <= hi")
        if len(self.io_sizes) != len(self.io_weights) or not self.io_sizes:
            raise ValueError("io_sizes and io_weights must pair up")
        if any(s <= 0 for s in self.io_sizes) or any(w < 0 for w in self.io_weights):
            raise ValueError("bad io size histogram")
        if not 0 <= self.read_fraction <= 1 or not 0 < self.working_set_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.zipf_s < 0 or self.duration <= 0 or self.workers <= 0:
            raise ValueError("bad zipf_s / duration / workers")
        object.__setattr__(self, "ratio_range", (float(lo), float(hi)))
        object.__setattr__(self, "io_sizes", tuple(int(s) for s in self.io_sizes))
        object.__setattr__(self, "io_weights", tuple(float(w) for w in self.io_weights))
        object.__setattr__(self, "file_types", dict(self.file_types))

    @property
    def is_read(self) -> bool:
        return self.read_fraction >= 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio_range"] = list(self.ratio_range)
        d["io_sizes"] = list(self.io_sizes)
        d["io_weights"] = list(self.io_weights)
        d["kind"] = "profile"
        return d


WorkloadSpec = Union[SyntheticSpec, ProfileSpec]


def load_profile(name_or_path: str, **overrides) -> ProfileSpec:
    """Load a bundled profile by name or any JSON profile file by path."""
    if os.path.exists(name_or_path):
        with open(name_or_path) as fp:
            data = json.load(fp)
    else:
        if name_or_path not in PROFILES:
            raise ValueError(f"unknown profile {name_or_path!r}")
        text = resources.files("ccsdsim.profiles").joinpath(f"{name_or_path}.json").read_text()
        data = json.loads(text)
    data.update(overrides)
    data.pop("kind", None)
    return ProfileSpec(**data)


def spec_from_dict(d: Mapping) -> WorkloadSpec:
    d = dict(d)
    kind = d.pop("kind", "synthetic" if "pattern" in d else "profile")
    if kind == "synthetic":
        return SyntheticSpec(**d)
    return ProfileSpec(**d)


def zipf_weights(n: int, s: float) -> np.ndarray:
    """Normalised Zipf probabilities for ranks 1..n."""
    w = np.arange(1, n + 1, dtype=float) ** -s
    return w / w.sum()


def sample_ratios(spec: ProfileSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Zipf-skewed ratios over the profile range; the lowest bin is the most common."""
    lo, hi = spec.ratio_range
    bins = rng.choice(RATIO_BINS, size=n, p=zipf_weights(RATIO_BINS, spec.zipf_s))
    return lo + (hi - lo) * (bins + 0.5) / RATIO_BINS


class RequestStream:
    """Per-worker request generators for one spec and seed."""

    def __init__(
        self,
        spec: WorkloadSpec,
        seed: int,
        partition_bytes: int,
        block_size: int = 4096,
        cluster_size: int = 16384,
    ) -> None:
        self.spec = spec
        self.seed = int(seed)
        self.block_size = block_size
        self.cluster_size = cluster_size
        self.partition_bytes = partition_bytes
        if isinstance(spec, SyntheticSpec):
            ws = spec.working_set if spec.working_set is not None else partition_bytes
            if ws > partition_bytes:
                raise ValueError("working set exceeds the partition")
            if spec.io_size % block_size:
                raise ValueError("io_size must be a multiple of the block size")
            self.working_set = ws - ws % spec.io_size
            region = self.working_set // spec.workers
            self.region = region - region % spec.io_size
            if self.region <= 0 and spec.pattern.startswith("seq"):
                raise ValueError("working set too small for the worker count")
            self._cursor = [0] * spec.workers
        else:
            ws = int(spec.working_set_fraction * partition_bytes)
            self.working_set = ws - ws % cluster_size
            if any(s % block_size for s in spec.io_sizes):
                raise ValueError("io sizes must be block multiples")
            if max(spec.io_sizes) > self.working_set:
                raise ValueError("working set smaller than the largest I/O")
            self._build_profile_tables()
        self._rngs = [np.random.default_rng([self.seed, w]) for w in range(spec.workers)]
        self._buf: List[List] = [[] for _ in range(spec.workers)]
        self._seq = [0] * spec.workers

    # -- data properties -------------------------------------------------

    def _build_profile_tables(self) -> None:
        spec = self.spec
        rng = np.random.default_rng([self.seed, 1 << 20])
        n_clusters = -(-self.partition_bytes // self.cluster_size)
        self.cluster_ratio = sample_ratios(spec, rng, n_clusters)
        names = sorted(spec.file_types)
        probs = np.array([spec.file_types[n] for n in names], dtype=float)
        self.type_names = names
        self.cluster_type = rng.choice(len(names), size=n_clusters, p=probs / probs.sum())
        for i, n in enumerate(names):
            if n in ("video", "image", "archive"):
                self.cluster_ratio[self.cluster_type == i] = 1.0
        self.ws_blocks = self.working_set // self.block_size
        self.perm = rng.permutation(self.ws_blocks)
        self.cdf = np.cumsum(zipf_weights(self.ws_blocks, spec.zipf_s))
        self.cdf[-1] = 1.0
        sizes = np.array(spec.io_sizes)
        self.size_blocks = sizes // self.block_size
        w = np.array(spec.io_weights, dtype=float)
        self.size_p = w / w.sum()

    def data_at(self, offset: int) -> Tuple[float, str]:
        """(ratio, file type) of the data stored at ``offset``."""
        spec = self.spec
        if isinstance(spec, SyntheticSpec):
            return spec.ratio, spec.file_type
        c = offset // self.cluster_size
        return float(self.cluster_ratio[c]), self.type_names[int(self.cluster_type[c])]

    # -- generation ------------------------------------------------------

    def _refill(self, w: int) -> None:
        spec = self.spec
        rng = self._rngs[w]
        out = self._buf[w]
        if isinstance(spec, SyntheticSpec):
            op = "read" if spec.is_read else "write"
            io_sz = spec.io_size
            if spec.pattern.startswith("seq"):
                base = w * self.region
                cur = self._cursor[w]
                for _ in range(_BATCH):
                    out.append((op, base + cur, io_sz))
                    cur = (cur + io_sz) % self.region
                self._cursor[w] = cur
            else:
                units = self.working_set // io_sz
                idx = rng.integers(0, units, size=_BATCH)
                out.extend((op, int(i) * io_sz, io_sz) for i in idx)
        else:
            u_op = rng.random(_BATCH)
            sz = self.size_blocks[rng.choice(len(self.size_blocks), size=_BATCH, p=self.size_p)]
            rank = np.searchsorted(self.cdf, rng.random(_BATCH), side="right")
            blk = self.perm[np.minimum(rank, self.ws_blocks - 1)]
            blk = np.minimum(blk, self.ws_blocks - sz)
            for r, b, n in zip(u_op, blk, sz):
                out.append(("read" if r < spec.read_fraction else "write", int(b) * self.block_size, int(n) * self.block_size))
        out.reverse()

    def next(self, worker: int) -> Request:
        buf = self._buf[worker]
        if not buf:
            self._refill(worker)
        op, off, length = buf.pop()
        ratio, ftype = self.data_at(off)
        seq = self._seq[worker]
        self._seq[worker] = seq + 1
        return Request(op, off, length, ratio, ftype, worker, seq)


def generate(
    spec: WorkloadSpec,
    seed: int,
    count: int,
    partition_bytes: int = 100 * 2**20,
    **kw,
) -> List[Request]:
    """First ``count`` requests, workers taken round robin."""
    stream = RequestStream(spec, seed, partition_bytes, **kw)
    return [stream.next(i % spec.workers) for i in range(count)]


def prefill(
    hostfs,
    channel,
    fill_level: float,
    data_at: Callable[[int], Tuple[float, str]],
    route_for: Callable[[str], tuple],
    churn_fraction: float = 0.05,
    seed: int = 0,
) -> int:
    """Fill ``fill_level`` of the partition, then overwrite random blocks.

    ``route_for(file_type)`` returns ``(route, incompressible)``.  Returns
    the number of bytes written.
    """
    if not 0 <= fill_level <= 1:
        raise ValueError("fill_level must lie in [0, 1]")
    cfg = hostfs.config
    cs = cfg.cluster_size
    n_clusters = int(fill_level * hostfs.n_blocks * cfg.block_size) // cs
    written = 0
    for c in range(n_clusters):
        ratio, ftype = data_at(c * cs)
        route, incomp = route_for(ftype)
        hostfs.host_write(c * cs, cs, ratio, route, channel, incompressible=incomp)
        written += cs
    filled_blocks = n_clusters * cs // cfg.block_size
    n_churn = int(churn_fraction * filled_blocks)
    if n_churn:
        rng = np.random.default_rng([seed, 7])
        for b in rng.integers(0, filled_blocks, size=n_churn):
            off = int(b) * cfg.block_size
            ratio, ftype = data_at(off)
            route, incomp = route_for(ftype)
            hostfs.host_write(off, cfg.block_size, ratio, route, channel, incompressible=incomp)
            written += cfg.block_size
    return written


# ----------------------------------------------------------------------
# trace records

TRACE_HEADER = "# ccsdsim trace v1: time op lba len ratio flags"
DECOMPRESS_BIT = 1 << 3


@dataclass(frozen=True)
class TraceRecord:
    time: float
    cmd: IoCommand
    decompress_on_device: bool = False

    def to_line(self) -> str:
        flags = self.cmd.wire_flags | (DECOMPRESS_BIT if self.decompress_on_device else 0)
        ratio = self.cmd.data.ratio if self.cmd.data is not None else 1.0
        return f"{self.time!r} {self.cmd.op} {self.cmd.wire_lba:#x} {self.cmd.length} {ratio!r} {flags}"

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"malformed trace line: {line!r}")
        t, op, lba, length, ratio, flags = parts
        fl = int(flags)
        cmd = IoCommand.from_wire(op, int(lba, 16), int(length), float(ratio), fl & ~DECOMPRESS_BIT)
        return cls(float(t), cmd, bool(fl & DECOMPRESS_BIT))


def write_trace(records: Iterable[TraceRecord], dest: Union[str, TextIO]) -> None:
    own = isinstance(dest, str)
    fp = open(dest, "w") if own else dest
    try:
        fp.write(TRACE_HEADER + "\n")
        for r in records:
            fp.write(r.to_line() + "\n")
    finally:
        if own:
            fp.close()


def read_trace(src: Union[str, TextIO]) -> List[TraceRecord]:
    own = isinstance(src, str)
    fp = open(src) if own else src
    try:
        return [TraceRecord.from_line(ln) for ln in fp if ln.strip() and not ln.startswith("#")]
    finally:
        if own:
            fp.close()
