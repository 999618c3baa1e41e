"""Closed-loop experiment driver, metrics and reports.

A run wires one :class:`~ccsdsim.device.Device`, one
:class:`~ccsdsim.hostfs.HostFs`, a :class:`~ccsdsim.scheduler.Scheduler`
and optionally the reserved-space arbiter, then lets ``workers`` request
streams drive them.  Each worker issues its next request the moment the
previous one completes.  Periodic work (device thermal tick, temperature
poll, arbiter evaluation, per-second sampling) runs on a fixed tick grid
and is always processed before any request issued at a later time.

The model is scaled down: bandwidths and host codec rates are divided by
``scale`` so that a twenty minute run stays cheap while every ratio that
drives heat, throughput ordering and cleaning stays the same.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .device import Device, DeviceConfig, DeviceOffline, Mode
from .hostfs import COST_PRESETS, Channel, CompressionRoute, HostFs, HostFsConfig
from .osa import Arbiter, OsaParams
from .scheduler import OSA_SCHEMES, PolicyConfig, Scheduler, Scheme
from .thermal import ThermalParams
from .workload import (
    ProfileSpec,
    RequestStream,
    SyntheticSpec,
    TraceRecord,
    WorkloadSpec,
    prefill,
    spec_from_dict,
)

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "RunReport",
    "run",
    "compute_waf",
    "compare",
    "Comparison",
    "replay",
    "ReplayResult",
]

SCHEMA_VERSION = 1
MiB = 2**20


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]) -> None:
        self.problems = list(problems)
        super().__init__("invalid experiment config: " + "; ".join(self.problems))


@dataclass
class ExperimentConfig:
    scheme: str = "Baseline"
    workload: WorkloadSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    duration: Optional[float] = None  # defaults to the workload's duration
    scale: float = 2000.0
    partition_bytes: int = 100 * MiB
    segment_bytes: int = 512 * 1024
    real_segment_bytes: int = 2 * MiB
    t_soft: float = 76.0
    t_hard: float = 85.0
    poll_interval: float = 1.0
    burst_slope: Optional[float] = None
    osa: Optional[bool] = None  # defaults to on for Waltzs / Waltzp
    ft_sc: float = 4.0
    ft_c: float = 256.0
    t_step: float = 0.01
    rsr_max: float = 0.2
    rate_window: float = 120.0
    algorithm: str = "zstd"
    thermal: ThermalParams = field(default_factory=ThermalParams)
    device: Dict[str, Any] = field(default_factory=dict)  # DeviceConfig overrides
    hostfs: Dict[str, Any] = field(default_factory=dict)  # HostFsConfig overrides
    tick: float = 0.1
    churn_fraction: float = 0.05
    host_cpus: int = 8
    record_trace: bool = False

    # -- validation ------------------------------------------------------

    def problems(self) -> List[str]:
        out: List[str] = []
        try:
            Scheme.parse(self.scheme)
        except ValueError as exc:
            out.append(f"scheme: {exc}")
        if not isinstance(self.workload, (SyntheticSpec, ProfileSpec)):
            out.append("workload: must be a SyntheticSpec or ProfileSpec")
        if self.duration is not None and not self.duration > 0:
            out.append("duration: must be > 0")
        if not self.scale > 0:
            out.append("scale: must be > 0")
        if self.segment_bytes <= 0 or self.partition_bytes % self.segment_bytes:
            out.append("partition_bytes: must be a multiple of segment_bytes")
        if not self.t_soft < self.t_hard < 86.0 + 1e-9:
            out.append("t_soft/t_hard: need t_soft < t_hard < t_emergency")
        if not self.tick > 0 or abs(round(1.0 / self.tick) * self.tick - 1.0) > 1e-9:
            out.append("tick: must divide one second")
        if self.poll_interval <= 0:
            out.append("poll_interval: must be > 0")
        for name in ("ft_sc", "ft_c", "t_step", "rsr_max", "rate_window"):
            if not getattr(self, name) > 0:
                out.append(f"{name}: must be > 0")
        if self.t_step > self.rsr_max:
            out.append("t_step: must not exceed rsr_max")
        step = int(round(self.t_step * self.partition_bytes))
        if self.segment_bytes > 0 and step % self.segment_bytes:
            out.append("t_step: step must be a whole number of segments")
        if self.algorithm not in COST_PRESETS:
            out.append(f"algorithm: unknown preset {self.algorithm!r}")
        if self.host_cpus <= 0:
            out.append("host_cpus: must be > 0")
        if not 0 <= self.churn_fraction <= 1:
            out.append("churn_fraction: must lie in [0, 1]")
        for key in self.device:
            if key not in {f.name for f in fields(DeviceConfig)}:
                out.append(f"device.{key}: unknown field")
        for key in self.hostfs:
            if key not in {f.name for f in fields(HostFsConfig)}:
                out.append(f"hostfs.{key}: unknown field")
        return out

    def validate(self) -> "ExperimentConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    # -- derived configuration ------------------------------------------

    @property
    def scheme_enum(self) -> Scheme:
        return Scheme.parse(self.scheme)

    @property
    def run_duration(self) -> float:
        return float(self.duration if self.duration is not None else self.workload.duration)

    @property
    def osa_enabled(self) -> bool:
        return self.osa if self.osa is not None else self.scheme_enum in OSA_SCHEMES

    def hostfs_config(self) -> HostFsConfig:
        kw = dict(
            partition_bytes=self.partition_bytes,
            segment_bytes=self.segment_bytes,
            rsr_max=self.rsr_max,
            rate_window=self.rate_window,
            algorithm=self.algorithm,
        )
        kw.update(self.hostfs)
        return HostFsConfig(**kw)

    def device_config(self, hostfs: HostFsConfig) -> DeviceConfig:
        n_segments = hostfs.user_segments + hostfs.rs_base_segments + hostfs.max_extra_segments
        kw = dict(
            capacity=n_segments * hostfs.segment_bytes,
            engine_latency=10e-6 * self.scale,
            program_bandwidth=1.0e9 / self.scale,
            read_bandwidth=2.0e9 / self.scale,
        )
        kw.update(self.device)
        return DeviceConfig(**kw)

    def policy(self) -> PolicyConfig:
        return PolicyConfig(
            scheme=self.scheme_enum,
            t_soft=self.t_soft,
            t_hard=self.t_hard,
            poll_interval=self.poll_interval,
            burst_slope=self.burst_slope,
        )

    def osa_params(self) -> OsaParams:
        return OsaParams(
            ft_sc=self.ft_sc,
            ft_c=self.ft_c,
            t_s=self.t_step,
            rs_max=self.rsr_max,
            partition_bytes=self.partition_bytes,
        )

    def fill_plan(self, stream: RequestStream) -> tuple:
        """(fill level, churn fraction) applied before the run starts.

        An explicit fill level ages the partition with random overwrites so
        cleaning has work to do; read patterns without one just lay out
        their working set.
        """
        w = self.workload
        if w.fill_level is not None:
            return float(w.fill_level), self.churn_fraction
        if isinstance(w, SyntheticSpec) and w.is_read:
            return stream.working_set / self.partition_bytes, 0.0
        return 0.0, 0.0

    # -- serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["workload"] = self.workload.to_dict()
        d["thermal"] = self.thermal.to_dict()
        d["device"] = dict(self.device)
        d["hostfs"] = dict(self.hostfs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        if "workload" in d and isinstance(d["workload"], Mapping):
            d["workload"] = spec_from_dict(d["workload"])
        if "thermal" in d and isinstance(d["thermal"], Mapping):
            d["thermal"] = ThermalParams.from_dict(d["thermal"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**d)


@dataclass
class RunReport:
    config: dict
    scheme: str
    workload: str
    duration: float
    series: Dict[str, list]
    totals: Dict[str, Any]
    tasks: Dict[str, Any]
    cpu: Dict[str, Any]
    shutdown_time: Optional[float]
    max_temp: float
    max_sensor_temp: int
    mean_throughput: float
    osa: Dict[str, Any]
    schema_version: int = SCHEMA_VERSION
    trace: Optional[List[TraceRecord]] = None

    @property
    def waf(self) -> Optional[float]:
        return compute_waf(self)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "trace"}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def series_csv(self) -> str:
        keys = list(self.series)
        rows = [",".join(keys)]
        for vals in zip(*(self.series[k] for k in keys)):
            rows.append(",".join(str(v) for v in vals))
        return "\n".join(rows) + "\n"


def compute_waf(report: RunReport) -> Optional[float]:
    """Physical flash bytes over host logical bytes; None without host writes."""
    logical = report.totals["host_logical_bytes"]
    if logical <= 0:
        return None
    return report.totals["physical_bytes"] / logical


def _workload_name(spec: WorkloadSpec) -> str:
    return spec.pattern if isinstance(spec, SyntheticSpec) else spec.name


def run(config: ExperimentConfig) -> RunReport:
    config.validate()
    duration = config.run_duration
    scheme = config.scheme_enum
    fs_cfg = config.hostfs_config()
    dev_cfg = config.device_config(fs_cfg)
    cost = COST_PRESETS[fs_cfg.algorithm].scaled(config.scale)
    fs = HostFs(fs_cfg, cost)
    dev = Device(dev_cfg, config.thermal)
    sched = Scheduler(config.policy())
    workers = config.workload.workers
    stream = RequestStream(config.workload, config.seed, fs.n_blocks * fs_cfg.block_size, fs_cfg.block_size, fs_cfg.cluster_size)
    bs = fs_cfg.block_size

    # -- prefill at ambient through the scheme's own routing --------------
    sched.poll(dev, 0.0)
    trace: Optional[list] = [] if config.record_trace else None
    fill, churn = config.fill_plan(stream)
    if fill > 0:
        pre_trace: Optional[list] = [] if trace is not None else None
        pre = Channel(dev, 0.0, pre_trace)
        prefill(
            fs,
            pre,
            fill,
            stream.data_at,
            lambda ftype: sched.decide_write(ftype, None),
            churn,
            config.seed,
        )
        dev.sync()
        if pre_trace:
            # prefill happens before the clock starts; stamp it at zero
            trace.extend((0.0, c, d) for _, c, d in pre_trace)
    dev.reset_activity()
    fs.reset_counters()
    sched = Scheduler(config.policy())
    sched.poll(dev, 0.0)

    arbiter = None
    if config.osa_enabled:
        arbiter = Arbiter(
            config.osa_params(),
            sc_scale=config.scale * fs_cfg.segment_bytes / config.real_segment_bytes,
            c_scale=config.scale,
        )

    n_sec = int(math.ceil(duration))
    thr = np.zeros(n_sec + 1)
    series = {"time": [], "temp": [], "temp_model": [], "mode": [], "throughput": [], "rs_extra": []}
    ticks_per_sec = int(round(1.0 / config.tick))
    k = 1
    max_temp = dev.temp_state.temp
    max_sensor = math.floor(max_temp)

    def advance(t: float) -> None:
        nonlocal k, max_temp, max_sensor
        while True:
            tt = k * config.tick
            if tt > t + 1e-12 or tt > duration + 1e-12:
                return
            was_up = dev.mode is not Mode.SHUTDOWN
            dev.tick(tt)
            temp = dev.temp_state.temp
            if was_up:  # include the reading that latched a shutdown
                max_temp = max(max_temp, temp)
                max_sensor = max(max_sensor, math.floor(temp))
            if sched.due(tt - 1e-9):
                sched.poll(dev, tt)
            if arbiter is not None and tt >= arbiter.next_eval - 1e-9 and dev.mode is not Mode.SHUTDOWN:
                arbiter.evaluate(tt, fs, dev.smart_query().saved_space)
            if k % ticks_per_sec == 0:
                s = k // ticks_per_sec
                info = dev.smart_query()
                series["time"].append(s)
                series["temp"].append(info.temperature)
                series["temp_model"].append(round(temp, 6))
                series["mode"].append(info.mode.value)
                series["throughput"].append(0.0)  # filled in at the end
                series["rs_extra"].append(fs.rs_extra * fs_cfg.segment_bytes)
            k += 1

    counts = dict(
        compress_device=0,
        compress_host=0,
        compress_skip=0,
        incompressible=0,
        decompress_device=0,
        decompress_host=0,
        plain_reads=0,
    )
    host_logical = 0
    host_read = 0
    codec_time = 0.0
    requests = 0
    busy_host_until = [-1.0] * workers
    peak_workers = 0
    ready = [(0.0, w) for w in range(workers)]
    heapq.heapify(ready)

    cs = fs_cfg.cluster_size
    current: List[Optional[dict]] = [None] * workers

    while ready:
        t, w = heapq.heappop(ready)
        if t >= duration:
            continue
        advance(t)
        if dev.mode is Mode.SHUTDOWN:
            break
        job = current[w]
        if job is None:
            req = stream.next(w)
            key = req.offset // bs
            # one routing decision per request, pieces issued back to back
            pieces = []
            off, stop = req.offset, req.offset + req.length
            while off < stop:
                nxt = min((off // cs + 1) * cs, stop)
                pieces.append((off, nxt - off))
                off = nxt
            if req.op == "write":
                route, incomp = sched.decide_write(req.file_type, key)
                job = dict(req=req, pieces=pieces, i=0, route=route, incomp=incomp, dd=sched.decide_read(), hd=False, dv=False, codec=0.0)
            else:
                if scheme is Scheme.FPC:
                    sched.fpc.observe(key)
                job = dict(req=req, pieces=pieces, i=0, hd=False, dv=False, codec=0.0)
            current[w] = job
        req = job["req"]
        off, length = job["pieces"][job["i"]]
        chan = Channel(dev, t, trace)
        try:
            if req.op == "write":
                fs.host_write(off, length, req.ratio, job["route"], chan, incompressible=job["incomp"], device_decompress=job["dd"])
                # counted per piece so WAF covers exactly what reached the device
                host_logical += length
            else:
                # decompression placement follows the cache piece by piece
                res = fs.host_read(off, length, chan, sched.decide_read())
                job["hd"] |= res.host_decompressed
                job["dv"] |= res.device_decompressed
        except DeviceOffline:
            break
        end = chan.now
        codec = chan.host_time - cost.request_overhead
        job["codec"] += codec
        if codec > 0 and end > duration:
            # only the share of the piece that falls inside the run counts
            codec *= max(duration - t, 0.0) / (end - t)
        codec_time += codec
        if codec > 0:
            busy_host_until[w] = end
            peak_workers = max(peak_workers, sum(1 for u in busy_host_until if u > t))
        job["i"] += 1
        if job["i"] == len(job["pieces"]):
            current[w] = None
            requests += 1
            if req.op == "write":
                if job["incomp"]:
                    counts["incompressible"] += 1
                else:
                    counts[f"compress_{job['route'].value}"] += 1
            else:
                if job["hd"]:
                    counts["decompress_host"] += 1
                if job["dv"]:
                    counts["decompress_device"] += 1
                if not (job["hd"] or job["dv"]):
                    counts["plain_reads"] += 1
                host_read += req.length
            if end <= duration:
                thr[min(int(end), n_sec)] += req.length
        heapq.heappush(ready, (end, w))

    advance(duration)
    shutdown = dev.shutdown_time
    if shutdown is not None:
        # requests still in flight when the device went down never complete
        cut = int(math.floor(shutdown))
        thr[cut + 1 :] = 0.0
    per_sec = [float(x) for x in thr[: len(series["time"])]]
    # bucket i collects completions in [i, i + 1); sample s covers (s - 1, s]
    series["throughput"] = per_sec
    n_series = len(series["time"])
    total_done = float(sum(per_sec))

    comp_total = counts["compress_device"] + counts["compress_host"] + counts["compress_skip"]
    host_tasks = counts["compress_host"] + counts["decompress_host"]
    dev_tasks = counts["compress_device"] + counts["decompress_device"]
    tasks = dict(counts)
    tasks["host_share"] = host_tasks / (host_tasks + dev_tasks) if host_tasks + dev_tasks else None
    tasks["device_compress_share"] = counts["compress_device"] / comp_total if comp_total else None

    totals = dict(
        requests=requests,
        host_logical_bytes=host_logical,
        host_read_bytes=host_read,
        completed_bytes=int(total_done),
        physical_bytes=dev.physical_bytes_written,
        device_gc_migrated_bytes=dev.gc_migrated_bytes,
        device_gc_blocks_erased=dev.gc_blocks_erased,
        engine_chunks_compressed=dev.engine_chunks_compressed,
        engine_chunks_decompressed=dev.engine_chunks_decompressed,
        sc_invocations=fs.sc_invocations,
        sc_blocks_copied=fs.sc_blocks_copied,
        ssr_allocations=fs.ssr_allocations,
        stalls=fs.stalls,
        waf=(dev.physical_bytes_written / host_logical) if host_logical else None,
    )
    cpu = dict(
        host_codec_seconds=codec_time,
        cpu_fraction=codec_time / (duration * config.host_cpus),
        peak_memory_bytes=peak_workers * fs_cfg.cluster_size,
        peak_codec_workers=peak_workers,
    )
    osa_info = dict(
        enabled=arbiter is not None,
        final_rs_extra=fs.rs_extra * fs_cfg.segment_bytes,
        max_rs_extra=max(series["rs_extra"], default=0),
        expansions=sum(1 for h in arbiter.history if h[1] == "expand") if arbiter else 0,
        shrinks=sum(1 for h in arbiter.history if h[1] == "shrink") if arbiter else 0,
    )
    return RunReport(
        config=config.to_dict(),
        scheme=scheme.value,
        workload=_workload_name(config.workload),
        duration=duration,
        series=series,
        totals=totals,
        tasks=tasks,
        cpu=cpu,
        shutdown_time=shutdown,
        max_temp=max_temp,
        max_sensor_temp=int(max_sensor),
        mean_throughput=total_done / duration,
        osa=osa_info,
        trace=[TraceRecord(tm, c, d) for tm, c, d in trace] if trace is not None else None,
    )


# ----------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    baseline: str
    rows: List[dict]
    violations: List[str] = field(default_factory=list)

    def table(self) -> str:
        head = f"{'scheme':<10} {'thr (B/s)':>12} {'thr/base':>9} {'WAF':>7} {'WAF/base':>9} {'maxT':>6} {'shutdown':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            waf = "-" if r["waf"] is None else f"{r['waf']:.3f}"
            nwaf = "-" if r["waf_norm"] is None else f"{r['waf_norm']:.3f}"
            sd = "-" if r["shutdown_time"] is None else f"{r['shutdown_time']:.0f}s"
            lines.append(
                f"{r['scheme']:<10} {r['throughput']:>12.1f} {r['throughput_norm']:>9.3f} {waf:>7} {nwaf:>9} {r['max_temp']:>6.1f} {sd:>9}"
            )
        return "\n".join(lines)


def compare(
    configs: Sequence[ExperimentConfig],
    baseline: int = 0,
    orderings: Sequence[tuple] = (),
    reports: Optional[Sequence[RunReport]] = None,
) -> Comparison:
    """Run (or reuse ``reports`` for) ``configs`` and normalise to ``configs[baseline]``.

    ``orderings`` holds ``(metric, a, op, b)`` tuples such as
    ``("throughput", "Waltzp", ">=", "Waltzs")``; failures land in
    :attr:`Comparison.violations`.
    """
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    ref = configs[0]
    for c in configs[1:]:
        if c.workload.to_dict() != ref.workload.to_dict() or c.seed != ref.seed:
            raise ValueError("compared configs must share workload and seed")
    reps = list(reports) if reports is not None else [run(c) for c in configs]
    base = reps[baseline]
    rows = []
    for r in reps:
        waf = compute_waf(r)
        bw = compute_waf(base)
        rows.append(
            dict(
                scheme=r.scheme,
                throughput=r.mean_throughput,
                throughput_norm=r.mean_throughput / base.mean_throughput if base.mean_throughput else math.nan,
                waf=waf,
                waf_norm=(waf / bw) if waf is not None and bw else None,
                max_temp=r.max_temp,
                shutdown_time=r.shutdown_time,
            )
        )
    by = {row["scheme"]: row for row in rows}
    ops = {">": lambda a, b: a > b, ">=": lambda a, b: a >= b, "<": lambda a, b: a < b, "<=": lambda a, b: a <= b, "==": lambda a, b: a == b}
    violations = []
    for metric, a, op, b in orderings:
        va, vb = by[a][metric], by[b][metric]
        if va is None or vb is None or not ops[op](va, vb):
            violations.append(f"{metric}: {a} {op} {b} failed ({va} vs {vb})")
    return Comparison(baseline=base.scheme, rows=rows, violations=violations)


# ----------------------------------------------------------------------
# device-level replay


@dataclass
class ReplayResult:
    host_bytes: int
    physical_bytes: int
    waf: Optional[float]
    reads: List[tuple]
    device: Device


def replay(records: Sequence[TraceRecord], device_config: DeviceConfig | None = None) -> ReplayResult:
    """Feed a command trace straight into a fresh device.

    Returns the device-visible write stream, flash programs, and one
    ``(lba, size, origin)`` tuple per read command.
    """
    dev = Device(device_config or DeviceConfig(capacity=256 * MiB))
    reads = []
    host = 0
    for r in records:
        c = dev.submit(r.cmd, r.time, r.decompress_on_device)
        if r.cmd.op == "write":
            host += r.cmd.length
        elif r.cmd.op == "read":
            reads.append((r.cmd.lba, c.data.size, c.data.origin.value))
    return ReplayResult(host, dev.physical_bytes_written, dev.physical_bytes_written / host if host else None, reads, dev)
