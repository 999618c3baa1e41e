import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chunk_layout

from ccsdsim.device import DataDesc, Device, DeviceConfig, Origin
from ccsdsim.hostfs import (
    COMP_FLAG,
    COST_PRESETS,
    Channel,
    CompressionRoute,
    HostFs,
    HostFsConfig,
    LoggingMode,
    select_logging_mode,
)

KB = 1024
MiB = 2**20
SEG = 64 * KB
DEV, HOST, SKIP = CompressionRoute.DEVICE, CompressionRoute.HOST, CompressionRoute.SKIP


def stack(partition=24 * SEG, **kw):
    cfg = HostFsConfig(partition_bytes=partition, segment_bytes=SEG, **kw)
    fs = HostFs(cfg)
    n = cfg.user_segments + cfg.rs_base_segments + cfg.max_extra_segments
    dev = Device(DeviceConfig(capacity=n * SEG, op_fraction=0.5))
    return fs, dev, Channel(dev)


def writes(cmds):
    return [c for c, _ in cmds if c.op == "write"]


# ----------------------------------------------------------------------
# logging mode


@pytest.mark.parametrize(
    "free, mode",
    [(0.50, LoggingMode.NORMAL), (0.04, LoggingMode.THREAD), (0.05, LoggingMode.NORMAL)],
)
def test_select_logging_mode(free, mode):
    assert select_logging_mode(free, 0.05) is mode


# ----------------------------------------------------------------------
# writes


def test_host_compressed_cluster_write():
    fs, dev, ch = stack()
    res = fs.host_write(0, 16 * KB, 2.0, HOST, ch)
    w = writes(res.commands)
    assert len(w) == 1
    assert w[0].length == 8 * KB and w[0].compression_flag == 1
    assert w[0].data.origin is Origin.HOST
    assert res.host_compressed
    assert res.host_time == pytest.approx(fs.cost.request_overhead + fs.cost.compress_time(16 * KB))
    meta = fs.cluster_meta(0)
    assert meta.first_slot == COMP_FLAG and len(meta.slots) == 2 and meta.stored_ratio == 2.0


def test_passthrough_write():
    fs, dev, ch = stack()
    res = fs.host_write(0, 16 * KB, 2.0, DEV, ch)
    w = writes(res.commands)
    assert len(w) == 1
    assert w[0].length == 16 * KB and w[0].compression_flag == 0
    assert res.host_time == pytest.approx(fs.cost.request_overhead)
    assert fs.cluster_meta(0).origin is Origin.DEVICE


def test_partial_overwrite_of_host_cluster_is_read_modify_write():
    fs, dev, ch = stack()
    fs.host_write(0, 16 * KB, 2.0, HOST, ch)
    res = fs.host_write(4 * KB, 4 * KB, 2.0, HOST, ch)
    traffic = sum(c.length for c, _ in res.commands if c.op in ("read", "write"))
    assert traffic > 4 * KB
    assert res.host_decompressed and res.host_compressed
    assert any(c.op == "read" for c, _ in res.commands)
    fs.check_invariants()


def test_incompressible_cluster_stays_raw_under_host_route():
    fs, dev, ch = stack()
    res = fs.host_write(0, 16 * KB, 1.0, HOST, ch)
    assert 0 not in fs.clusters
    assert all(fs.block_origin(fb) is Origin.RAW for fb in range(4))
    assert sum(c.length for c in writes(res.commands)) == 16 * KB


def test_without_ccsd_device_route_becomes_raw():
    fs, dev, ch = stack(with_ccsd=False)
    res = fs.host_write(0, 16 * KB, 2.0, DEV, ch)
    assert writes(res.commands)[0].compression_flag == 1
    assert dev.engine_chunks_compressed == 0


# ----------------------------------------------------------------------
# reads


def test_read_full_host_cluster():
    fs, dev, ch = stack()
    fs.host_write(0, 16 * KB, 2.0, HOST, ch)
    res = fs.host_read(0, 16 * KB, ch)
    reads = [(c, d) for c, d in res.commands if c.op == "read"]
    assert len(reads) == 1 and reads[0][0].length == 8 * KB and reads[0][1] is False
    assert res.host_time == pytest.approx(fs.cost.request_overhead + fs.cost.decompress_time(16 * KB))


def test_read_one_block_of_host_cluster_fetches_whole_cluster():
    fs, dev, ch = stack()
    fs.host_write(0, 16 * KB, 2.0, HOST, ch)
    res = fs.host_read(8 * KB, 4 * KB, ch)
    assert sum(c.length for c, _ in res.commands) == 8 * KB
    assert res.bytes == 4 * KB and res.host_decompressed


def test_read_raw_block_costs_no_codec_time():
    fs, dev, ch = stack()
    fs.host_write(0, 4 * KB, 1.0, SKIP, ch)
    res = fs.host_read(0, 4 * KB, ch)
    assert len(res.commands) == 1
    assert res.host_time == pytest.approx(fs.cost.request_overhead)
    assert not (res.host_decompressed or res.device_decompressed)


def test_device_compressed_read_follows_requested_placement():
    fs, dev, ch = stack()
    fs.host_write(0, 16 * KB, 2.0, DEV, ch)
    on = fs.host_read(0, 16 * KB, ch, device_decompress=True)
    off = fs.host_read(0, 16 * KB, ch, device_decompress=False)
    assert on.device_decompressed and not on.host_decompressed
    assert off.host_decompressed and not off.device_decompressed
    assert off.host_time > on.host_time


def test_unwritten_range_reads_as_hole():
    fs, dev, ch = stack()
    res = fs.host_read(0, 16 * KB, ch)
    assert res.commands == [] and res.bytes == 16 * KB


# ----------------------------------------------------------------------
# segment cleaning


def _fill_first_segment(fs, ch):
    bps = fs.config.blocks_per_segment
    for fb in range(bps):
        fs.host_write(fb * 4096, 4096, 1.0, SKIP, ch)
    return bps


def test_clean_empty_victim():
    fs, dev, ch = stack()
    bps = _fill_first_segment(fs, ch)
    for fb in range(bps):  # overwrite everything, segment 0 is now dead
        fs.host_write(fb * 4096, 4096, 1.0, SKIP, ch)
    free = fs.free_segments
    assert fs.segment_clean(ch)
    assert fs.sc_invocations == 1 and fs.sc_blocks_copied == 0
    assert fs.copy_rate(ch.now) == 0.0
    assert fs.free_segments == free + 1


@pytest.mark.parametrize("k", [1, 5, 15])
def test_clean_victim_with_k_valid_blocks(k):
    fs, dev, ch = stack()
    bps = _fill_first_segment(fs, ch)
    for fb in range(bps - k):
        fs.host_write(fb * 4096, 4096, 1.0, SKIP, ch)
    # fill the second segment so it is not a cheaper victim
    for fb in range(bps - k, bps + bps - (bps - k)):
        fs.host_write((bps + fb) * 4096, 4096, 1.0, SKIP, ch)
    start = len(ch.commands)
    assert fs.pick_victim() == 0
    fs.segment_clean(ch)
    copies = [c for c, _ in ch.commands[start:] if c.op == "write"]
    assert len(copies) == k == fs.sc_blocks_copied
    assert all(c.compression_flag == 1 for c in copies)
    assert fs.sc_rate(ch.now) == pytest.approx(1 / fs.config.rate_window)
    assert fs.copy_rate(ch.now) == pytest.approx(k / fs.config.rate_window)
    fs.check_invariants()


def test_rates_roll_out_of_the_window():
    fs, dev, ch = stack()
    bps = _fill_first_segment(fs, ch)
    for fb in range(bps):
        fs.host_write(fb * 4096, 4096, 1.0, SKIP, ch)
    fs.segment_clean(ch)
    assert fs.sc_rate(ch.now + 0.5) > 0
    assert fs.sc_rate(ch.now + fs.config.rate_window + 0.01) == 0


def _random_overwrites(rs_extra_fraction, n=6000, seed=1):
    cfg = HostFsConfig(partition_bytes=4 * MiB, segment_bytes=SEG, rsr_max=0.2)
    fs = HostFs(cfg)
    n_seg = cfg.user_segments + cfg.rs_base_segments + cfg.max_extra_segments
    dev = Device(DeviceConfig(capacity=n_seg * SEG, op_fraction=0.5))
    fs.resize_reserved(int(rs_extra_fraction * cfg.partition_bytes))
    ch = Channel(dev)
    for off in range(0, cfg.partition_bytes, 64 * KB):
        fs.host_write(off, 64 * KB, 2.0, DEV, ch)
    fs.reset_counters()
    dev.reset_activity()
    rng = random.Random(seed)
    t0 = ch.now
    for _ in range(n):
        fs.host_write(rng.randrange(fs.n_blocks) * 4096, 4096, 2.0, DEV, ch)
    waf = dev.physical_bytes_written / (n * 4096)
    return n * 4096 / (ch.now - t0), waf, fs.sc_blocks_copied


def test_extra_reserved_space_helps_a_full_partition():
    thr0, waf0, copies0 = _random_overwrites(0.0)
    thr20, waf20, copies20 = _random_overwrites(0.2)
    assert copies20 < copies0
    assert thr20 > thr0
    assert waf20 < waf0


# ----------------------------------------------------------------------
# reserved space


def test_resize_reserved_in_segment_steps():
    fs, dev, ch = stack()
    base = fs.active_segments
    assert fs.resize_reserved(3 * SEG + 100) == 3 * SEG
    assert fs.active_segments == base + 3
    assert fs.resize_reserved(10**12) == fs.config.max_extra_segments * SEG
    assert fs.resize_reserved(0) == 0
    assert fs.active_segments == base
    fs.check_invariants()


def test_shrink_is_deferred_while_reserved_segments_hold_data():
    fs, dev, ch = stack(rsr_max=0.25, sc_watermark=0.2)
    fs.resize_reserved(4 * SEG)
    rng = random.Random(0)
    nb = fs.n_blocks
    for fb in range(nb):
        fs.host_write(fb * 4096, 4096, 2.0, DEV, ch)
    for _ in range(3000):
        fs.host_write(rng.randrange(nb) * 4096, 4096, 2.0, DEV, ch)
    assert fs.sc_blocks_copied > 0
    # every segment in use holds cleaned data, so only the free surplus can go now
    valid = fs.valid_blocks()
    active, free = fs.active_segments, fs.free_segments
    fs.resize_reserved(0)
    assert fs.rs_extra == 0
    retired_now = active - fs.active_segments
    assert retired_now == min(4, max(free - 2, 0))
    assert retired_now + fs._pending_shrink == 4
    assert fs.valid_blocks() == valid  # nothing stranded
    fs.check_invariants()
    stalls = fs.stalls
    for _ in range(1000):
        fs.host_write(rng.randrange(nb) * 4096, 4096, 2.0, DEV, ch)
    assert fs._pending_shrink > 0  # still full: the shrink waits
    # deleting half the data lets cleaning build a surplus that pays the shrink
    fs.host_trim(0, nb // 2 * 4096, ch)
    for _ in range(2000):
        fs.host_write((nb // 2 + rng.randrange(nb // 2)) * 4096, 4096, 2.0, DEV, ch)
    assert fs._pending_shrink == 0
    assert fs.active_segments == active - 4
    assert fs.stalls == stalls  # cleaning kept working throughout
    fs.check_invariants()


def test_shrink_never_starves_cleaning():
    fs, dev, ch = stack(rsr_max=0.25)
    fs.resize_reserved(4 * SEG)
    rng = random.Random(0)
    nb = fs.n_blocks
    for fb in range(nb):
        fs.host_write(fb * 4096, 4096, 2.0, DEV, ch)
    for _ in range(2000):
        fs.host_write(rng.randrange(nb) * 4096, 4096, 2.0, DEV, ch)
    fs.resize_reserved(0)
    sc = fs.sc_invocations
    for _ in range(2000):
        fs.host_write(rng.randrange(nb) * 4096, 4096, 2.0, DEV, ch)
        assert fs.free_segments >= 1
    assert fs.sc_invocations > sc
    fs.check_invariants()


def test_expand_cancels_pending_shrink():
    fs, dev, ch = stack()
    fs.resize_reserved(2 * SEG)
    fs._pending_shrink = 2
    fs.rs_extra = 0
    fs.resize_reserved(2 * SEG)
    assert fs._pending_shrink == 0 and fs.rs_extra == 2


# ----------------------------------------------------------------------
# randomized round trip


class _Recording(HostFs):
    """Marks which channel commands were issued by segment cleaning."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.sc_spans = []

    def segment_clean(self, chan):
        start = len(chan.commands)
        done = super().segment_clean(chan)
        self.sc_spans.append((start, len(chan.commands)))
        return done


op_strategy = st.one_of(
    st.tuples(
        st.just("write"),
        st.integers(0, 95),
        st.integers(1, 9),
        st.sampled_from([1.0, 1.5, 2.0, 3.0, 5.0]),
        st.sampled_from([DEV, HOST, SKIP]),
        st.booleans(),
    ),
    st.tuples(st.just("trim"), st.integers(0, 95), st.integers(1, 9)),
)


def _shadow_apply(shadow, op, bpc):
    """Expected (origin, ratio) per file block after ``op``."""
    if op[0] == "trim":
        _, fb0, n = op
        for cid in range(fb0 // bpc, (fb0 + n - 1) // bpc + 1):
            members = [fb for fb in range(cid * bpc, (cid + 1) * bpc) if fb0 <= fb < fb0 + n]
            host = shadow.get(cid * bpc, (None,))[0] is Origin.HOST
            if host and len(members) < bpc:
                continue
            for fb in (range(cid * bpc, (cid + 1) * bpc) if host else members):
                shadow.pop(fb, None)
        return
    _, fb0, n, ratio, route, incomp = op
    for cid in range(fb0 // bpc, (fb0 + n - 1) // bpc + 1):
        whole = range(cid * bpc, (cid + 1) * bpc)
        members = [fb for fb in whole if fb0 <= fb < fb0 + n]
        was_host = shadow.get(cid * bpc, (None,))[0] is Origin.HOST
        if route is HOST and not incomp:
            saves = math.ceil(math.ceil(bpc * 4096 / ratio) / 4096) < bpc
            for fb in whole:
                shadow[fb] = (Origin.HOST if saves else Origin.RAW, ratio)
            continue
        origin = Origin.DEVICE if route is DEV and not incomp else Origin.RAW
        targets = whole if (was_host and len(members) < bpc) else members
        if was_host and len(members) == bpc:
            targets = members
        for fb in targets:
            shadow[fb] = (origin, ratio)


@settings(max_examples=60, deadline=None)
@given(st.lists(op_strategy, max_size=80))
def test_random_trace_round_trip(ops):
    cfg = HostFsConfig(partition_bytes=6 * SEG, segment_bytes=SEG)
    fs = _Recording(cfg)
    nb = fs.n_blocks
    n_seg = cfg.user_segments + cfg.rs_base_segments + cfg.max_extra_segments
    dev = Device(DeviceConfig(capacity=n_seg * SEG, op_fraction=4.0))
    ch = Channel(dev)
    shadow = {}
    bpc = cfg.blocks_per_cluster
    for op in ops:
        fb0, n = op[1], min(op[2], nb - op[1])
        op = (op[0], fb0, n) + op[3:]
        if op[0] == "trim":
            fs.host_trim(fb0 * 4096, n * 4096, ch)
        else:
            fs.host_write(fb0 * 4096, n * 4096, op[3], op[4], ch, incompressible=op[5])
        _shadow_apply(shadow, op, bpc)
        fs.check_invariants()

    for fb in range(nb):
        want = shadow.get(fb)
        assert fs.block_origin(fb) == (want[0] if want else None), fb
        if want is None:
            continue
        origin, ratio = want
        if origin is Origin.HOST:
            assert fs.clusters[fb // bpc].stored_ratio == ratio
        else:
            assert dev.lookup(fs.blk_slot[fb]) == DataDesc(4096, ratio, origin)
        # every block reads back without a protocol error from either placement
        fs.host_read(fb * 4096, 4096, ch, device_decompress=True)
        fs.host_read(fb * 4096, 4096, ch, device_decompress=False)

    # accounting identity: foreground plus cleaning writes are the device write stream
    sc_idx = {i for a, b in fs.sc_spans for i in range(a, b)}
    sc_writes = [c for i, (c, _) in enumerate(ch.commands) if i in sc_idx and c.op == "write"]
    fg_writes = [c for i, (c, _) in enumerate(ch.commands) if i not in sc_idx and c.op == "write"]
    assert len(sc_writes) == fs.sc_blocks_copied
    stored = sum(s for c in sc_writes + fg_writes for _, s, _, _ in chunk_layout(c))
    assert stored == ch.physical_bytes
    assert dev.host_bytes_written == sum(c.length for c in sc_writes + fg_writes)
    assert dev.gc_migrated_bytes == 0
    dev.sync()
    assert dev.physical_bytes_written == math.ceil(stored / dev.config.page_size) * dev.config.page_size


# ----------------------------------------------------------------------
# configuration and cost model


def test_mount_options():
    cfg = HostFsConfig.from_mount_options("with_CCSD=false,granularity=4096,algorithm=lz4,rsr_max=0.1")
    assert not cfg.with_ccsd and cfg.algorithm == "lz4" and cfg.rsr_max == 0.1
    with pytest.raises(ValueError):
        HostFsConfig.from_mount_options("nonsense=1")


@pytest.mark.parametrize("name", sorted(COST_PRESETS))
def test_decompression_is_cheaper_than_compression(name):
    cost = COST_PRESETS[name]
    assert cost.decompress_rate > cost.compress_rate > 0
    assert cost.decompress_time(16 * KB) < cost.compress_time(16 * KB)
    scaled = cost.scaled(10)
    assert scaled.compress_time(16 * KB) == pytest.approx(10 * cost.compress_time(16 * KB))


def test_config_validation():
    with pytest.raises(ValueError):
        HostFsConfig(segment_bytes=SEG + 1)
    with pytest.raises(ValueError):
        HostFsConfig(algorithm="brotli")
    with pytest.raises(ValueError):
        HostFsConfig(partition_bytes=SEG, segment_bytes=SEG)
