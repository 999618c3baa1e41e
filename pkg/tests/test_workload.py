import io
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccsdsim.device import DataDesc, Device, DeviceConfig, IoCommand, Origin
from ccsdsim.harness import ExperimentConfig, run
from ccsdsim.hostfs import Channel, CompressionRoute, HostFs, HostFsConfig
from ccsdsim.workload import (
    DECOMPRESS_BIT,
    PROFILES,
    ProfileSpec,
    RATIO_BINS,
    RequestStream,
    SyntheticSpec,
    TraceRecord,
    generate,
    load_profile,
    prefill,
    read_trace,
    sample_ratios,
    spec_from_dict,
    write_trace,
    zipf_weights,
)

KB = 1024
MiB = 2**20


def test_sequential_offsets_advance_and_wrap():
    spec = SyntheticSpec("seq-write", workers=2, working_set=2 * MiB)
    s = RequestStream(spec, 0, 4 * MiB)
    region = MiB
    offs = [s.next(1).offset for _ in range(region // (128 * KB) + 2)]
    assert offs[0] == region
    assert all(b - a == 128 * KB for a, b in zip(offs, offs[1:-2]))
    assert offs[-2] == region  # wrapped to the start of the worker's region
    assert all(region <= o < 2 * region for o in offs)


def test_random_offsets_are_aligned_inside_the_working_set():
    spec = SyntheticSpec("rand-read", working_set=MiB)
    reqs = generate(spec, 3, 5000, partition_bytes=4 * MiB)
    assert all(r.offset % 4096 == 0 and r.offset + r.length <= MiB for r in reqs)
    assert all(r.op == "read" and r.ratio == 2.0 for r in reqs)


@pytest.mark.parametrize("spec", [SyntheticSpec("rand-read"), SyntheticSpec("seq-write"), load_profile("varmail")])
def test_streams_are_pure_functions_of_spec_and_seed(spec):
    a = generate(spec, 11, 3000)
    b = generate(spec, 11, 3000)
    c = generate(spec, 12, 3000)
    assert a == b
    if not isinstance(spec, SyntheticSpec) or spec.pattern.startswith("rand"):
        assert a != c


def test_worker_streams_do_not_depend_on_interleaving():
    spec = load_profile("fileserver")
    s1 = RequestStream(spec, 5, 100 * MiB)
    s2 = RequestStream(spec, 5, 100 * MiB)
    a = [s1.next(3) for _ in range(500)]
    for w in (0, 1, 2, 4):
        for _ in range(700):
            s2.next(w)
    b = [s2.next(3) for _ in range(500)]
    assert a == b


def test_oltp_ratios_and_zipf_skew():
    spec = load_profile("oltp")
    rng = np.random.default_rng(0)
    ratios = sample_ratios(spec, rng, 100_000)
    assert 3.0 <= ratios.mean() <= 4.0
    assert ratios.min() >= 3.0 and ratios.max() <= 4.0
    # rank-frequency fit: log(freq) against log(rank) has slope about -s
    freq = np.array(sorted(Counter(ratios.tolist()).values(), reverse=True), dtype=float)
    assert len(freq) == RATIO_BINS
    slope = np.polyfit(np.log(np.arange(1, len(freq) + 1)), np.log(freq), 1)[0]
    assert slope == pytest.approx(-spec.zipf_s, abs=0.05)
    # the most common ratio is the lowest bin
    assert Counter(ratios.tolist()).most_common(1)[0][0] == pytest.approx(3.0 + 0.5 / RATIO_BINS)


def test_oltp_request_stream_ratios_and_hot_blocks():
    spec = load_profile("oltp")
    reqs = generate(spec, 1, 100_000)
    ratios = np.array([r.ratio for r in reqs])
    assert 3.0 <= ratios.mean() <= 4.0
    hits = Counter(r.offset for r in reqs)
    freq = np.array(sorted(hits.values(), reverse=True)[:50], dtype=float)
    slope = np.polyfit(np.log(np.arange(1, 51)), np.log(freq), 1)[0]
    assert -1.3 < slope < -0.7
    writes = sum(r.op == "write" for r in reqs) / len(reqs)
    assert writes == pytest.approx(1 - spec.read_fraction, abs=0.01)


def test_zipf_weights_normalised():
    w = zipf_weights(1000, 0.99)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.diff(w) < 0)


def test_declared_ratio_is_carried_unchanged():
    spec = load_profile("webserver")
    s = RequestStream(spec, 2, 100 * MiB)
    for w in range(spec.workers):
        for _ in range(100):
            r = s.next(w)
            assert (r.ratio, r.file_type) == s.data_at(r.offset)


def test_rejects_working_set_larger_than_partition():
    with pytest.raises(ValueError, match="working set"):
        RequestStream(SyntheticSpec("rand-write", working_set=8 * MiB), 0, 4 * MiB)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec("zigzag")
    with pytest.raises(ValueError):
        SyntheticSpec(ratio=0.5)
    with pytest.raises(ValueError):
        ProfileSpec(ratio_range=(4.0, 3.0))
    with pytest.raises(ValueError):
        ProfileSpec(io_sizes=(4096, 8192), io_weights=(1.0,))
    with pytest.raises(ValueError):
        RequestStream(SyntheticSpec("seq-write", io_size=1000), 0, MiB)


@pytest.mark.parametrize("name", PROFILES)
def test_bundled_profiles_load_and_round_trip(name):
    spec = load_profile(name)
    assert spec.name == name
    assert spec_from_dict(spec.to_dict()) == spec
    assert spec_from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_profile_overrides_and_file(tmp_path):
    assert load_profile("oltp", read_fraction=0.5).read_fraction == 0.5
    p = tmp_path / "mine.json"
    p.write_text(json.dumps({"name": "mine", "ratio_range": [1.5, 1.5], "read_fraction": 1.0}))
    spec = load_profile(str(p))
    assert spec.name == "mine" and spec.is_read
    with pytest.raises(ValueError):
        load_profile("nosuchprofile")


def test_synthetic_round_trip():
    spec = SyntheticSpec("rand-write", io_size=8192, fill_level=0.5)
    assert spec_from_dict(spec.to_dict()) == spec


# ----------------------------------------------------------------------
# prefill


def small_stack(segments=64):
    cfg = HostFsConfig(partition_bytes=segments * 64 * KB, segment_bytes=64 * KB)
    fs = HostFs(cfg)
    n = cfg.user_segments + cfg.rs_base_segments + cfg.max_extra_segments
    dev = Device(DeviceConfig(capacity=n * cfg.segment_bytes, op_fraction=0.5))
    return fs, dev, Channel(dev)


def route(_ftype):
    return CompressionRoute.DEVICE, False


def test_prefill_zero_is_a_no_op():
    fs, dev, ch = small_stack()
    assert prefill(fs, ch, 0.0, lambda off: (2.0, "data"), route) == 0
    assert dev.host_bytes_written == 0 and fs.valid_blocks() == 0


def test_prefill_below_watermark_does_not_clean():
    fs, dev, ch = small_stack()
    written = prefill(fs, ch, 0.8, lambda off: (2.0, "data"), route, churn_fraction=0.05)
    assert written > 0.8 * fs.n_blocks * 4096
    assert fs.sc_invocations == 0
    assert fs.free_fraction > fs.config.sc_watermark
    # churn leaves invalid blocks behind in the filled segments
    assert fs.valid_blocks() == int(0.8 * fs.n_blocks * 4096) // fs.config.cluster_size * fs.config.blocks_per_cluster


def test_prefill_validates_fill_level():
    fs, _, ch = small_stack()
    with pytest.raises(ValueError):
        prefill(fs, ch, 1.5, lambda off: (2.0, "data"), route)


def test_full_partition_cleans_within_the_first_second():
    wl = SyntheticSpec("rand-write", duration=1.0, fill_level=1.0)
    rep = run(ExperimentConfig(scheme="TCS", workload=wl))
    assert rep.totals["sc_invocations"] > 0


def test_lightly_filled_partition_does_not_clean_early():
    wl = SyntheticSpec("rand-write", duration=1.0, fill_level=0.8)
    rep = run(ExperimentConfig(scheme="TCS", workload=wl))
    assert rep.totals["sc_invocations"] == 0


# ----------------------------------------------------------------------
# trace records


lbas = st.integers(0, (1 << 48) - 1)


@given(
    st.floats(min_value=0, max_value=1e6, allow_nan=False),
    st.sampled_from(["read", "write", "trim"]),
    lbas,
    st.integers(1, 1 << 20),
    st.floats(min_value=1.0, max_value=16.0),
    st.integers(0, 1),
    st.integers(0, 1),
    st.sampled_from(list(Origin)),
    st.booleans(),
)
def test_trace_line_round_trip(t, op, lba, length, ratio, cflag, incomp, origin, dd):
    data = DataDesc(length, ratio, origin) if op == "write" else None
    cmd = IoCommand(op, lba, length, cflag, incomp, data)
    rec = TraceRecord(t, cmd, dd)
    back = TraceRecord.from_line(rec.to_line())
    assert back == rec


def test_trace_file_round_trip(tmp_path):
    recs = [
        TraceRecord(0.0, IoCommand("write", 0, 8192, 1, 0, DataDesc(8192, 2.0, Origin.HOST))),
        TraceRecord(0.5, IoCommand("write", 4, 4096, 0, 1, DataDesc(4096, 1.0, Origin.RAW))),
        TraceRecord(1.25, IoCommand("read", 0, 8192), True),
    ]
    path = tmp_path / "t.trace"
    write_trace(recs, str(path))
    text = path.read_text()
    assert text.startswith("#")
    assert "0x8000000000000004" in text  # incompressible label in bit 63
    assert int(text.splitlines()[3].split()[-1]) & DECOMPRESS_BIT
    assert read_trace(str(path)) == recs
    buf = io.StringIO()
    write_trace(recs, buf)
    buf.seek(0)
    assert read_trace(buf) == recs


def test_malformed_trace_line():
    with pytest.raises(ValueError):
        TraceRecord.from_line("0.0 write 0x0 4096")
