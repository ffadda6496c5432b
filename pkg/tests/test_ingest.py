import json
import random

import dpkt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import FIXTURES, Pkt, oracle_totals, write_capture
from udfs.errors import DuplicateFlow, EmptyTrace, MalformedRecord, MissingTimestamp, UnreadableCapture
from udfs.ingest import (
    Flow,
    IngestStats,
    PacketRecord,
    Trace,
    flow_key,
    flow_record_lines,
    flows_from_packets,
    parse_flow_record_lines,
    parse_flow_records,
    parse_pcap,
    read_packets,
    time_split,
    write_flow_records,
)


@pytest.mark.parametrize("name", sorted(FIXTURES))
@pytest.mark.parametrize("fmt", ["pcap", "pcapng"])
def test_flow_totals_match_packet_oracle(tmp_path, name, fmt):
    packets = FIXTURES[name]
    path = tmp_path / f"{name}.{fmt}"
    write_capture(path, packets, fmt)
    trace = parse_pcap(path, name)
    oracle = oracle_totals(packets)
    assert len(trace.flows) == len(oracle)
    flows = {f.key: f for f in trace.flows}
    for (proto, ends), o in oracle.items():
        (other,) = [e for e in ends if e != o["init"]] or [o["init"]]
        f = flows[flow_key(proto, o["init"], other)]
        assert (f.bytes_up, f.bytes_down) == (o["up"], o["down"])
        assert (f.packet_count_up, f.packet_count_down) == (o["pu"], o["pd"])
        assert f.first_ts == round(o["first"] * 1e6)
    assert sum(f.bytes_up + f.bytes_down for f in trace.flows) == sum(
        p.payload for p in packets if p.proto in ("tcp", "udp")
    )


def test_three_packet_tcp_flow(tmp_path):
    path = tmp_path / "t.pcap"
    write_capture(path, FIXTURES["single_tcp"])
    trace = parse_pcap(path, "t", label="site")
    (f,) = trace.flows
    assert f.key == "tcp:192.0.2.10:50000-203.0.113.5:443"
    assert (f.bytes_up, f.bytes_down, f.packet_count_up, f.packet_count_down) == (150, 400, 2, 1)
    assert f.first_ts == 1_000_000 and f.last_ts == 1_000_200
    assert trace.label == "site" and trace.collected_at == 1


def test_interleaved_flows_are_separated_and_ordered(tmp_path):
    path = tmp_path / "t.pcap"
    write_capture(path, FIXTURES["two_interleaved"])
    trace = parse_pcap(path, "t")
    assert [(f.bytes_up, f.bytes_down) for f in trace.flows] == [(15, 30), (20, 40)]
    assert [f.first_ts for f in trace.flows] == sorted(f.first_ts for f in trace.flows)


def test_first_packet_defines_up_direction(tmp_path):
    path = tmp_path / "t.pcap"
    write_capture(path, FIXTURES["server_first_and_ties"])
    flows = {f.key: f for f in parse_pcap(path, "t").flows}
    assert flows["tcp:203.0.113.5:443-192.0.2.10:50020"].bytes_up == 11
    assert flows["tcp:203.0.113.5:443-192.0.2.10:50020"].bytes_down == 33
    # 192.0.2.10 sorts before 203.0.113.5, so the client wins the tie
    tied = flows["tcp:192.0.2.10:50021-203.0.113.5:443"]
    assert (tied.bytes_up, tied.bytes_down) == (22 + 44, 66 + 55)


def test_non_tcp_udp_packets_are_counted_as_dropped(tmp_path):
    path = tmp_path / "t.pcap"
    write_capture(path, FIXTURES["mixed_protocols"])
    stats = IngestStats()
    trace = parse_pcap(path, "t", stats=stats)
    assert stats.packets_total == 9 and stats.packets_dropped == 2
    assert stats.flows == 2 and stats.traces == 1
    assert len(trace.flows) == 2


def test_ipv6_keys_are_bracketed(tmp_path):
    path = tmp_path / "t.pcap"
    write_capture(path, FIXTURES["ipv6_and_v4"])
    keys = [f.key for f in parse_pcap(path, "t").flows]
    assert "tcp:[2001:db8::10]:40000-[2001:db8::443]:443" in keys
    assert "udp:192.0.2.10:40001-203.0.113.5:443" in keys


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_packet_shuffle_leaves_flows_identical(tmp_path, name):
    packets = FIXTURES[name]
    write_capture(tmp_path / "a.pcap", packets)
    reference = parse_pcap(tmp_path / "a.pcap", "x")
    rnd = random.Random(1234)
    for k in range(5):
        shuffled = packets[:]
        rnd.shuffle(shuffled)
        write_capture(tmp_path / f"s{k}.pcap", shuffled)
        got = parse_pcap(tmp_path / f"s{k}.pcap", "x")
        assert got == reference
        assert [f.last_ts for f in got.flows] == [f.last_ts for f in reference.flows]


_addr = st.sampled_from(["10.0.0.1", "10.0.0.2", "10.0.0.3"])
_pkt = st.builds(
    PacketRecord,
    timestamp=st.integers(0, 50),
    src_addr=_addr,
    src_port=st.integers(1, 3),
    dst_addr=_addr,
    dst_port=st.integers(1, 3),
    protocol=st.sampled_from(["tcp", "udp"]),
    payload_bytes=st.integers(0, 2000),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(_pkt, min_size=1, max_size=40), st.randoms())
def test_flow_aggregation_is_order_free_and_conserving(packets, rnd):
    flows = flows_from_packets(packets)
    shuffled = packets[:]
    rnd.shuffle(shuffled)
    assert flows_from_packets(shuffled) == flows
    assert sum(f.bytes_up + f.bytes_down for f in flows) == sum(p.payload_bytes for p in packets)
    assert sum(f.packet_count_up + f.packet_count_down for f in flows) == len(packets)
    assert [f.sort_key for f in flows] == sorted(f.sort_key for f in flows)
    assert len({f.key for f in flows}) == len(flows)


def test_empty_capture_raises(tmp_path):
    path = tmp_path / "empty.pcap"
    write_capture(path, [])
    with pytest.raises(EmptyTrace):
        parse_pcap(path, "e")
    only_icmp = tmp_path / "icmp.pcap"
    write_capture(only_icmp, [Pkt(1.0, "10.0.0.1", 0, "10.0.0.2", 0, "icmp", 8)])
    with pytest.raises(EmptyTrace):
        parse_pcap(only_icmp, "e")


def test_unreadable_capture_raises(tmp_path):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"this is not a capture file at all")
    with pytest.raises(UnreadableCapture):
        read_packets(bad)
    with pytest.raises(UnreadableCapture):
        read_packets(tmp_path / "missing.pcap")


def test_raw_ip_link_type(tmp_path):
    path = tmp_path / "raw.pcap"
    ip = dpkt.ip.IP(src=bytes([10, 0, 0, 1]), dst=bytes([10, 0, 0, 2]), p=dpkt.ip.IP_PROTO_UDP,
                    data=dpkt.udp.UDP(sport=1, dport=2, data=b"x" * 13, ulen=21))
    ip.len = 20 + 21
    with open(path, "wb") as fh:
        w = dpkt.pcap.Writer(fh, linktype=dpkt.pcap.DLT_RAW)
        w.writepkt(bytes(ip), ts=3.0)
    (f,) = parse_pcap(path, "r").flows
    assert f.bytes_up == 13 and f.key == "udp:10.0.0.1:1-10.0.0.2:2"


# ---------------------------------------------------------------- FlowRecord format


def _record(**over):
    rec = {
        "trace_id": "t1", "label": "a", "collected_at": 100, "first_ts": 5,
        "bytes_up": 10, "bytes_down": 20, "pkts_up": 1, "pkts_down": 1, "key": "tcp:a:1-b:2",
    }
    rec.update(over)
    return json.dumps(rec)


def test_flow_record_round_trip(tmp_path):
    traces = [
        Trace("t1", (Flow("tcp:a:1-b:2", 9, 1, 2, 1, 1), Flow("udp:a:3-b:4", 4, 0, 7, 0, 2)), "x", 10),
        Trace("t2", (Flow("tcp:c:1-d:2", 1, 5, 0, 1, 0),), None, 20),
    ]
    write_flow_records(traces, tmp_path / "r.jsonl")
    assert parse_flow_records(tmp_path / "r.jsonl") == traces
    # stored sorted by (first_ts, key)
    assert traces[0].flows[0].first_ts == 4


def test_flow_record_keeps_trace_order_and_groups():
    lines = [_record(trace_id="z", key="k1"), _record(trace_id="a", key="k1"), _record(trace_id="z", key="k2", first_ts=1)]
    traces = parse_flow_record_lines(lines)
    assert [t.trace_id for t in traces] == ["z", "a"]
    assert [f.key for f in traces[0].flows] == ["k2", "k1"]


@pytest.mark.parametrize(
    "line",
    [
        "{not json",
        "[1, 2]",
        _record(bytes_up=-1),
        _record(bytes_up=1.5),
        _record(pkts_up=True),
        _record(pkts_up=0, pkts_down=0),
        _record(trace_id=""),
        _record(extra=1),
        json.dumps({"trace_id": "t"}),
    ],
)
def test_malformed_record_reports_line_number(line):
    with pytest.raises(MalformedRecord) as info:
        parse_flow_record_lines([_record(key="ok"), "", line])
    assert info.value.line_number == 3


def test_duplicate_flow_and_inconsistent_trace():
    with pytest.raises(DuplicateFlow):
        parse_flow_record_lines([_record(), _record()])
    with pytest.raises(MalformedRecord):
        parse_flow_record_lines([_record(), _record(key="other", label="b")])


def test_writing_trace_without_timestamp_fails():
    with pytest.raises(MissingTimestamp):
        list(flow_record_lines([Trace("t", (Flow("k", 0, 1, 1, 1, 1),), "a", None)]))


def test_time_split_is_strict_and_order_preserving():
    traces = [Trace(f"t{i}", (Flow("k", 0, 1, 1, 1, 1),), "a", ts) for i, ts in enumerate([5, 10, 3, 11, 10])]
    train, test = time_split(traces, 10)
    assert [t.trace_id for t in train] == ["t0", "t2"]
    assert [t.trace_id for t in test] == ["t1", "t3", "t4"]
    with pytest.raises(MissingTimestamp):
        time_split(traces + [Trace("n", (Flow("k", 0, 1, 1, 1, 1),))], 10)
