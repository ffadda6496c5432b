"""Packet captures and flow records -> bidirectional flows -> traces.

A flow is every TCP/UDP packet sharing one 5-tuple inside a trace (no timeout
splitting). The "up" direction is the direction of the flow's temporally first
packet. Byte counts are transport payload bytes, headers excluded.
"""
from __future__ import annotations

import json
import logging
import socket
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import dpkt

from .errors import (
    DuplicateFlow,
    EmptyTrace,
    MalformedRecord,
    MissingTimestamp,
    UnreadableCapture,
)

logger = logging.getLogger(__name__)

TCP, UDP = "tcp", "udp"
_PROTO_BY_NUMBER = {dpkt.ip.IP_PROTO_TCP: TCP, dpkt.ip.IP_PROTO_UDP: UDP}

FLOW_RECORD_KEYS = (
    "trace_id",
    "label",
    "collected_at",
    "first_ts",
    "bytes_up",
    "bytes_down",
    "pkts_up",
    "pkts_down",
    "key",
)


@dataclass(frozen=True, order=True)
class PacketRecord:
    """One TCP/UDP packet; field order doubles as the total sort order."""

    timestamp: int  # microseconds since epoch
    src_addr: str
    src_port: int
    dst_addr: str
    dst_port: int
    protocol: str
    payload_bytes: int

    def __post_init__(self):
        if self.payload_bytes < 0:
            raise ValueError(f"negative payload_bytes: {self.payload_bytes}")
        if self.protocol not in (TCP, UDP):
            raise ValueError(f"unsupported protocol: {self.protocol!r}")


@dataclass(frozen=True)
class Flow:
    key: str
    first_ts: int
    bytes_up: int
    bytes_down: int
    packet_count_up: int
    packet_count_down: int
    # FlowRecord lines do not carry last_ts, so it is excluded from equality.
    last_ts: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if min(self.bytes_up, self.bytes_down, self.packet_count_up, self.packet_count_down) < 0:
            raise ValueError(f"negative counter in flow {self.key}")
        if self.packet_count_up + self.packet_count_down < 1:
            raise ValueError(f"flow {self.key} has no packets")
        if self.last_ts is not None and self.last_ts < self.first_ts:
            raise ValueError(f"flow {self.key}: last_ts < first_ts")

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.first_ts, self.key)


@dataclass(frozen=True)
class Trace:
    trace_id: str
    flows: tuple[Flow, ...]
    label: str | None = None
    collected_at: int | None = None

    def __post_init__(self):
        flows = tuple(sorted(self.flows, key=lambda f: f.sort_key))
        object.__setattr__(self, "flows", flows)

    def __len__(self) -> int:
        return len(self.flows)


@dataclass
class IngestStats:
    packets_total: int = 0
    packets_dropped: int = 0
    flows: int = 0
    traces: int = 0

    def merge(self, other: "IngestStats") -> None:
        self.packets_total += other.packets_total
        self.packets_dropped += other.packets_dropped
        self.flows += other.flows
        self.traces += other.traces

    def to_dict(self) -> dict:
        return {
            "packets_total": self.packets_total,
            "packets_dropped": self.packets_dropped,
            "flows": self.flows,
            "traces": self.traces,
        }


def format_endpoint(addr: str, port: int) -> str:
    if ":" in addr:
        addr = f"[{addr}]"
    return f"{addr}:{port}"


def flow_key(protocol: str, initiator: tuple[str, int], responder: tuple[str, int]) -> str:
    return f"{protocol}:{format_endpoint(*initiator)}-{format_endpoint(*responder)}"


def flows_from_packets(packets: Iterable[PacketRecord]) -> list[Flow]:
    """Aggregate packets into bidirectional flows, sorted by (first_ts, key).

    Packets are sorted by their full field tuple first, so the result does not
    depend on input order even when timestamps collide.
    """
    acc: dict[tuple, dict] = {}
    for pkt in sorted(packets):
        a = (pkt.src_addr, pkt.src_port)
        b = (pkt.dst_addr, pkt.dst_port)
        ident = (pkt.protocol,) + (tuple(sorted((a, b))))
        st = acc.get(ident)
        if st is None:
            st = acc[ident] = {
                "key": flow_key(pkt.protocol, a, b),
                "initiator": a,
                "first_ts": pkt.timestamp,
                "last_ts": pkt.timestamp,
                "bytes": [0, 0],
                "pkts": [0, 0],
            }
        side = 0 if a == st["initiator"] else 1
        st["bytes"][side] += pkt.payload_bytes
        st["pkts"][side] += 1
        st["last_ts"] = pkt.timestamp
    flows = [
        Flow(
            key=st["key"],
            first_ts=st["first_ts"],
            last_ts=st["last_ts"],
            bytes_up=st["bytes"][0],
            bytes_down=st["bytes"][1],
            packet_count_up=st["pkts"][0],
            packet_count_down=st["pkts"][1],
        )
        for st in acc.values()
    ]
    flows.sort(key=lambda f: f.sort_key)
    return flows


def _network_layer(datalink: int, buf: bytes):
    if datalink == dpkt.pcap.DLT_EN10MB:
        frame = dpkt.ethernet.Ethernet(buf)
        return frame.data
    if datalink == dpkt.pcap.DLT_LINUX_SLL:
        return dpkt.sll.SLL(buf).data
    if datalink in (dpkt.pcap.DLT_RAW, 101, 228, 229):
        version = buf[0] >> 4 if buf else 0
        if version == 4:
            return dpkt.ip.IP(buf)
        if version == 6:
            return dpkt.ip6.IP6(buf)
        return None
    if datalink == dpkt.pcap.DLT_NULL:
        return dpkt.loopback.Loopback(buf).data
    raise UnreadableCapture(f"unsupported link type {datalink}")


def read_packets(path: str | Path, stats: IngestStats | None = None) -> list[PacketRecord]:
    """Decode every TCP/UDP packet of a pcap/pcapng file."""
    stats = stats if stats is not None else IngestStats()
    packets: list[PacketRecord] = []
    try:
        with open(path, "rb") as fh:
            reader = dpkt.pcap.UniversalReader(fh)
            datalink = reader.datalink()
            for ts, buf in reader:
                stats.packets_total += 1
                try:
                    net = _network_layer(datalink, buf)
                except (dpkt.UnpackError, IndexError):
                    net = None
                if isinstance(net, dpkt.ip.IP):
                    src = socket.inet_ntop(socket.AF_INET, net.src)
                    dst = socket.inet_ntop(socket.AF_INET, net.dst)
                elif isinstance(net, dpkt.ip6.IP6):
                    src = socket.inet_ntop(socket.AF_INET6, net.src)
                    dst = socket.inet_ntop(socket.AF_INET6, net.dst)
                else:
                    stats.packets_dropped += 1
                    continue
                proto = _PROTO_BY_NUMBER.get(net.p)
                seg = net.data
                if proto is None or isinstance(seg, bytes):
                    stats.packets_dropped += 1
                    continue
                packets.append(
                    PacketRecord(
                        timestamp=int(round(float(ts) * 1_000_000)),
                        src_addr=src,
                        src_port=seg.sport,
                        dst_addr=dst,
                        dst_port=seg.dport,
                        protocol=proto,
                        payload_bytes=len(seg.data),
                    )
                )
    except UnreadableCapture:
        raise
    except (OSError, ValueError, dpkt.Error, EOFError) as exc:
        raise UnreadableCapture(f"{path}: {exc}") from exc
    return packets


def parse_pcap(
    path: str | Path,
    trace_id: str,
    label: str | None = None,
    stats: IngestStats | None = None,
) -> Trace:
    """Read one capture file as a single trace.

    ``collected_at`` is the whole-second timestamp of the earliest packet.
    """
    local = IngestStats()
    packets = read_packets(path, local)
    if not packets:
        raise EmptyTrace(f"{path}: no TCP/UDP packets")
    flows = flows_from_packets(packets)
    local.flows = len(flows)
    local.traces = 1
    if stats is not None:
        stats.merge(local)
    collected_at = min(p.timestamp for p in packets) // 1_000_000
    return Trace(trace_id=trace_id, flows=tuple(flows), label=label, collected_at=collected_at)


def _require_int(obj: dict, name: str, line_no: int, minimum: int | None = 0) -> int:
    value = obj[name]
    if not isinstance(value, int) or isinstance(value, bool):
        raise MalformedRecord(line_no, f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise MalformedRecord(line_no, f"{name} must be >= {minimum}, got {value}")
    return value


def parse_flow_record_lines(lines: Iterable[str]) -> list[Trace]:
    groups: "OrderedDict[str, dict]" = OrderedDict()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise MalformedRecord(line_no, "record is not an object")
        keys = set(obj)
        missing = set(FLOW_RECORD_KEYS) - keys
        extra = keys - set(FLOW_RECORD_KEYS)
        if missing:
            raise MalformedRecord(line_no, f"missing keys {sorted(missing)}")
        if extra:
            raise MalformedRecord(line_no, f"unknown keys {sorted(extra)}")
        trace_id, label, key = obj["trace_id"], obj["label"], obj["key"]
        if not isinstance(trace_id, str) or not trace_id:
            raise MalformedRecord(line_no, "trace_id must be a non-empty string")
        if label is not None and not isinstance(label, str):
            raise MalformedRecord(line_no, "label must be a string or null")
        if not isinstance(key, str) or not key:
            raise MalformedRecord(line_no, "key must be a non-empty string")
        collected_at = _require_int(obj, "collected_at", line_no, minimum=None)
        first_ts = _require_int(obj, "first_ts", line_no, minimum=None)
        counts = {k: _require_int(obj, k, line_no) for k in ("bytes_up", "bytes_down", "pkts_up", "pkts_down")}
        if counts["pkts_up"] + counts["pkts_down"] < 1:
            raise MalformedRecord(line_no, "pkts_up + pkts_down must be >= 1")

        group = groups.get(trace_id)
        if group is None:
            group = groups[trace_id] = {"label": label, "collected_at": collected_at, "flows": {}}
        elif group["label"] != label or group["collected_at"] != collected_at:
            raise MalformedRecord(line_no, f"label/collected_at disagree with earlier lines of trace {trace_id!r}")
        ident = (key, first_ts)
        if ident in group["flows"]:
            raise DuplicateFlow(f"trace {trace_id!r}: duplicate flow {key} at {first_ts} (line {line_no})")
        group["flows"][ident] = Flow(
            key=key,
            first_ts=first_ts,
            bytes_up=counts["bytes_up"],
            bytes_down=counts["bytes_down"],
            packet_count_up=counts["pkts_up"],
            packet_count_down=counts["pkts_down"],
        )
    return [
        Trace(trace_id=tid, flows=tuple(g["flows"].values()), label=g["label"], collected_at=g["collected_at"])
        for tid, g in groups.items()
    ]


def parse_flow_records(path: str | Path) -> list[Trace]:
    """Read a FlowRecord JSON-Lines file; one Trace per distinct trace_id, in first-seen order."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_flow_record_lines(fh)


def flow_record_lines(traces: Iterable[Trace]) -> Iterable[str]:
    for trace in traces:
        if trace.collected_at is None:
            raise MissingTimestamp(f"trace {trace.trace_id!r} has no collected_at")
        for flow in trace.flows:
            yield json.dumps(
                {
                    "trace_id": trace.trace_id,
                    "label": trace.label,
                    "collected_at": trace.collected_at,
                    "first_ts": flow.first_ts,
                    "bytes_up": flow.bytes_up,
                    "bytes_down": flow.bytes_down,
                    "pkts_up": flow.packet_count_up,
                    "pkts_down": flow.packet_count_down,
                    "key": flow.key,
                },
                separators=(",", ":"),
            )


def write_flow_records(traces: Iterable[Trace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in flow_record_lines(traces):
            fh.write(line + "\n")


def time_split(traces: Sequence[Trace], boundary: int) -> tuple[list[Trace], list[Trace]]:
    """Split on ``collected_at < boundary``; both halves keep input order."""
    missing = [t.trace_id for t in traces if t.collected_at is None]
    if missing:
        raise MissingTimestamp(f"traces without collected_at: {missing[:5]}")
    train = [t for t in traces if t.collected_at < boundary]
    test = [t for t in traces if t.collected_at >= boundary]
    return train, test
