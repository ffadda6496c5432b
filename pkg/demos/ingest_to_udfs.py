"""Write a tiny capture by hand, fold it into flows and print the UDFS rows.

Run: python3 demos/ingest_to_udfs.py
"""
import math
import tempfile
from pathlib import Path

import dpkt

from udfs.ingest import IngestStats, parse_pcap
from udfs.representation import extract_udfs

CLIENT, SERVER, DNS = "10.0.0.2", "93.184.216.34", "10.0.0.1"


def ipv4(src, dst, seg, proto):
    ip = dpkt.ip.IP(src=bytes(map(int, src.split("."))), dst=bytes(map(int, dst.split("."))), p=proto, data=seg)
    ip.len = 20 + len(bytes(seg))
    return bytes(dpkt.ethernet.Ethernet(type=dpkt.ethernet.ETH_TYPE_IP, data=ip))


def tcp(src, sport, dst, dport, n):
    return ipv4(src, dst, dpkt.tcp.TCP(sport=sport, dport=dport, flags=dpkt.tcp.TH_ACK, data=b"x" * n),
                dpkt.ip.IP_PROTO_TCP)


def udp(src, sport, dst, dport, n):
    seg = dpkt.udp.UDP(sport=sport, dport=dport, data=b"q" * n)
    seg.ulen = 8 + n
    return ipv4(src, dst, seg, dpkt.ip.IP_PROTO_UDP)


# a DNS lookup, then a page fetch over two parallel connections
packets = [
    (1.000, udp(CLIENT, 53001, DNS, 53, 33)),
    (1.004, udp(DNS, 53, CLIENT, 53001, 49)),
    (1.010, tcp(CLIENT, 40001, SERVER, 443, 517)),
    (1.030, tcp(SERVER, 443, CLIENT, 40001, 2896)),
    (1.031, tcp(CLIENT, 40002, SERVER, 443, 517)),
    (1.040, tcp(SERVER, 443, CLIENT, 40001, 1448)),
    (1.050, tcp(SERVER, 443, CLIENT, 40002, 9000)),
    (1.060, tcp(CLIENT, 40001, SERVER, 443, 64)),
]

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "visit.pcap"
    with open(path, "wb") as fh:
        writer = dpkt.pcap.Writer(fh)
        for ts, buf in packets:
            writer.writepkt(buf, ts=ts)
    stats = IngestStats()
    trace = parse_pcap(path, "visit-0001", label="example.org", stats=stats)

print(f"trace {trace.trace_id}: {len(trace.flows)} flows, {stats.packets_total} packets read")
for f in trace.flows:
    print(f"  {f.key:45s} up {f.bytes_up:6d} B  down {f.bytes_down:6d} B")

seq = extract_udfs(trace, n_max=8)
print("\nUDFS rows (ln(1 + bytes)), padded to n_max=8:")
for row, keep in zip(seq.values, seq.mask):
    print(f"  [{row[0]:7.4f}, {row[1]:7.4f}]  {'flow' if keep else 'pad'}")

# the transform is invertible, so the byte totals come straight back
assert all(round(math.expm1(v)) == f.bytes_up for v, f in zip(seq.values[:, 0], trace.flows))
