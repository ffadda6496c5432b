"""Shared test utilities: hand-built capture files and a finite-difference checker."""
from __future__ import annotations

import math
import socket
from dataclasses import dataclass

import dpkt
import numpy as np


@dataclass(frozen=True)
class Pkt:
    ts: float  # seconds
    src: str
    sport: int
    dst: str
    dport: int
    proto: str  # "tcp", "udp", "icmp", "arp"
    payload: int = 0


def _ip_bytes(addr: str) -> tuple[int, bytes]:
    if ":" in addr:
        return socket.AF_INET6, socket.inet_pton(socket.AF_INET6, addr)
    return socket.AF_INET, socket.inet_pton(socket.AF_INET, addr)


def frame(p: Pkt) -> bytes:
    if p.proto == "arp":
        return bytes(dpkt.ethernet.Ethernet(type=dpkt.ethernet.ETH_TYPE_ARP, data=dpkt.arp.ARP()))
    if p.proto == "tcp":
        seg = dpkt.tcp.TCP(sport=p.sport, dport=p.dport, flags=dpkt.tcp.TH_ACK, data=b"\xab" * p.payload)
        num = dpkt.ip.IP_PROTO_TCP
    elif p.proto == "udp":
        seg = dpkt.udp.UDP(sport=p.sport, dport=p.dport, data=b"\xcd" * p.payload)
        seg.ulen = 8 + p.payload
        num = dpkt.ip.IP_PROTO_UDP
    elif p.proto == "icmp":
        seg = dpkt.icmp.ICMP(type=8, data=dpkt.icmp.ICMP.Echo(data=b"\x00" * p.payload))
        num = dpkt.ip.IP_PROTO_ICMP
    else:
        raise ValueError(p.proto)
    fam, src = _ip_bytes(p.src)
    _, dst = _ip_bytes(p.dst)
    if fam == socket.AF_INET6:
        ip = dpkt.ip6.IP6(src=src, dst=dst, nxt=num, hlim=64, data=seg)
        ip.plen = len(bytes(seg))
        etype = dpkt.ethernet.ETH_TYPE_IP6
    else:
        ip = dpkt.ip.IP(src=src, dst=dst, p=num, ttl=64, data=seg)
        ip.len = 20 + len(bytes(seg))
        etype = dpkt.ethernet.ETH_TYPE_IP
    raw = bytes(dpkt.ethernet.Ethernet(type=etype, data=ip))
    # pad short frames like a NIC would; the payload length must ignore this
    return raw + b"\x00" * max(0, 60 - len(raw))


def write_capture(path, packets, fmt: str = "pcap") -> None:
    with open(path, "wb") as fh:
        writer = dpkt.pcapng.Writer(fh) if fmt == "pcapng" else dpkt.pcap.Writer(fh)
        for p in packets:
            writer.writepkt(frame(p), ts=p.ts)


def oracle_totals(packets) -> dict:
    """Per-flow (initiator-first) byte and packet totals by direct accumulation."""
    ordered = sorted(
        (p for p in packets if p.proto in ("tcp", "udp")),
        key=lambda p: (round(p.ts * 1e6), p.src, p.sport, p.dst, p.dport, p.proto, p.payload),
    )
    flows = {}
    for p in ordered:
        ident = (p.proto, frozenset([(p.src, p.sport), (p.dst, p.dport)]))
        if ident not in flows:
            flows[ident] = {"init": (p.src, p.sport), "up": 0, "down": 0, "pu": 0, "pd": 0, "first": p.ts}
        f = flows[ident]
        if (p.src, p.sport) == f["init"]:
            f["up"] += p.payload
            f["pu"] += 1
        else:
            f["down"] += p.payload
            f["pd"] += 1
    return flows


C, S = "192.0.2.10", "203.0.113.5"
C6, S6 = "2001:db8::10", "2001:db8::443"

# (name, packets) hand-built fixtures used across ingest tests
FIXTURES = {
    "single_tcp": [
        Pkt(1.000000, C, 50000, S, 443, "tcp", 100),
        Pkt(1.000100, C, 50000, S, 443, "tcp", 50),
        Pkt(1.000200, S, 443, C, 50000, "tcp", 400),
    ],
    "two_interleaved": [
        Pkt(1.0, C, 50000, S, 443, "tcp", 10),
        Pkt(2.0, C, 50001, S, 443, "tcp", 20),
        Pkt(2.5, S, 443, C, 50000, "tcp", 30),
        Pkt(3.0, S, 443, C, 50001, "tcp", 40),
        Pkt(3.5, C, 50000, S, 443, "tcp", 5),
    ],
    "mixed_protocols": [
        Pkt(0.5, C, 0, S, 0, "icmp", 32),
        Pkt(1.0, C, 53000, "198.51.100.53", 53, "udp", 40),
        Pkt(1.1, "198.51.100.53", 53, C, 53000, "udp", 120),
        Pkt(1.2, C, 0, S, 0, "arp", 0),
        Pkt(1.3, C, 50010, S, 443, "tcp", 0),
        Pkt(1.4, S, 443, C, 50010, "tcp", 0),
        Pkt(1.5, C, 50010, S, 443, "tcp", 517),
        Pkt(1.6, S, 443, C, 50010, "tcp", 1448),
        Pkt(1.7, S, 443, C, 50010, "tcp", 1448),
    ],
    "ipv6_and_v4": [
        Pkt(10.0, C6, 40000, S6, 443, "tcp", 300),
        Pkt(10.1, S6, 443, C6, 40000, "tcp", 9000),
        Pkt(10.2, C, 40001, S, 443, "udp", 1200),
        Pkt(10.3, S, 443, C, 40001, "udp", 1250),
        Pkt(10.4, C6, 40000, S6, 443, "tcp", 77),
    ],
    "server_first_and_ties": [
        # the server speaks first on one flow, so it becomes "up" there
        Pkt(4.9, S, 443, C, 50020, "tcp", 11),
        Pkt(5.0, C, 50020, S, 443, "tcp", 33),
        # equal timestamps on a fresh flow: field order breaks the tie
        Pkt(5.0, S, 443, C, 50021, "tcp", 66),
        Pkt(5.0, C, 50021, S, 443, "tcp", 22),
        Pkt(5.5, C, 50021, S, 443, "tcp", 44),
        Pkt(6.0, S, 443, C, 50021, "tcp", 55),
    ],
    "many_flows": [
        Pkt(20.0 + 0.01 * i, C, 51000 + i % 7, S, 443 if i % 2 else 80, "tcp" if i % 3 else "udp", (37 * i) % 1500)
        for i in range(60)
    ],
}


def gradcheck(fn, inputs, h: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-5, seed: int = 0, detail=False):
    """Compare reverse-mode gradients of ``sum(fn(*inputs) * R)`` with central differences.

    Returns the largest relative error among entries exceeding ``atol`` in
    absolute error (0.0 when every entry is within the absolute floor).
    With ``detail`` the largest absolute error is returned as well.
    """
    from udfs import engine as E

    rng = np.random.default_rng(seed)
    tensors = [E.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def scalar(arrays):
        ts = [E.Tensor(a) for a in arrays]
        return float(np.sum(fn(*ts).data * proj))

    loss = E.sum_(out * E.Tensor(proj))
    E.backward(loss)
    worst = worst_abs = 0.0
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        base = [x.data.copy() for x in tensors]
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k][idx] += h
            minus[k][idx] -= h
            numeric[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        err = np.abs(analytic - numeric)
        rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
        over = err > atol
        if np.any(over):
            worst = max(worst, float(rel[over].max()))
        worst_abs = max(worst_abs, float(err.max(initial=0.0)))
    return (worst, worst_abs) if detail else worst


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (0.1 + np.abs(x))


def op_cases():
    """(name, fn, input-maker) for every differentiable engine op."""
    from udfs import engine as E

    fill_mask = np.array([[True, False, False, True], [False, True, False, False], [False, False, False, True]])

    def dropout_fixed(x):
        return E.dropout(x, 0.3, E.Rng(11), training=True)

    n = lambda *s: (lambda r: [r.standard_normal(s)])  # noqa: E731
    return [
        ("add", lambda a, b: E.add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
        ("sub", lambda a, b: E.sub(a, b), lambda r: [r.standard_normal((3, 1)), r.standard_normal((1, 4))]),
        ("mul", lambda a, b: E.mul(a, b), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
        ("mul_broadcast", lambda a, b: a * b, lambda r: [r.standard_normal((2, 3, 2)), r.standard_normal((3, 1))]),
        ("neg", lambda a: -a, n(3, 3)),
        ("scale", lambda a: E.scale(a, 2.5), n(3, 3)),
        ("relu", E.relu, lambda r: [_away_from_zero(r, (3, 4))]),
        ("exp", E.exp, n(3, 3)),
        ("log", E.log, lambda r: [r.uniform(0.5, 3.0, (3, 3))]),
        ("sqrt", E.sqrt, lambda r: [r.uniform(0.5, 3.0, (3, 3))]),
        ("masked_fill", lambda a: E.masked_fill(a, fill_mask, -7.0), n(3, 4)),
        ("dropout", dropout_fixed, n(4, 5)),
        ("matmul", E.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        ("matmul_batched", E.matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
        ("sum_all", lambda a: E.sum_(a), n(3, 3)),
        ("sum_axis", lambda a: E.sum_(a, axis=1), n(2, 3, 4)),
        ("sum_keepdims", lambda a: E.sum_(a, axis=0, keepdims=True), n(3, 4)),
        ("mean_all", lambda a: E.mean(a), n(3, 3)),
        ("mean_axes", lambda a: E.mean(a, axis=(0, 2)), n(2, 3, 4)),
        ("softmax_last", lambda a: E.softmax(a, axis=-1), n(3, 4)),
        ("softmax_first", lambda a: E.softmax(a, axis=0), n(3, 4)),
        ("logsumexp", lambda a: E.logsumexp(a, axis=-1), n(3, 4)),
        ("layer_norm", lambda a: E.layer_norm(a, axis=-1), n(3, 5)),
        ("reshape", lambda a: E.reshape(a, (2, 6)), n(3, 4)),
        ("transpose", lambda a: E.transpose(a, (2, 0, 1)), n(2, 3, 4)),
        ("concat", lambda a, b: E.concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
        ("slice_basic", lambda a: E.slice_(a, (slice(1, None), slice(None, None, 2))), n(3, 5)),
        ("slice_gather", lambda a: E.slice_(a, np.array([0, 2, 2, 1])), n(3, 4)),
        ("embedding_lookup", lambda t: E.embedding_lookup(t, np.array([[0, 3], [3, 1]])), n(4, 3)),
    ]


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def scalar_proto_loss(emb, labels, weights=None):
    """Loop oracle: prototypes by explicit averaging, loss by explicit sums."""
    classes = sorted(set(labels))
    protos = {}
    for c in classes:
        rows = [emb[i] for i in range(len(labels)) if labels[i] == c]
        protos[c] = [sum(r[k] for r in rows) / len(rows) for k in range(len(emb[0]))]
    total = 0.0
    for i, y in enumerate(labels):
        own = dist(emb[i], protos[y])
        lse = math.log(sum(math.exp(-dist(emb[i], protos[c])) for c in classes))
        w = 1.0 if weights is None else weights[y]
        total += w * (own + lse)
    return total / len(labels)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    """Record a PASS/FAIL line for the terminal summary, echo it, then assert."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
