"""Classic pcap reading/writing and TCP session reconstruction.

A session is the set of TCP packets sharing a 4-tuple, opened by a client
SYN and closed by the first FIN or RST (that packet is the last one kept),
or by ``idle_timeout`` seconds of silence.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import struct
import warnings
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MalformedFile, TruncatedPacket

logger = logging.getLogger(__name__)

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100
IPPROTO_TCP = 6
DEFAULT_IDLE_TIMEOUT = 300.0


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


class Direction(enum.Enum):
    A = "A"  # client -> server
    B = "B"  # server -> client


class Termination(enum.Enum):
    FIN = "FIN"
    RST = "RST"
    TIMEOUT = "TIMEOUT"
    TRUNCATED = "TRUNCATED"


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    ttl: int
    tcp_flags: TcpFlags
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)


@dataclass(frozen=True, slots=True)
class FlowKey:
    client_ip: str
    client_port: int
    server_ip: str
    server_port: int


@dataclass(frozen=True, slots=True)
class TaggedPacket:
    packet: PacketRecord
    direction: Direction


@dataclass(frozen=True)
class Session:
    key: FlowKey
    packets: tuple[TaggedPacket, ...]
    termination: Termination
    label: str | None = None

    @property
    def start_time(self) -> float:
        return self.packets[0].packet.timestamp

    @property
    def end_time(self) -> float:
        return self.packets[-1].packet.timestamp


@dataclass
class CaptureStats:
    """Counters filled in while reading and reconstructing one capture."""

    total: int = 0
    accepted: int = 0
    skipped: int = 0
    truncated: int = 0
    dropped: int = 0
    sessions: int = 0
    skipped_reasons: dict[str, int] = field(default_factory=dict)

    def skip(self, reason: str) -> None:
        self.skipped += 1
        self.skipped_reasons[reason] = self.skipped_reasons.get(reason, 0) + 1


def _ip(raw: bytes) -> str:
    return str(ipaddress.IPv4Address(raw))


def _decode_frame(frame: bytes, ts: float) -> PacketRecord | str:
    """Decode one Ethernet frame; return a skip reason string on failure."""
    if len(frame) < 14:
        return "truncated"
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    offset = 14
    while ethertype == ETHERTYPE_VLAN:
        if len(frame) < offset + 4:
            return "truncated"
        ethertype = struct.unpack_from("!H", frame, offset + 2)[0]
        offset += 4
    if ethertype != ETHERTYPE_IPV4:
        return "non_ipv4"
    if len(frame) < offset + 20:
        return "truncated"
    ver_ihl = frame[offset]
    if ver_ihl >> 4 != 4:
        return "non_ipv4"
    ihl = (ver_ihl & 0x0F) * 4
    total_len = struct.unpack_from("!H", frame, offset + 2)[0]
    ttl = frame[offset + 8]
    proto = frame[offset + 9]
    if proto != IPPROTO_TCP:
        return "non_tcp"
    frag = struct.unpack_from("!H", frame, offset + 6)[0]
    if frag & 0x1FFF or frag & 0x2000:
        return "fragment"
    if ihl < 20 or total_len < ihl + 20:
        return "malformed_ip"
    # total_len bounds the datagram; anything beyond is Ethernet padding
    if len(frame) < offset + total_len:
        return "truncated"
    src = _ip(frame[offset + 12:offset + 16])
    dst = _ip(frame[offset + 16:offset + 20])
    tcp = offset + ihl
    sport, dport = struct.unpack_from("!HH", frame, tcp)
    data_off = (frame[tcp + 12] >> 4) * 4
    flags = frame[tcp + 13] & 0x3F
    if data_off < 20 or ihl + data_off > total_len:
        return "malformed_tcp"
    payload = bytes(frame[tcp + data_off:offset + total_len])
    return PacketRecord(ts, src, dst, sport, dport, ttl, TcpFlags(flags), payload)


class CaptureReader:
    """Iterate the TCP/IPv4 packets of a classic pcap file.

    Non-TCP and non-IPv4 frames are skipped; records that end early are
    counted as truncated. Both byte orders and the nanosecond variant of the
    magic number are accepted.
    """

    def __init__(self, path, allow_ips: Iterable[str] | None = None):
        self.path = Path(path)
        self.allow_ips = frozenset(allow_ips) if allow_ips is not None else None
        self.stats = CaptureStats()

    def __iter__(self) -> Iterator[PacketRecord]:
        with open(self.path, "rb") as fp:
            header = fp.read(24)
            if len(header) < 24:
                raise MalformedFile(f"{self.path}: truncated pcap global header")
            magic_le = struct.unpack("<I", header[:4])[0]
            if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
                endian = "<"
            else:
                magic_be = struct.unpack(">I", header[:4])[0]
                if magic_be not in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
                    raise MalformedFile(f"{self.path}: bad pcap magic 0x{magic_le:08x}")
                endian = ">"
            magic = struct.unpack(endian + "I", header[:4])[0]
            divisor = 1e9 if magic == PCAP_MAGIC_NS else 1e6
            linktype = struct.unpack(endian + "I", header[20:24])[0] & 0x0FFFFFFF
            if linktype != LINKTYPE_ETHERNET:
                raise MalformedFile(f"{self.path}: unsupported link type {linktype}")
            rec_fmt = endian + "IIII"
            while True:
                rec = fp.read(16)
                if not rec:
                    return
                if len(rec) < 16:
                    self.stats.total += 1
                    self._truncated("record header")
                    return
                ts_sec, ts_frac, incl_len, _orig_len = struct.unpack(rec_fmt, rec)
                frame = fp.read(incl_len)
                self.stats.total += 1
                if len(frame) < incl_len:
                    self._truncated("record body")
                    return
                ts = ts_sec + ts_frac / divisor
                decoded = _decode_frame(frame, ts)
                if isinstance(decoded, str):
                    if decoded == "truncated":
                        self._truncated("frame")
                    else:
                        self.stats.skip(decoded)
                    continue
                if self.allow_ips is not None and not (
                    decoded.src_ip in self.allow_ips or decoded.dst_ip in self.allow_ips
                ):
                    self.stats.skip("filtered")
                    continue
                yield decoded

    def _truncated(self, what: str) -> None:
        self.stats.truncated += 1
        self.stats.skip("truncated")
        warnings.warn(f"{self.path}: truncated {what} skipped", TruncatedPacket, stacklevel=3)


def parse_capture(path, allow_ips: Iterable[str] | None = None) -> CaptureReader:
    """Open ``path`` for iteration; counters live on the returned reader's ``stats``."""
    return CaptureReader(path, allow_ips)


def _encode_frame(pkt: PacketRecord, ip_id: int) -> bytes:
    tcp = struct.pack(
        "!HHIIBBHHH",
        pkt.src_port, pkt.dst_port, 0, 0, 5 << 4, int(pkt.tcp_flags), 65535, 0, 0,
    )
    total_len = 20 + len(tcp) + len(pkt.payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s",
        0x45, 0, total_len, ip_id & 0xFFFF, 0x4000, pkt.ttl, IPPROTO_TCP, 0,
        ipaddress.IPv4Address(pkt.src_ip).packed,
        ipaddress.IPv4Address(pkt.dst_ip).packed,
    )
    checksum = _ip_checksum(ip)
    ip = ip[:10] + struct.pack("!H", checksum) + ip[12:]
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip + tcp + pkt.payload


def _ip_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def write_pcap(path, packets: Iterable[PacketRecord]) -> int:
    """Write packets as a little-endian microsecond pcap; return the count.

    Timestamps are rounded to the nearest microsecond.
    """
    n = 0
    with open(path, "wb") as fp:
        fp.write(struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for pkt in packets:
            usec_total = round(pkt.timestamp * 1_000_000)
            sec, usec = divmod(usec_total, 1_000_000)
            frame = _encode_frame(pkt, n)
            fp.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            fp.write(frame)
            n += 1
    return n


@dataclass
class _OpenSession:
    key: FlowKey
    packets: list[TaggedPacket]
    last_seen: float


def _endpoint_pair(pkt: PacketRecord) -> tuple:
    a = (pkt.src_ip, pkt.src_port)
    b = (pkt.dst_ip, pkt.dst_port)
    return (a, b) if a <= b else (b, a)


class SessionReconstructor:
    """Stateful fold from an ordered packet stream to TCP sessions."""

    def __init__(self, idle_timeout: float = DEFAULT_IDLE_TIMEOUT, stats: CaptureStats | None = None):
        if not idle_timeout > 0:
            raise ValueError("idle_timeout must be positive")
        self.idle_timeout = idle_timeout
        self.stats = stats if stats is not None else CaptureStats()
        self._open: dict[tuple, _OpenSession] = {}
        self._done: list[Session] = []
        self._last_ts: float | None = None

    def feed(self, pkt: PacketRecord) -> None:
        self._last_ts = pkt.timestamp if self._last_ts is None else max(self._last_ts, pkt.timestamp)
        pair = _endpoint_pair(pkt)
        sess = self._open.get(pair)
        if sess is not None and pkt.timestamp - sess.last_seen > self.idle_timeout:
            self._close(pair, Termination.TIMEOUT)
            sess = None
        if sess is None:
            if not (pkt.tcp_flags & TcpFlags.SYN) or pkt.tcp_flags & TcpFlags.ACK:
                self.stats.dropped += 1
                return
            key = FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port)
            sess = _OpenSession(key, [], pkt.timestamp)
            self._open[pair] = sess
        from_client = (pkt.src_ip, pkt.src_port) == (sess.key.client_ip, sess.key.client_port)
        sess.packets.append(TaggedPacket(pkt, Direction.A if from_client else Direction.B))
        sess.last_seen = pkt.timestamp
        self.stats.accepted += 1
        if pkt.tcp_flags & TcpFlags.RST:
            self._close(pair, Termination.RST)
        elif pkt.tcp_flags & TcpFlags.FIN:
            self._close(pair, Termination.FIN)

    def _close(self, pair: tuple, termination: Termination) -> None:
        sess = self._open.pop(pair)
        self._done.append(Session(sess.key, tuple(sess.packets), termination))

    def finish(self) -> list[Session]:
        """Close whatever is still open and return all sessions by start time."""
        for pair in list(self._open):
            idle = self._last_ts - self._open[pair].last_seen
            self._close(pair, Termination.TIMEOUT if idle > self.idle_timeout else Termination.TRUNCATED)
        self._done.sort(key=session_sort_key)
        self.stats.sessions = len(self._done)
        return self._done


def session_sort_key(session: Session) -> tuple:
    k = session.key
    return (session.start_time, ipaddress.IPv4Address(k.client_ip), k.client_port,
            ipaddress.IPv4Address(k.server_ip), k.server_port)


def reconstruct_sessions(
    packets: Iterable[PacketRecord],
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    stats: CaptureStats | None = None,
) -> list[Session]:
    # packets are stably re-ordered by timestamp; pcaps are not always monotone
    ordered = sorted(packets, key=lambda p: p.timestamp)
    rec = SessionReconstructor(idle_timeout, stats)
    for pkt in ordered:
        rec.feed(pkt)
    return rec.finish()


def read_sessions(path, idle_timeout: float = DEFAULT_IDLE_TIMEOUT, allow_ips=None) -> tuple[list[Session], CaptureStats]:
    reader = parse_capture(path, allow_ips)
    sessions = reconstruct_sessions(reader, idle_timeout, reader.stats)
    logger.info(
        "%s: %d packets, %d sessions, %d skipped, %d dropped",
        path, reader.stats.total, len(sessions), reader.stats.skipped, reader.stats.dropped,
    )
    return sessions, reader.stats
