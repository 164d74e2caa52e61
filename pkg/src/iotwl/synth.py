"""Synthetic labeled traffic for desk-scale experiments.

Every session is rendered packet by packet (SYN, SYN/ACK, ACK, request and
response rounds, then FIN, RST or silence) and featurized with the real
extractor, so a corpus and the pcap fixture written from the same spec agree
exactly. All profile parameters below are invented.
"""

from __future__ import annotations

import bisect
import ipaddress
import itertools
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .capture import (
    DEFAULT_IDLE_TIMEOUT,
    Direction,
    FlowKey,
    PacketRecord,
    Session,
    TaggedPacket,
    TcpFlags,
    Termination,
    session_sort_key,
    write_pcap,
)
from .dataset import Dataset
from .errors import InvalidSpec, IoFailure
from .features import DEFAULT_SCHEMA, FeatureSchema, RankTable, extract_features, load_rank_table

PROTOCOLS = ("tls", "http", "raw")
_RTT_MEAN = 0.04
_GAP_MEAN = 0.2
_SYN = TcpFlags.SYN
_ACK = TcpFlags.ACK
_SYN_ACK = TcpFlags.SYN | TcpFlags.ACK
_PSH_ACK = TcpFlags.PSH | TcpFlags.ACK
_RST_ACK = TcpFlags.RST | TcpFlags.ACK
_FIN_ACK = TcpFlags.FIN | TcpFlags.ACK


@dataclass
class DeviceProfile:
    type_name: str
    ttl_client: dict[int, float]
    ttl_server: dict[int, float]
    bytes_ratio: tuple[float, float]  # lognormal (mu, sigma) of client/server bytes
    hostname_pool: list[tuple[str, float]]
    session_rate: tuple[float, float]  # mean inter-arrival seconds, uniform jitter
    n_devices: int = 1
    rst_probability: float = 0.0
    timeout_probability: float = 0.0
    server_bytes: tuple[float, float] = (7.0, 0.5)  # lognormal of total server payload
    rounds_mean: float = 2.0
    ttl_jitter: float = 0.0
    protocol_mix: dict[str, float] = field(default_factory=lambda: {"tls": 1.0})

    def validate(self) -> None:
        def dist_ok(d):
            return d and all(w >= 0 for w in d.values()) and sum(d.values()) > 0

        if not self.type_name:
            raise InvalidSpec("profile needs a type_name")
        for name, dist in (("ttl_client", self.ttl_client), ("ttl_server", self.ttl_server)):
            if not dist_ok(dist) or not all(0 <= int(t) <= 255 for t in dist):
                raise InvalidSpec(f"{self.type_name}: {name} must be weights over TTLs 0-255")
        if not dist_ok(self.protocol_mix) or set(self.protocol_mix) - set(PROTOCOLS):
            raise InvalidSpec(f"{self.type_name}: protocol_mix keys must be among {PROTOCOLS}")
        if self.protocol_mix.get("raw", 0) < sum(self.protocol_mix.values()) and not self.hostname_pool:
            raise InvalidSpec(f"{self.type_name}: tls/http sessions need a hostname_pool")
        if any(w < 0 for _, w in self.hostname_pool):
            raise InvalidSpec(f"{self.type_name}: negative hostname weight")
        mean, jitter = self.session_rate
        if not mean > 0 or not 0 <= jitter < mean:
            raise InvalidSpec(f"{self.type_name}: session_rate needs mean > 0 and 0 <= jitter < mean")
        for p in (self.rst_probability, self.timeout_probability, self.ttl_jitter):
            if not 0 <= p <= 1:
                raise InvalidSpec(f"{self.type_name}: probabilities must lie in [0, 1]")
        if self.rst_probability + self.timeout_probability > 1:
            raise InvalidSpec(f"{self.type_name}: rst + timeout probability exceeds 1")
        if self.n_devices < 1 or self.rounds_mean < 1 or self.bytes_ratio[1] < 0 or self.server_bytes[1] < 0:
            raise InvalidSpec(f"{self.type_name}: n_devices and rounds_mean must be >= 1, sigmas >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        d = dict(d)
        for key in ("ttl_client", "ttl_server"):
            d[key] = {int(k): float(v) for k, v in d[key].items()}
        for key in ("bytes_ratio", "session_rate", "server_bytes"):
            if key in d:
                d[key] = tuple(d[key])
        d["hostname_pool"] = [tuple(h) for h in d.get("hostname_pool", [])]
        return cls(**d)


@dataclass
class CorpusSpec:
    profiles: list[DeviceProfile]
    duration: float
    rng_seed: int = 0
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    start_epoch: int = 1_500_000_000

    def validate(self) -> None:
        if not self.profiles:
            raise InvalidSpec("corpus needs at least one profile")
        names = [p.type_name for p in self.profiles]
        if len(set(names)) != len(names):
            raise InvalidSpec("profile type names must be unique")
        if self.duration < 0 or not math.isfinite(self.duration):
            raise InvalidSpec("duration must be finite and non-negative")
        if not self.idle_timeout > 0:
            raise InvalidSpec("idle_timeout must be positive")
        for p in self.profiles:
            p.validate()

    def to_json(self) -> str:
        d = asdict(self)
        for p in d["profiles"]:
            for key in ("ttl_client", "ttl_server"):
                p[key] = {str(k): v for k, v in p[key].items()}
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        try:
            profiles = [DeviceProfile.from_dict(p) for p in d["profiles"]]
            rest = {k: v for k, v in d.items() if k != "profiles"}
            return cls(profiles, **rest)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad corpus spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: {exc}") from None


def client_ip(type_index: int, device_index: int) -> str:
    return f"192.168.{type_index + 1}.{device_index + 10}"


def server_ip(hostname: str) -> str:
    # deterministic address in 100.64.0.0/10 per hostname
    return str(ipaddress.IPv4Address(0x64400000 + 1 + zlib.crc32(hostname.encode()) % 0x3FFFFE))


def tls_client_hello(hostname: str) -> bytes:
    name = hostname.encode("ascii")
    sni = struct.pack("!HBH", len(name) + 3, 0, len(name)) + name
    ext = struct.pack("!HH", 0, len(sni)) + sni
    body = b"\x03\x03" + bytes(32) + b"\x00" + b"\x00\x02\x13\x01" + b"\x01\x00"
    body += struct.pack("!H", len(ext)) + ext
    hs = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + struct.pack("!H", len(hs)) + hs


def http_request(hostname: str) -> bytes:
    return f"GET /api/v1/status HTTP/1.1\r\nHost: {hostname}\r\nUser-Agent: iot-agent\r\n\r\n".encode("ascii")


def _as_time(usec: int) -> float:
    # same arithmetic as the pcap reader so timestamps survive a round trip bit-exactly
    sec, frac = divmod(usec, 1_000_000)
    return sec + frac / 1e6


class _Categorical:
    def __init__(self, dist: dict):
        self.keys = list(dist)
        self.cum = list(itertools.accumulate(float(dist[k]) for k in self.keys))

    def draw(self, rng: np.random.Generator):
        return self.keys[min(bisect.bisect_right(self.cum, rng.random() * self.cum[-1]), len(self.keys) - 1)]


def _split(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


class _DeviceSim:
    def __init__(self, spec: CorpusSpec, profile: DeviceProfile, type_index: int, device_index: int):
        self.spec = spec
        self.p = profile
        self.ip = client_ip(type_index, device_index)
        self.rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, type_index, device_index]))
        self.next_port = 49152 + (device_index * 1009 + type_index * 211) % 16384
        self.abandoned: list[tuple[int, str, str, float]] = []  # port, host, protocol, last usec
        self.protocols = _Categorical(profile.protocol_mix)
        self.hosts = _Categorical(dict(profile.hostname_pool)) if profile.hostname_pool else None
        self.ttl_a = _Categorical(profile.ttl_client)
        self.ttl_b = _Categorical(profile.ttl_server)

    def _port(self) -> int:
        port = self.next_port
        self.next_port = 49152 + (self.next_port - 49152 + 1) % 16384
        return port

    def sessions(self) -> list[Session]:
        p, rng = self.p, self.rng
        mean, jitter = p.session_rate
        start_us = self.spec.start_epoch * 1_000_000
        end = self.spec.duration
        t = float(rng.uniform(0, mean))
        out = []
        while t < end:
            out.append(self._session(start_us + round(t * 1_000_000)))
            t += mean + float(rng.uniform(-jitter, jitter))
        return out

    def _session(self, t0: int) -> Session:
        p, rng = self.p, self.rng
        idle_us = self.spec.idle_timeout * 1_000_000
        reuse = next((a for a in self.abandoned if t0 - a[3] > idle_us + 1_000_000), None)
        if reuse is not None:
            self.abandoned.remove(reuse)
            port, host, proto = reuse[0], reuse[1], reuse[2]
        else:
            port = self._port()
            proto = self.protocols.draw(rng)
            host = self.hosts.draw(rng) if self.hosts else ""
        s_ip = server_ip(host or f"{p.type_name}.raw")
        s_port = {"tls": 443, "http": 80, "raw": 8883}[proto]

        ttl_a = int(self.ttl_a.draw(rng))
        ttl_b = int(self.ttl_b.draw(rng))
        rounds = 1 + int(rng.poisson(p.rounds_mean - 1))
        b_total = max(rounds, round(float(rng.lognormal(*p.server_bytes))))
        ratio = float(rng.lognormal(*p.bytes_ratio))
        first = {"tls": lambda: tls_client_hello(host), "http": lambda: http_request(host), "raw": lambda: b""}[proto]()
        a_total = max(len(first), round(ratio * b_total), rounds)
        a_sizes = _split(a_total - len(first), rounds)
        a_sizes[0] += len(first)
        b_sizes = _split(b_total, rounds)
        roll = float(rng.uniform())
        ending = "rst" if roll < p.rst_probability else "timeout" if roll < p.rst_probability + p.timeout_probability else "fin"

        def jit(ttl):
            if p.ttl_jitter and rng.random() < p.ttl_jitter:
                return min(255, max(0, ttl + (1 if rng.random() < 0.5 else -1)))
            return ttl

        key = FlowKey(self.ip, port, s_ip, s_port)
        now = t0
        pkts = []

        def emit(direction, flags, payload=b""):
            nonlocal now
            if pkts:
                now += max(1, round(float(rng.exponential(_RTT_MEAN)) * 1_000_000))
            if direction is Direction.A:
                rec = PacketRecord(_as_time(now), self.ip, s_ip, port, s_port, jit(ttl_a), flags, payload)
            else:
                rec = PacketRecord(_as_time(now), s_ip, self.ip, s_port, port, jit(ttl_b), flags, payload)
            pkts.append(TaggedPacket(rec, direction))

        A, B = Direction.A, Direction.B
        emit(A, _SYN)
        emit(B, _SYN_ACK)
        emit(A, _ACK)
        for i in range(rounds):
            payload = first + bytes(a_sizes[0] - len(first)) if i == 0 else bytes(a_sizes[i])
            if payload:
                emit(A, _PSH_ACK, payload)
            emit(B, _PSH_ACK, bytes(b_sizes[i]))
            now += round(float(rng.exponential(_GAP_MEAN)) * 1_000_000)
        if ending == "rst":
            emit(B, _RST_ACK)
            term = Termination.RST
        elif ending == "fin":
            emit(A, _FIN_ACK)
            term = Termination.FIN
        else:
            self.abandoned.append((port, host, proto, now))
            term = Termination.TIMEOUT
        return Session(key, tuple(pkts), term, label=p.type_name)


def generate_sessions(spec: CorpusSpec) -> list[Session]:
    """All synthetic sessions of ``spec``, labeled and sorted like reconstructed output.

    Abandoned sessions report TIMEOUT here; a reader may see TRUNCATED when
    the capture ends less than ``idle_timeout`` after them.
    """
    spec.validate()
    sessions = []
    for ti, profile in enumerate(spec.profiles):
        for di in range(profile.n_devices):
            sessions.extend(_DeviceSim(spec, profile, ti, di).sessions())
    sessions.sort(key=session_sort_key)
    return sessions


def generate_corpus(
    spec: CorpusSpec,
    ranks: RankTable | None = None,
    schema: FeatureSchema = DEFAULT_SCHEMA,
) -> Dataset:
    ranks = ranks if ranks is not None else load_rank_table()
    vectors = [extract_features(s, ranks, schema) for s in generate_sessions(spec)]
    return Dataset.from_vectors(vectors, schema)


def generate_pcap_fixture(spec: CorpusSpec, path) -> list[Session]:
    """Write every packet of ``spec`` to a classic pcap in time order; return the sessions."""
    sessions = generate_sessions(spec)
    packets = [tp.packet for s in sessions for tp in s.packets]
    packets.sort(key=lambda pkt: pkt.timestamp)
    try:
        write_pcap(path, packets)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return sessions


def label_map(spec: CorpusSpec) -> dict[str, str]:
    """Client IP to type name for every simulated device."""
    return {
        client_ip(ti, di): p.type_name
        for ti, p in enumerate(spec.profiles)
        for di in range(p.n_devices)
    }


def _pool(prefix: str, names: list[str], weights: list[float] | None = None) -> list[tuple[str, float]]:
    weights = weights or [1.0] * len(names)
    return [(f"{n}.{prefix}", w) for n, w in zip(names, weights)]


def default_profiles() -> list[DeviceProfile]:
    """Nine device types laid out on a 3x3 grid of behaviour classes.

    Type (a, b) gets server TTL family ``a``, cloud tier ``b``, client OS
    class ``(a + b) % 3`` (initial TTL and bytes ratio) and server-volume
    class ``(a + 2b) % 3``. Any two types then share exactly one class, so
    every type needs two groups of features to be recognised and an unseen
    type resembles all others equally.
    """
    ttl = [{49: 0.4, 50: 0.4, 51: 0.2}, {114: 0.3, 115: 0.4, 116: 0.3}, {240: 0.3, 241: 0.4, 242: 0.3}]
    cloud = [
        _pool("appliance-hub.com", ["api", "fw"]),
        _pool("nestlike.com", ["frontdoor", "transport"]),
        _pool("home-sensors.net", ["events", "signal"]),
    ]
    cloud = [c + [("connectivity.search-giant.com", 0.22)] for c in cloud]  # shared by every type
    client_ttl = [{64: 1.0}, {128: 1.0}, {255: 1.0}]
    ratio = [(math.log(0.15), 0.12), (math.log(1.0), 0.12), (math.log(6.5), 0.12)]
    server_bytes = [(6.0, 0.12), (7.2, 0.12), (8.4, 0.12)]
    # (name, seconds between sessions per device, devices); volumes are deliberately unequal
    roster = [
        ("socket", 3.0, 4), ("TV", 4.0, 2), ("baby_monitor", 3.4, 1),
        ("watch", 12.8, 4), ("smoke_detector", 3.1, 1), ("motion_sensor", 6.6, 2),
        ("security_camera", 4.5, 3), ("refrigerator", 12.0, 1), ("thermostat", 3.5, 1),
    ]
    out = []
    for i, (name, gap, n_dev) in enumerate(roster):
        a, b = divmod(i, 3)
        out.append(DeviceProfile(
            name, client_ttl[(a + b) % 3], ttl[a], ratio[(a + b) % 3], cloud[b], (gap, gap * 0.7),
            n_devices=n_dev, rst_probability=0.03, timeout_probability=0.01,
            server_bytes=server_bytes[(a + 2 * b) % 3], rounds_mean=3.0, ttl_jitter=0.02,
            protocol_mix={"tls": 0.8, "http": 0.2},
        ))
    return out


def default_spec(rng_seed: int = 0, duration: float = 21_600.0) -> CorpusSpec:
    return CorpusSpec(default_profiles(), duration, rng_seed)


def disjoint_profiles() -> list[DeviceProfile]:
    """Three types with pairwise disjoint client and server TTL supports.

    The third type sits between the other two on server TTL and above both on
    client TTL, so a model trained without it sees conflicting evidence.
    """
    return [
        DeviceProfile("alpha", {64: 1.0}, {40: 0.5, 41: 0.5}, (math.log(1.0), 0.1),
                      [("alpha.example.com", 1.0)], (10.0, 5.0), server_bytes=(6.0, 0.1)),
        DeviceProfile("beta", {128: 1.0}, {100: 0.5, 101: 0.5}, (math.log(1.0), 0.1),
                      [("beta.example.com", 1.0)], (10.0, 5.0), server_bytes=(6.0, 0.1)),
        DeviceProfile("gamma", {255: 1.0}, {60: 0.5, 61: 0.5}, (math.log(1.0), 0.1),
                      [("gamma.example.com", 1.0)], (10.0, 5.0), server_bytes=(6.0, 0.1)),
    ]


def disjoint_spec(rng_seed: int = 0, duration: float = 20_000.0) -> CorpusSpec:
    return CorpusSpec(disjoint_profiles(), duration, rng_seed)
