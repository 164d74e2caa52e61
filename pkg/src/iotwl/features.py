"""Session-level feature extraction.

The feature catalogue is the TTL order-statistic family (over all packets
and over server-sent packets), the byte ratio, the RST count and the
popularity ranks of the dominant TLS SNI and HTTP Host names, plus a few
``ext_`` counters.

Imputation rules keep every value finite:

* ``bytes_A_B_ratio`` with no server bytes is ``A bytes + 1`` (``1.0`` when
  both directions are silent);
* every ``ttl_B_*`` value falls back to its all-packet counterpart when the
  server sent nothing.

Quartiles use linear interpolation between closest ranks and variances
divide by ``n``.
"""

from __future__ import annotations

import csv
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .capture import Direction, Session, TcpFlags
from .errors import SchemaMismatch

SNI = "SNI"
HTTP_HOST = "HTTP_HOST"
DEFAULT_RANK = 10_000_001

_TTL_STATS = ("min", "firstQ", "avg", "median", "thirdQ", "max", "var")
_TTL_B_STATS = ("min", "firstQ", "median", "thirdQ", "var")

FEATURE_NAMES = (
    *(f"ttl_{s}" for s in _TTL_STATS),
    *(f"ttl_B_{s}" for s in _TTL_B_STATS),
    "bytes_A_B_ratio",
    "reset",
    "ssl_dom_server_name_alexaRank",
    "http_dom_host_alexaRank",
    "ext_packets_A",
    "ext_packets_B",
    "ext_duration",
    "ext_payload_mean_A",
    "ext_payload_mean_B",
    "ext_ttl_B_max",
)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...] = FEATURE_NAMES
    version: int = 1

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def extensions(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n.startswith("ext_"))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "version": self.version}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(d["names"]), int(d["version"]))


DEFAULT_SCHEMA = FeatureSchema()


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    stream_id: str
    start_time: float
    label: str | None = None


@dataclass(frozen=True)
class RankTable:
    ranks: dict[str, int] = field(default_factory=dict)
    default_rank: int = DEFAULT_RANK

    def __post_init__(self):
        if self.ranks and max(self.ranks.values()) >= self.default_rank:
            raise ValueError("default_rank must exceed every stored rank")
        if any(r < 1 for r in self.ranks.values()):
            raise ValueError("ranks must be positive")


def load_rank_table(path=None, default_rank: int = DEFAULT_RANK) -> RankTable:
    """Read a ``hostname,rank`` CSV; without a path, load the bundled snapshot."""
    if path is None:
        text = resources.files("iotwl.data").joinpath("ranks.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    ranks = {}
    for row in csv.reader(text.splitlines()):
        if not row or row[0].startswith("#") or row[0] == "hostname":
            continue
        ranks[row[0].strip().lower()] = int(row[1])
    return RankTable(ranks, default_rank)


def rank_lookup(host: str | None, ranks: RankTable) -> int:
    """Exact match first, then the longest registered-domain suffix."""
    if not host:
        return ranks.default_rank
    labels = host.lower().rstrip(".").split(".")
    # stop at two labels so a bare TLD never matches
    for i in range(0, max(len(labels) - 1, 1)):
        rank = ranks.ranks.get(".".join(labels[i:]))
        if rank is not None:
            return rank
    return ranks.default_rank


def parse_sni(payload: bytes) -> str | None:
    """Return the server_name of a TLS ClientHello record, if present."""
    try:
        if len(payload) < 6 or payload[0] != 0x16 or payload[5] != 0x01:
            return None
        pos = 5 + 4 + 2 + 32  # handshake header, client_version, random
        sid_len = payload[pos]
        pos += 1 + sid_len
        (cs_len,) = struct.unpack_from("!H", payload, pos)
        pos += 2 + cs_len
        comp_len = payload[pos]
        pos += 1 + comp_len
        (ext_total,) = struct.unpack_from("!H", payload, pos)
        pos += 2
        end = min(pos + ext_total, len(payload))
        while pos + 4 <= end:
            ext_type, ext_len = struct.unpack_from("!HH", payload, pos)
            pos += 4
            if ext_type == 0:
                p = pos + 2
                while p + 3 <= pos + ext_len:
                    name_type, name_len = struct.unpack_from("!BH", payload, p)
                    p += 3
                    if name_type == 0:
                        return payload[p:p + name_len].decode("ascii").lower()
                    p += name_len
                return None
            pos += ext_len
    except (IndexError, struct.error, UnicodeDecodeError):
        return None
    return None


_HTTP_METHODS = (b"GET ", b"POST ", b"PUT ", b"HEAD ", b"DELETE ", b"OPTIONS ", b"PATCH ", b"CONNECT ")


def parse_http_host(payload: bytes) -> str | None:
    if not payload.startswith(_HTTP_METHODS):
        return None
    head = payload.split(b"\r\n\r\n", 1)[0]
    for line in head.split(b"\r\n")[1:]:
        name, sep, value = line.partition(b":")
        if sep and name.strip().lower() == b"host":
            try:
                host = value.strip().decode("ascii").lower()
            except UnicodeDecodeError:
                return None
            return host.rsplit(":", 1)[0] if host.count(":") == 1 else host or None
    return None


def dominant_hostname(session: Session, kind: str) -> str | None:
    """Most frequent SNI/Host value among client payloads; ties go to the smallest name."""
    parser = {SNI: parse_sni, HTTP_HOST: parse_http_host}[kind]
    counts = Counter()
    for tp in session.packets:
        if tp.direction is Direction.A and tp.packet.payload:
            host = parser(tp.packet.payload)
            if host:
                counts[host] += 1
    if not counts:
        return None
    return min(counts, key=lambda h: (-counts[h], h))


def quantile(sorted_values, q: float) -> float:
    """Linear interpolation between closest ranks of an already sorted sample."""
    n = len(sorted_values)
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo])


def _ttl_stats(ttls: list[int]) -> dict[str, float]:
    s = sorted(ttls)
    n = len(s)
    mean = sum(s) / n
    return {
        "min": float(s[0]),
        "firstQ": float(quantile(s, 0.25)),
        "avg": mean,
        "median": float(quantile(s, 0.5)),
        "thirdQ": float(quantile(s, 0.75)),
        "max": float(s[-1]),
        "var": sum((x - mean) ** 2 for x in s) / n,
    }


def compute_features(session: Session, ranks: RankTable) -> dict[str, float]:
    if not session.packets:
        raise ValueError("session has no packets")
    ttl_all, ttl_b = [], []
    bytes_a = bytes_b = n_a = n_b = resets = 0
    for tp in session.packets:
        p = tp.packet
        ttl_all.append(p.ttl)
        if tp.direction is Direction.A:
            n_a += 1
            bytes_a += len(p.payload)
        else:
            n_b += 1
            bytes_b += len(p.payload)
            ttl_b.append(p.ttl)
        if p.tcp_flags & TcpFlags.RST:
            resets += 1

    all_stats = _ttl_stats(ttl_all)
    b_stats = _ttl_stats(ttl_b) if ttl_b else all_stats
    out = {f"ttl_{k}": v for k, v in all_stats.items()}
    for k in _TTL_B_STATS:
        out[f"ttl_B_{k}"] = b_stats[k]
    if bytes_b:
        ratio = bytes_a / bytes_b
    else:
        ratio = float(bytes_a + 1)
    out["bytes_A_B_ratio"] = ratio
    out["reset"] = float(resets)
    out["ssl_dom_server_name_alexaRank"] = float(rank_lookup(dominant_hostname(session, SNI), ranks))
    out["http_dom_host_alexaRank"] = float(rank_lookup(dominant_hostname(session, HTTP_HOST), ranks))
    out["ext_packets_A"] = float(n_a)
    out["ext_packets_B"] = float(n_b)
    out["ext_duration"] = session.end_time - session.start_time
    out["ext_payload_mean_A"] = bytes_a / n_a if n_a else 0.0
    out["ext_payload_mean_B"] = bytes_b / n_b if n_b else 0.0
    out["ext_ttl_B_max"] = float(max(ttl_b)) if ttl_b else all_stats["max"]
    return out


def extract_features(
    session: Session,
    ranks: RankTable,
    schema: FeatureSchema = DEFAULT_SCHEMA,
    stream_id: str | None = None,
) -> FeatureVector:
    """Featurize one session in ``schema`` order.

    The stream id defaults to the client IP, which identifies the device.
    """
    computed = compute_features(session, ranks)
    if set(schema.names) != set(computed):
        missing = sorted(set(computed) - set(schema.names))
        unknown = sorted(set(schema.names) - set(computed))
        raise SchemaMismatch(f"schema lacks {missing}, cannot compute {unknown}")
    return FeatureVector(
        values=tuple(computed[n] for n in schema.names),
        stream_id=stream_id if stream_id is not None else session.key.client_ip,
        start_time=session.start_time,
        label=session.label,
    )
