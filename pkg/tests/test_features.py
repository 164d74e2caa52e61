import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotwl.capture import Direction, FlowKey, PacketRecord, Session, TaggedPacket, Termination
from iotwl.dataset import Dataset, read_dataset_csv, write_dataset_csv
from iotwl.errors import SchemaMismatch
from iotwl.features import (
    DEFAULT_RANK,
    DEFAULT_SCHEMA,
    HTTP_HOST,
    SNI,
    FeatureSchema,
    RankTable,
    compute_features,
    dominant_hostname,
    extract_features,
    load_rank_table,
    parse_http_host,
    parse_sni,
    quantile,
    rank_lookup,
)
from iotwl.synth import http_request, tls_client_hello

from conftest import PSH_ACK, RST_ACK, handshake

KEY = FlowKey("10.0.0.2", 50000, "10.0.0.1", 443)
RANKS = RankTable({"example.com": 100, "cdn.example.com": 7, "other.org": 55})


def session_of(pkts, label=None):
    tagged = tuple(TaggedPacket(p, Direction.A if p.src_ip == KEY.client_ip else Direction.B) for p in pkts)
    return Session(KEY, tagged, Termination.FIN, label)


def pkt(t, direction, ttl, flags=PSH_ACK, payload=b""):
    if direction == "A":
        return PacketRecord(t, KEY.client_ip, KEY.server_ip, KEY.client_port, KEY.server_port, ttl, flags, payload)
    return PacketRecord(t, KEY.server_ip, KEY.client_ip, KEY.server_port, KEY.client_port, ttl, flags, payload)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=40), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
def test_quantile_matches_numpy_linear(values, q):
    assert quantile(sorted(values), q) == pytest.approx(np.percentile(values, q * 100, method="linear"), abs=1e-9)


def _brute_stats(ttls):
    # independent route: position-weighted definition of the type-7 quantile
    s = sorted(ttls)
    n = len(s)

    def q(p):
        pos = p * (n - 1)
        below = [v for i, v in enumerate(s) if i <= pos]
        above = [v for i, v in enumerate(s) if i >= pos]
        lo, hi = below[-1], above[0]
        return lo + (pos - int(pos)) * (hi - lo)

    mean = sum(s) / n
    return [min(s), q(0.25), mean, q(0.5), q(0.75), max(s), sum((x - mean) ** 2 for x in s) / n]


@settings(max_examples=60)
@given(st.lists(st.integers(1, 255), min_size=1, max_size=12), st.lists(st.integers(1, 255), min_size=0, max_size=12))
def test_ttl_features_against_brute_force(ttl_a, ttl_b):
    pkts = [pkt(float(i), "A", t) for i, t in enumerate(ttl_a)] + [pkt(100.0 + i, "B", t) for i, t in enumerate(ttl_b)]
    f = compute_features(session_of(pkts), RANKS)
    expect_all = _brute_stats(ttl_a + ttl_b)
    got_all = [f[f"ttl_{k}"] for k in ("min", "firstQ", "avg", "median", "thirdQ", "max", "var")]
    assert got_all == pytest.approx(expect_all, abs=1e-9)
    b = _brute_stats(ttl_b) if ttl_b else expect_all
    got_b = [f[f"ttl_B_{k}"] for k in ("min", "firstQ", "median", "thirdQ", "var")]
    assert got_b == pytest.approx([b[0], b[1], b[3], b[4], b[6]], abs=1e-9)


def test_server_ttl_worked_example():
    pkts = [pkt(0.0, "A", 64)] + [pkt(1.0 + i, "B", t) for i, t in enumerate([50, 60, 70, 80])]
    f = compute_features(session_of(pkts), RANKS)
    assert f["ttl_B_min"] == 50
    assert f["ttl_B_median"] == 65
    assert f["ttl_B_firstQ"] == 57.5
    assert f["ttl_B_var"] == 125.0


def test_single_packet_session():
    f = compute_features(session_of([pkt(0.0, "A", 64, payload=b"abcd")]), RANKS)
    assert f["ttl_min"] == f["ttl_max"] == f["ttl_B_median"] == 64
    assert f["ttl_var"] == f["ttl_B_var"] == 0.0
    assert f["bytes_A_B_ratio"] == 5.0  # no server bytes: A + 1
    assert f["ext_duration"] == 0.0
    assert all(math.isfinite(v) for v in f.values())


def test_ratio_when_both_directions_silent():
    f = compute_features(session_of([pkt(0.0, "A", 64), pkt(0.1, "B", 50)]), RANKS)
    assert f["bytes_A_B_ratio"] == 1.0


def test_ratio_and_resets():
    pkts = [pkt(0.0, "A", 64, payload=b"x" * 30), pkt(0.1, "B", 50, payload=b"y" * 10), pkt(0.2, "B", 50, RST_ACK)]
    f = compute_features(session_of(pkts), RANKS)
    assert f["bytes_A_B_ratio"] == 3.0
    assert f["reset"] == 1.0
    assert f["ext_packets_A"] == 1 and f["ext_packets_B"] == 2
    assert f["ext_payload_mean_B"] == 5.0


def test_rank_lookup_exact_then_suffix():
    assert rank_lookup("cdn.example.com", RANKS) == 7
    assert rank_lookup("a.b.example.com", RANKS) == 100
    assert rank_lookup("EXAMPLE.com.", RANKS) == 100
    assert rank_lookup("example.net", RANKS) == DEFAULT_RANK
    assert rank_lookup(None, RANKS) == DEFAULT_RANK
    # a bare TLD entry never matches a suffix
    assert rank_lookup("foo.com", RankTable({"com": 3})) == DEFAULT_RANK


def test_rank_table_validation():
    with pytest.raises(ValueError):
        RankTable({"a.com": DEFAULT_RANK})
    with pytest.raises(ValueError):
        RankTable({"a.com": 0})


def test_bundled_rank_table_loads():
    table = load_rank_table()
    assert table.ranks["search-giant.com"] == 1
    assert all(r < table.default_rank for r in table.ranks.values())


def test_sni_and_host_parsers():
    assert parse_sni(tls_client_hello("Api.Example.com")) == "api.example.com"
    assert parse_sni(b"\x16\x03\x01garbage") is None
    assert parse_sni(b"") is None
    assert parse_http_host(http_request("shop.other.org")) == "shop.other.org"
    assert parse_http_host(b"GET / HTTP/1.1\r\nHost: h.example.com:8080\r\n\r\n") == "h.example.com"
    assert parse_http_host(b"\x16\x03\x01") is None


def test_dominant_hostname_tie_goes_to_smallest():
    pkts = [
        pkt(0.0, "A", 64, payload=tls_client_hello("b.example.com")),
        pkt(0.1, "A", 64, payload=tls_client_hello("a.example.com")),
        pkt(0.2, "B", 50, payload=tls_client_hello("z.example.com")),  # server side ignored
    ]
    s = session_of(pkts)
    assert dominant_hostname(s, SNI) == "a.example.com"
    assert dominant_hostname(s, HTTP_HOST) is None
    f = compute_features(s, RANKS)
    assert f["ssl_dom_server_name_alexaRank"] == 100
    assert f["http_dom_host_alexaRank"] == DEFAULT_RANK


def test_extract_features_order_and_stream_id():
    s = session_of(handshake(3.0, client=(KEY.client_ip, KEY.client_port), rounds=[(b"aa", b"bbbb")]), label="tv")
    v = extract_features(s, RANKS)
    assert len(v.values) == len(DEFAULT_SCHEMA)
    assert v.stream_id == KEY.client_ip and v.label == "tv" and v.start_time == 3.0
    f = compute_features(s, RANKS)
    assert v.values == tuple(f[n] for n in DEFAULT_SCHEMA.names)
    reordered = FeatureSchema(tuple(reversed(DEFAULT_SCHEMA.names)))
    assert extract_features(s, RANKS, reordered).values == tuple(reversed(v.values))


def test_extract_rejects_foreign_schema():
    s = session_of(handshake(0.0))
    with pytest.raises(SchemaMismatch):
        extract_features(s, RANKS, FeatureSchema(("ttl_min", "made_up")))


def test_dataset_csv_roundtrip_is_lossless(tmp_path, small_disjoint):
    path = tmp_path / "d.csv"
    write_dataset_csv(small_disjoint, path)
    back = read_dataset_csv(path, schema=DEFAULT_SCHEMA)
    assert np.array_equal(back.X, small_disjoint.X)
    assert back.labels == small_disjoint.labels
    assert np.array_equal(back.start_times, small_disjoint.start_times)


def test_dataset_csv_header_mismatch(tmp_path, small_disjoint):
    path = tmp_path / "d.csv"
    write_dataset_csv(small_disjoint.take(np.arange(3)), path)
    with pytest.raises(SchemaMismatch):
        read_dataset_csv(path, schema=FeatureSchema(("a", "b")))


def test_empty_dataset_csv_is_header_only(tmp_path):
    path = tmp_path / "e.csv"
    write_dataset_csv(Dataset.empty(), path)
    assert path.read_text().count("\n") == 1
    assert len(read_dataset_csv(path)) == 0
