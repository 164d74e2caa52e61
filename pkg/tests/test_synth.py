import json
import math
from dataclasses import replace

import numpy as np
import pytest

from iotwl.capture import TcpFlags, Termination, read_sessions
from iotwl.errors import InvalidSpec
from iotwl.features import DEFAULT_SCHEMA, extract_features, load_rank_table
from iotwl.forest import ForestParams, train_forest
from iotwl.synth import (
    CorpusSpec,
    DeviceProfile,
    default_profiles,
    default_spec,
    disjoint_profiles,
    disjoint_spec,
    generate_corpus,
    generate_pcap_fixture,
    generate_sessions,
    label_map,
)

TTL_COLUMNS = [i for i, n in enumerate(DEFAULT_SCHEMA.names) if n.startswith("ttl_") or n == "ext_ttl_B_max"]


def tiny_spec(seed=0, duration=400.0, **kw):
    profiles = [replace(p, session_rate=(5.0, 3.0), **kw) for p in disjoint_profiles()]
    return CorpusSpec(profiles, duration, seed, idle_timeout=30.0)


def test_default_roster():
    names = [p.type_name for p in default_profiles()]
    assert names == ["socket", "TV", "baby_monitor", "watch", "smoke_detector", "motion_sensor",
                     "security_camera", "refrigerator", "thermostat"]
    short = generate_corpus(replace(default_spec(), duration=60.0))
    assert set(short.labels) == set(names)


def test_same_seed_same_corpus_other_seed_differs():
    a = generate_corpus(tiny_spec(1))
    b = generate_corpus(tiny_spec(1))
    c = generate_corpus(tiny_spec(2))
    assert np.array_equal(a.X, b.X) and a.labels == b.labels
    assert not (len(a) == len(c) and np.array_equal(a.X, c.X))


def test_zero_duration_is_empty():
    assert len(generate_corpus(tiny_spec(duration=0.0))) == 0


def test_spec_json_roundtrip(tmp_path):
    spec = default_spec(3)
    path = tmp_path / "spec.json"
    path.write_text(spec.to_json())
    back = CorpusSpec.load(path)
    assert back == spec


@pytest.mark.parametrize(
    "change",
    [
        {"ttl_client": {300: 1.0}},
        {"session_rate": (5.0, 6.0)},
        {"rst_probability": 0.7, "timeout_probability": 0.5},
        {"protocol_mix": {"ftp": 1.0}},
        {"hostname_pool": []},
        {"n_devices": 0},
    ],
)
def test_invalid_profiles_rejected(change):
    bad = replace(disjoint_profiles()[0], **change)
    with pytest.raises(InvalidSpec):
        CorpusSpec([bad], 10.0).validate()


def test_invalid_spec_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(InvalidSpec):
        CorpusSpec.load(path)
    path.write_text(json.dumps({"profiles": [{"type_name": "x"}], "duration": 1}))
    with pytest.raises(InvalidSpec):
        CorpusSpec.load(path)
    with pytest.raises(InvalidSpec):
        CorpusSpec([disjoint_profiles()[0]] * 2, 10.0).validate()


def test_pcap_roundtrip_matches_direct_features(tmp_path):
    spec = tiny_spec(7, rst_probability=0.2, timeout_probability=0.2)
    path = tmp_path / "f.pcap"
    truth = generate_pcap_fixture(spec, path)
    parsed, stats = read_sessions(path, spec.idle_timeout)
    assert len(parsed) == len(truth)
    assert {s.termination for s in truth} >= {Termination.RST, Termination.TIMEOUT, Termination.FIN}
    ranks = load_rank_table()
    direct = generate_corpus(spec, ranks)
    labels = label_map(spec)
    got = np.array([extract_features(s, ranks).values for s in parsed])
    assert np.allclose(got, direct.X, atol=1e-9, rtol=0)
    assert [labels[s.key.client_ip] for s in parsed] == direct.labels
    assert stats.dropped == 0 and stats.accepted == stats.total


def test_generated_sessions_are_well_formed():
    for s in generate_sessions(tiny_spec(4, rst_probability=0.3)):
        flags = [tp.packet.tcp_flags for tp in s.packets]
        times = [tp.packet.timestamp for tp in s.packets]
        assert times == sorted(times)
        assert s.packets[0].packet.src_ip == s.key.client_ip
        assert flags[0] == TcpFlags.SYN
        if s.termination is Termination.RST:
            assert flags[-1] & TcpFlags.RST


def test_disjoint_supports_do_not_overlap():
    data = generate_corpus(disjoint_spec(0, duration=2000.0))
    by_type = {t: data.X[data.label_mask([t])][:, TTL_COLUMNS] for t in data.class_names}
    for a in by_type:
        for b in by_type:
            if a < b:
                # brute-force minimum L1 distance between any two rows of different types
                d = np.abs(by_type[a][:, None, :] - by_type[b][None, :, :]).sum(axis=2)
                assert d.min() > 0


def test_separability_dial_depth_two_tree():
    data = generate_corpus(disjoint_spec(0, duration=2000.0))
    forest = train_forest(data, ForestParams(n_trees=1, max_depth=2, bootstrap=False, features_per_split=len(DEFAULT_SCHEMA)))
    pred = [forest.class_names[i] for i in forest.predict(data.X)]
    assert pred == data.labels


def test_inter_arrival_tracks_session_rate():
    from iotwl.evaluation import inter_arrival_stats

    spec = CorpusSpec([replace(disjoint_profiles()[0], session_rate=(4.0, 2.0))], 4000.0, 0)
    mean, std = inter_arrival_stats(generate_corpus(spec))["alpha"]
    assert mean == pytest.approx(4.0, rel=0.05)
    assert std == pytest.approx(2.0 / math.sqrt(3), rel=0.1)  # uniform jitter
