from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import pytest

from iotwl.capture import PacketRecord, TcpFlags
from iotwl.dataset import Dataset
from iotwl.features import FeatureSchema

ACCEPTANCE_LINES: list[str] = []

SYN = TcpFlags.SYN
SYN_ACK = TcpFlags.SYN | TcpFlags.ACK
ACK = TcpFlags.ACK
PSH_ACK = TcpFlags.PSH | TcpFlags.ACK
FIN_ACK = TcpFlags.FIN | TcpFlags.ACK
RST_ACK = TcpFlags.RST | TcpFlags.ACK


@contextmanager
def criterion(number: int, text: str):
    """Record one PASS/FAIL line for the acceptance summary."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: FAIL  {text} ({type(exc).__name__}: {exc})".splitlines()[0])
        raise
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: PASS  {text}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def handshake(t, client=("10.0.0.2", 50000), server=("10.0.0.1", 443), ttl_a=64, ttl_b=50, rounds=(), end=FIN_ACK, gap=0.01):
    """Packets of one TCP session starting at ``t``.

    ``rounds`` is a list of (client payload, server payload) pairs; ``end``
    is FIN_ACK (client closes), RST_ACK (server resets) or None.
    """
    (cip, cport), (sip, sport) = client, server
    out = []

    def a(flags, payload=b""):
        out.append(PacketRecord(round(t + gap * len(out), 6), cip, sip, cport, sport, ttl_a, flags, payload))

    def b(flags, payload=b""):
        out.append(PacketRecord(round(t + gap * len(out), 6), sip, cip, sport, cport, ttl_b, flags, payload))

    a(SYN)
    b(SYN_ACK)
    a(ACK)
    for pa, pb in rounds:
        if pa:
            a(PSH_ACK, pa)
        if pb:
            b(PSH_ACK, pb)
    if end == FIN_ACK:
        a(FIN_ACK)
    elif end == RST_ACK:
        b(RST_ACK)
    return out


def toy_dataset(X, labels, stream_ids=None, times=None) -> Dataset:
    X = np.asarray(X, dtype=float)
    schema = FeatureSchema(tuple(f"f{i}" for i in range(X.shape[1])))
    n = len(X)
    return Dataset(
        schema,
        X,
        list(labels),
        list(stream_ids) if stream_ids is not None else [str(lab) for lab in labels],
        np.asarray(times, dtype=float) if times is not None else np.arange(n, dtype=float),
    )


class StubForest:
    """Returns the first ``len(class_names)`` columns of X as posteriors."""

    def __init__(self, class_names, schema=None):
        self.class_names = list(class_names)
        self.schema = schema

    def predict_proba(self, X):
        P = np.asarray(X, dtype=float)[:, : len(self.class_names)]
        return P / P.sum(axis=1, keepdims=True)


@pytest.fixture(scope="session")
def small_disjoint():
    from iotwl.synth import disjoint_spec, generate_corpus

    return generate_corpus(disjoint_spec(rng_seed=5, duration=3000))
