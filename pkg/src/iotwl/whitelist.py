"""Open-set session classifier, threshold tuning and stream voting.

A session is assigned the white-listed type with the largest posterior only
when that posterior is strictly greater than ``tr``; otherwise it is
``UNKNOWN``. Streams are decided by majority over a sliding window of session
decisions, with ties resolved to ``UNKNOWN`` first and then white-list order.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter, deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import EmptyValidation, SchemaMismatch
from .features import FeatureVector
from .forest import Forest

UNKNOWN = "UNKNOWN"
MODEL_FORMAT_VERSION = 1


def decide(posteriors: np.ndarray, tr: float) -> np.ndarray:
    """Column index of the winning class per row, or -1 for UNKNOWN."""
    posteriors = np.atleast_2d(posteriors)
    best = np.argmax(posteriors, axis=1)
    top = posteriors[np.arange(len(posteriors)), best]
    return np.where(top > tr, best, -1)


def index_to_labels(indices: np.ndarray, names: Sequence[str]) -> list[str]:
    return [names[i] if i >= 0 else UNKNOWN for i in indices]


@dataclass
class WhiteListModel:
    forest: Forest
    tr: float
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.tr <= 1.0:
            raise ValueError(f"tr must lie in [0, 1], got {self.tr}")
        names = self.forest.class_names
        if not names or len(set(names)) != len(names):
            raise ValueError("white list must be non-empty and duplicate-free")

    @property
    def white_list(self) -> list[str]:
        return list(self.forest.class_names)

    @property
    def schema(self):
        return self.forest.schema

    def decisions(self, X) -> list[str]:
        return index_to_labels(decide(self.forest.predict_proba(X), self.tr), self.white_list)

    def to_dict(self) -> dict:
        d = self.forest.to_dict()
        d.update(model_format_version=MODEL_FORMAT_VERSION, white_list=self.white_list, tr=self.tr, beta=self.beta)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def version(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "WhiteListModel":
        if d.get("model_format_version") != MODEL_FORMAT_VERSION:
            raise ValueError("not a white-list model file")
        forest = Forest.from_dict(d)
        if list(d["white_list"]) != forest.class_names:
            raise ValueError("white_list disagrees with forest class names")
        return cls(forest, float(d["tr"]), float(d["beta"]))

    @classmethod
    def load(cls, path) -> "WhiteListModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class SessionVerdict:
    decision: str
    posterior: np.ndarray
    stream_id: str
    start_time: float


def classify_session(model: WhiteListModel, x: FeatureVector) -> SessionVerdict:
    values = np.asarray(x.values, dtype=np.float64)
    if values.shape != (len(model.schema),):
        raise SchemaMismatch(f"expected {len(model.schema)} features, got {len(values)}")
    post = model.forest.predict_proba(values[None, :])[0]
    label = index_to_labels(decide(post, model.tr), model.white_list)[0]
    return SessionVerdict(label, post, x.stream_id, x.start_time)


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + b2) * precision * recall / denom


def weighted_scores(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int, beta: float = 1.0):
    """Support-weighted precision, recall and F-beta over the true classes.

    ``y_pred == -1`` (UNKNOWN) is never a positive prediction, so it only
    costs recall.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    support = np.bincount(y_true, minlength=n_classes).astype(np.float64)
    hit = y_true == y_pred
    tp = np.bincount(y_true[hit], minlength=n_classes).astype(np.float64)
    predicted = np.bincount(y_pred[y_pred >= 0], minlength=n_classes).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
    f = np.array([f_beta(p, r, beta) for p, r in zip(precision, recall)])
    w = support / support.sum()
    return float(w @ precision), float(w @ recall), float(w @ f)


def threshold_grid(step: float = 0.01) -> np.ndarray:
    if not 0 < step < 1:
        raise ValueError("grid_step must lie in (0, 1)")
    n = round(1 / step)
    if abs(n * step - 1) < 1e-9:
        return np.round(np.linspace(0.0, 1.0, n + 1), 12)
    return np.round(np.arange(0.0, 1.0 + 1e-12, step), 12)


@dataclass
class TuningReport:
    tr_star: float
    beta: float
    curve: list[tuple[float, float, float, float]] = field(default_factory=list)

    @property
    def best(self) -> tuple[float, float, float, float]:
        return next(p for p in self.curve if p[0] == self.tr_star)


def tune_threshold(forest, validation: Dataset, beta: float = 1.0, grid_step: float = 0.01) -> TuningReport:
    """Scan the threshold grid and keep the F-beta maximiser (largest on ties).

    ``forest`` is anything with ``class_names`` and ``predict_proba``.
    """
    if len(validation) == 0:
        raise EmptyValidation("validation set is empty")
    names = list(forest.class_names)
    lookup = {n: i for i, n in enumerate(names)}
    outside = sorted({lab for lab in validation.labels if lab not in lookup}, key=str)
    if outside:
        raise ValueError(f"validation labels outside the white list: {outside}")
    y_true = np.array([lookup[lab] for lab in validation.labels])
    proba = forest.predict_proba(validation.X)
    curve = []
    for tr in threshold_grid(grid_step):
        p, r, f = weighted_scores(y_true, decide(proba, tr), len(names), beta)
        curve.append((float(tr), p, r, f))
    best_f = max(c[3] for c in curve)
    tr_star = max(c[0] for c in curve if c[3] == best_f)
    return TuningReport(tr_star, beta, curve)


@dataclass(frozen=True)
class StreamVerdict:
    stream_id: str
    window: tuple[str, ...]
    decision: str
    tally: dict[str, int]
    decided_at: float
    provisional: bool = False

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "decided_at": self.decided_at,
            "decision": self.decision,
            "tally": dict(self.tally),
            "provisional": self.provisional,
        }


def majority(window: Iterable[str], white_list: Sequence[str]) -> tuple[str, dict[str, int]]:
    tally = Counter(window)
    rank = {UNKNOWN: -1, **{n: i for i, n in enumerate(white_list)}}
    decision = min(tally, key=lambda lab: (-tally[lab], rank.get(lab, len(rank)), lab))
    ordered = {lab: tally[lab] for lab in sorted(tally, key=lambda lab: (rank.get(lab, len(rank)), lab))}
    return decision, ordered


def vote_stream(decisions: Iterable[str], times: Iterable[float], stream_id: str, w: int, white_list: Sequence[str]):
    """Sliding-window majority over precomputed session decisions."""
    if w < 1:
        raise ValueError("window size must be at least 1")
    window: deque[str] = deque(maxlen=w)
    for label, t in zip(decisions, times):
        window.append(label)
        decision, tally = majority(window, white_list)
        yield StreamVerdict(stream_id, tuple(window), decision, tally, float(t), len(window) < w)


def classify_stream(model: WhiteListModel, sessions: Iterable[FeatureVector], w: int = 20):
    """Yield one StreamVerdict per session of a single, time-ordered stream.

    Verdicts issued before ``w`` sessions have been seen are flagged
    provisional.
    """
    sessions = list(sessions)
    if not sessions:
        return
    stream_ids = {s.stream_id for s in sessions}
    if len(stream_ids) != 1:
        raise ValueError("classify_stream expects sessions from exactly one stream")
    X = np.array([s.values for s in sessions], dtype=np.float64)
    if X.shape[1] != len(model.schema):
        raise SchemaMismatch(f"expected {len(model.schema)} features, got {X.shape[1]}")
    yield from vote_stream(model.decisions(X), [s.start_time for s in sessions], sessions[0].stream_id, w, model.white_list)


@dataclass(frozen=True)
class Alert:
    stream_id: str
    decided_at: float
    decision: str
    tally: dict[str, int]
    model_version: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "stream_id": self.stream_id,
                "decided_at": self.decided_at,
                "decision": self.decision,
                "tally": self.tally,
                "model_version": self.model_version,
            },
            sort_keys=True,
        )


def emit_alert(verdict: StreamVerdict, white_list: Sequence[str], previous: str | None, model_version: str = "") -> Alert | None:
    """Alert on the edge into UNKNOWN; ``previous`` is the stream's last emitted decision."""
    if verdict.decision not in (UNKNOWN, *white_list):
        raise ValueError(f"decision {verdict.decision!r} is not in the white list")
    if verdict.decision != UNKNOWN or previous == UNKNOWN:
        return None
    return Alert(verdict.stream_id, verdict.decided_at, verdict.decision, dict(verdict.tally), model_version)


class AlertTracker:
    """Per-stream state for edge-triggered alerting.

    Provisional verdicts are ignored unless ``include_provisional`` is set.
    """

    def __init__(self, white_list: Sequence[str], model_version: str = "", include_provisional: bool = False):
        self.white_list = list(white_list)
        self.model_version = model_version
        self.include_provisional = include_provisional
        self.state: dict[str, str] = {}

    def update(self, verdict: StreamVerdict) -> Alert | None:
        if verdict.provisional and not self.include_provisional:
            return None
        alert = emit_alert(verdict, self.white_list, self.state.get(verdict.stream_id), self.model_version)
        self.state[verdict.stream_id] = verdict.decision
        return alert
