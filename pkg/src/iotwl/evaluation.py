"""Experiment protocol: temporal splits, leave-one-type-out runs and reports.

Windowed scores count one verdict per full sliding window (stride 1) within
each stream; partial windows at the start of a stream are not scored.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset
from .errors import EmptyDevice, InsufficientData, OneSidedData, SchemaMismatch
from .forest import ForestParams, train_forest, undersample
from .whitelist import UNKNOWN, TuningReport, WhiteListModel, decide, threshold_grid, tune_threshold

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 20
DEFAULT_CAP = 2000


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 1 / 3
    validation_fraction: float = 1 / 3
    test_fraction: float = 1 / 3

    def __post_init__(self):
        fr = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")


def temporal_split(data: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Cut every stream chronologically into train, validation and test.

    The first two parts get ``floor(n * fraction)`` rows; the remainder goes
    to test.
    """
    parts: list[list[int]] = [[], [], []]
    for sid, idx in data.streams().items():
        n = len(idx)
        n_train = math.floor(n * spec.train_fraction + 1e-9)
        n_val = math.floor(n * spec.validation_fraction + 1e-9)
        cuts = (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])
        if any(len(c) == 0 for c in cuts):
            warnings.warn(f"stream {sid} ({n} rows) leaves a split empty", EmptyDevice, stacklevel=2)
        for part, c in zip(parts, cuts):
            part.extend(c.tolist())
    return tuple(data.take(np.array(sorted(p), dtype=np.int64)) for p in parts)


@dataclass
class ConfusionMatrix:
    """Rows are actual labels, columns predictions; the last label is UNKNOWN."""

    labels: list[str]
    counts: np.ndarray

    @property
    def row_accuracy(self) -> list[float]:
        sums = self.counts.sum(axis=1)
        diag = np.diag(self.counts)
        return [float(d / s) if s else float("nan") for d, s in zip(diag, sums)]

    def to_dict(self) -> dict:
        acc = [None if math.isnan(a) else a for a in self.row_accuracy]
        return {"labels": self.labels, "counts": self.counts.tolist(), "row_accuracy": acc}


@dataclass
class ExperimentResult:
    left_out_type: str | None
    tr_star: float
    window: int
    n_test_sessions: int  # scored windows of the left-out type
    detected_unknown_rate: float | None
    weighted_whitelisted_accuracy: float
    confusion: ConfusionMatrix
    per_class_accuracy: dict[str, float] = field(default_factory=dict)
    top_features: list[tuple[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "left_out_type": self.left_out_type,
            "tr_star": self.tr_star,
            "window": self.window,
            "n_test_sessions": self.n_test_sessions,
            "detected_unknown_rate": self.detected_unknown_rate,
            "weighted_whitelisted_accuracy": self.weighted_whitelisted_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "top_features": [list(t) for t in self.top_features],
            "confusion": self.confusion.to_dict(),
        }


def window_votes(codes: np.ndarray, n_labels: int, w: int) -> np.ndarray:
    """Majority label of every full window of ``w`` consecutive codes.

    Code 0 is UNKNOWN and codes 1.. follow white-list order, so taking the
    first maximum implements the tie rule.
    """
    codes = np.asarray(codes, dtype=np.int64)
    if len(codes) < w:
        return np.empty(0, dtype=np.int64)
    onehot = np.zeros((len(codes) + 1, n_labels), dtype=np.int64)
    onehot[np.arange(1, len(codes) + 1), codes] = 1
    cum = np.cumsum(onehot, axis=0)
    counts = cum[w:] - cum[:-w]
    return np.argmax(counts, axis=1)


@dataclass
class _Scored:
    actual: np.ndarray  # per window, label code (0 = not white-listed)
    predicted: np.ndarray
    is_left_out: np.ndarray


class Experiment:
    """One trained and tuned white-list model plus its test-set decisions.

    Scoring at several window sizes reuses the same model.
    """

    def __init__(
        self,
        train: Dataset,
        validation: Dataset,
        test: Dataset,
        left_out_type: str | None,
        params: ForestParams = ForestParams(),
        beta: float = 1.0,
        cap_per_class: int = DEFAULT_CAP,
        grid_step: float = 0.01,
        seed: int = 0,
    ):
        self.left_out_type = left_out_type
        excluded = [left_out_type] if left_out_type is not None else []
        fit_rows = train.take(train.label_mask(excluded, include=False))
        fit_rows = undersample(fit_rows, cap_per_class, rng_seed=seed)
        tune_rows = validation.take(validation.label_mask(excluded, include=False))
        # leakage guard
        if left_out_type is not None and (left_out_type in fit_rows.labels or left_out_type in tune_rows.labels):
            raise AssertionError(f"{left_out_type} leaked into training or tuning data")
        if len(set(fit_rows.labels)) < 2:
            raise InsufficientData("need at least two white-listed types to train")
        self.forest = train_forest(fit_rows, replace(params, rng_seed=seed))
        white = set(self.forest.class_names)
        tune_rows = tune_rows.take(tune_rows.label_mask(white))
        self.validation = tune_rows
        self.tuning: TuningReport = tune_threshold(self.forest, tune_rows, beta, grid_step)
        self.model = WhiteListModel(self.forest, self.tuning.tr_star, beta)
        self.n_train = len(fit_rows)
        self._set_test(test)

    def _set_test(self, test: Dataset) -> None:
        names = self.model.white_list
        code = {n: i + 1 for i, n in enumerate(names)}
        self.test = test
        decided = decide(self.forest.predict_proba(test.X), self.model.tr) + 1 if len(test) else np.empty(0, int)
        self._streams = []
        for sid, idx in test.streams().items():
            labels = [test.labels[i] for i in idx]
            actual = np.array([code.get(lab, 0) for lab in labels])
            left = np.array([lab == self.left_out_type for lab in labels], dtype=bool)
            self._streams.append((actual, decided[idx], left))

    @property
    def labels(self) -> list[str]:
        return [*self.model.white_list, UNKNOWN]

    def score(self, w: int) -> _Scored:
        if w < 1:
            raise ValueError("window size must be at least 1")
        n_labels = len(self.model.white_list) + 1
        actual, predicted, left = [], [], []
        for a, d, lo in self._streams:
            votes = window_votes(d, n_labels, w)
            actual.append(a[w - 1:])
            predicted.append(votes)
            left.append(lo[w - 1:])
        if not actual:
            empty = np.empty(0, dtype=np.int64)
            return _Scored(empty, empty, empty.astype(bool))
        return _Scored(np.concatenate(actual), np.concatenate(predicted), np.concatenate(left))

    def rates(self, w: int) -> tuple[float, float]:
        """(unknown-detection rate, white-listed accuracy) at window ``w``; NaN when nothing is scored."""
        s = self.score(w)
        unk = float(np.mean(s.predicted[s.is_left_out] == 0)) if s.is_left_out.any() else float("nan")
        white = s.actual > 0
        acc = float(np.mean(s.predicted[white] == s.actual[white])) if white.any() else float("nan")
        return unk, acc

    def result(self, w: int = DEFAULT_WINDOW, top_k: int = 10) -> ExperimentResult:
        s = self.score(w)
        names = self.model.white_list
        n = len(names) + 1
        # matrix order: white list then UNKNOWN; codes use UNKNOWN = 0
        to_row = np.array([n - 1, *range(n - 1)])
        counts = np.zeros((n, n), dtype=np.int64)
        np.add.at(counts, (to_row[s.actual], to_row[s.predicted]), 1)
        confusion = ConfusionMatrix(self.labels, counts)
        unk, acc = self.rates(w)
        per_class = {lab: a for lab, a in zip(self.labels, confusion.row_accuracy) if not math.isnan(a)}
        order = np.argsort(-self.forest.importances, kind="stable")[:top_k]
        top = [(self.forest.schema.names[i], float(self.forest.importances[i])) for i in order]
        return ExperimentResult(
            left_out_type=self.left_out_type,
            tr_star=self.model.tr,
            window=w,
            n_test_sessions=int(s.is_left_out.sum()),
            detected_unknown_rate=None if self.left_out_type is None or math.isnan(unk) else unk,
            weighted_whitelisted_accuracy=acc,
            confusion=confusion,
            per_class_accuracy=per_class,
            top_features=top,
        )


def experiment_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def prepare_experiment(
    data: Dataset,
    left_out_type: str | None,
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    cap_per_class: int = DEFAULT_CAP,
    grid_step: float = 0.01,
    seed: int = 0,
    split: SplitSpec = SplitSpec(),
) -> Experiment:
    if left_out_type is not None and left_out_type not in data.labels:
        raise InsufficientData(f"left-out type {left_out_type!r} not present in data")
    train, val, test = temporal_split(data, split)
    return Experiment(train, val, test, left_out_type, params, beta, cap_per_class, grid_step, seed)


def leave_one_out_experiment(
    data: Dataset,
    left_out_type: str | None,
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    w: int = DEFAULT_WINDOW,
    cap_per_class: int = DEFAULT_CAP,
    grid_step: float = 0.01,
    seed: int = 0,
    split: SplitSpec = SplitSpec(),
) -> ExperimentResult:
    exp = prepare_experiment(data, left_out_type, params, beta, cap_per_class, grid_step, seed, split)
    return exp.result(w)


@dataclass
class Summary:
    mean_unknown: float
    std_unknown: float
    mean_whitelisted: float
    std_whitelisted: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def summarize(results: Sequence[ExperimentResult]) -> Summary:
    """Mean and sample standard deviation (ddof=1) of both rates."""
    unk = np.array([r.detected_unknown_rate for r in results if r.detected_unknown_rate is not None])
    acc = np.array([r.weighted_whitelisted_accuracy for r in results])

    def sd(a):
        return float(np.std(a, ddof=1)) if len(a) > 1 else 0.0

    return Summary(float(np.mean(unk)) if len(unk) else float("nan"), sd(unk), float(np.mean(acc)), sd(acc))


def _run_one(args) -> ExperimentResult:
    data, left_out, params, beta, w, cap, grid_step, seed = args
    logger.info("experiment: %s left out", left_out)
    return leave_one_out_experiment(data, left_out, params, beta, w, cap, grid_step, seed)


def run_all_experiments(
    data: Dataset,
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    w: int = DEFAULT_WINDOW,
    cap_per_class: int = DEFAULT_CAP,
    grid_step: float = 0.01,
    master_seed: int = 0,
    n_jobs: int = 1,
) -> tuple[list[ExperimentResult], Summary]:
    """One leave-one-out experiment per type, seeded from ``(master_seed, index)``."""
    types = data.class_names
    jobs = [
        (data, t, params, beta, w, cap_per_class, grid_step, experiment_seed(master_seed, i))
        for i, t in enumerate(types)
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return results, summarize(results)


def whitelisted_accuracy_by_type(results: Sequence[ExperimentResult]) -> dict[str, float]:
    """Mean accuracy of each type over the experiments in which it stayed white-listed."""
    acc: dict[str, list[float]] = {}
    for r in results:
        for lab, a in r.per_class_accuracy.items():
            if lab != UNKNOWN:
                acc.setdefault(lab, []).append(a)
    return {lab: float(np.mean(v)) for lab, v in sorted(acc.items())}


def accuracy_vs_window(
    data: Dataset,
    left_out_type: str,
    windows: Sequence[int],
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    cap_per_class: int = DEFAULT_CAP,
    seed: int = 0,
    experiment: Experiment | None = None,
) -> list[tuple[int, float, float]]:
    """Rows of ``(w, unknown-detection rate, white-listed accuracy)`` from one model."""
    if list(windows) != sorted(windows):
        raise ValueError("windows must be sorted ascending")
    exp = experiment or prepare_experiment(data, left_out_type, params, beta, cap_per_class, seed=seed)
    return [(int(w), *exp.rates(int(w))) for w in windows]


def window_curves(
    data: Dataset,
    windows: Sequence[int],
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    cap_per_class: int = DEFAULT_CAP,
    master_seed: int = 0,
    types: Sequence[str] | None = None,
) -> dict[str, list[tuple[int, float, float]]]:
    types = list(types) if types is not None else data.class_names
    index = {t: i for i, t in enumerate(data.class_names)}
    return {
        t: accuracy_vs_window(data, t, windows, params, beta, cap_per_class, experiment_seed(master_seed, index[t]))
        for t in types
    }


def minimal_perfect_window(
    data: Dataset,
    left_out_type: str,
    w_max: int,
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    cap_per_class: int = DEFAULT_CAP,
    seed: int = 0,
    criterion: str = "both",
    experiment: Experiment | None = None,
) -> int | None:
    """Smallest window up to ``w_max`` with perfect scores, by linear scan.

    ``criterion`` selects which rate must reach 1.0: ``"unknown"``,
    ``"whitelisted"`` or ``"both"``.
    """
    if w_max < 1:
        raise ValueError("w_max must be at least 1")
    if criterion not in ("both", "unknown", "whitelisted"):
        raise ValueError(f"unknown criterion {criterion!r}")
    exp = experiment or prepare_experiment(data, left_out_type, params, beta, cap_per_class, seed=seed)
    for w in range(1, w_max + 1):
        unk, acc = exp.rates(w)
        ok_unk = unk == 1.0
        ok_acc = acc == 1.0
        if (criterion == "both" and ok_unk and ok_acc) or (criterion == "unknown" and ok_unk) or (
            criterion == "whitelisted" and ok_acc
        ):
            return w
    return None


@dataclass
class RocCurve:
    points: list[tuple[float, float, float]]  # (fpr, tpr, tr), ordered by tr
    auc: float

    def to_dict(self) -> dict:
        return {"auc": self.auc, "points": [list(p) for p in self.points]}


def compute_roc(forest, white_listed: Dataset, left_out: Dataset, grid_step: float = 0.01) -> RocCurve:
    """Sweep ``tr``; UNKNOWN is the positive class.

    TPR is the share of left-out sessions rejected, FPR the share of
    white-listed sessions rejected. AUC is the trapezoid area over the grid.
    """
    if len(white_listed) == 0 or len(left_out) == 0:
        raise OneSidedData("ROC needs both white-listed and left-out sessions")
    top_white = forest.predict_proba(white_listed.X).max(axis=1)
    top_left = forest.predict_proba(left_out.X).max(axis=1)
    points = []
    for tr in threshold_grid(grid_step):
        fpr = float(np.mean(~(top_white > tr)))
        tpr = float(np.mean(~(top_left > tr)))
        points.append((fpr, tpr, float(tr)))
    xy = sorted({(f, t) for f, t, _ in points} | {(0.0, 0.0), (1.0, 1.0)})
    x = np.array([p[0] for p in xy])
    y = np.array([p[1] for p in xy])
    auc = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))
    return RocCurve(points, auc)


def roc_experiment(
    data: Dataset,
    left_out_type: str,
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    cap_per_class: int = DEFAULT_CAP,
    grid_step: float = 0.01,
    seed: int = 0,
) -> RocCurve:
    """ROC of a model trained without ``left_out_type``, on the validation split."""
    exp = prepare_experiment(data, left_out_type, params, beta, cap_per_class, grid_step, seed)
    _, val, _ = temporal_split(data)
    white = val.take(val.label_mask(exp.model.white_list))
    left = val.take(val.label_mask([left_out_type]))
    return compute_roc(exp.forest, white, left, grid_step)


def delta_stats(times: Sequence[float]) -> tuple[float, float, int]:
    t = np.sort(np.asarray(times, dtype=np.float64))
    d = np.diff(t)
    return float(d.mean()), float(d.std()), len(d)


def inter_arrival_stats(data: Dataset) -> dict[str, tuple[float, float]]:
    """Per type, mean and population std of gaps between consecutive sessions of each stream.

    Gaps from all streams of a type are pooled; types without a single gap
    are left out.
    """
    pooled: dict[str, list[np.ndarray]] = {}
    for sid, idx in data.streams().items():
        by_label: dict[str, list[float]] = {}
        for i in idx:
            by_label.setdefault(data.labels[i], []).append(data.start_times[i])
        for lab, times in by_label.items():
            if len(times) >= 2:
                pooled.setdefault(lab, []).append(np.diff(np.sort(times)))
    out = {}
    for lab in sorted(pooled, key=str):
        d = np.concatenate(pooled[lab])
        out[lab] = (float(d.mean()), float(d.std()))
    return out


def transportability_experiment(
    train_corpus: Dataset,
    test_corpus: Dataset,
    device_type: str,
    mode: str = "left_out",
    params: ForestParams = ForestParams(),
    beta: float = 1.0,
    w: int = DEFAULT_WINDOW,
    cap_per_class: int = DEFAULT_CAP,
    grid_step: float = 0.01,
    seed: int = 0,
    split: SplitSpec = SplitSpec(),
) -> ExperimentResult:
    """Train and tune on one corpus, score on the test split of another.

    With identical corpora this reproduces the in-corpus experiment exactly.
    """
    if mode not in ("left_out", "white_listed"):
        raise ValueError("mode must be 'left_out' or 'white_listed'")
    if train_corpus.schema != test_corpus.schema:
        raise SchemaMismatch("train and test corpora use different feature schemas")
    if device_type not in test_corpus.labels:
        raise InsufficientData(f"{device_type!r} not present in the test corpus")
    left_out = device_type if mode == "left_out" else None
    train, val, _ = temporal_split(train_corpus, split)
    _, _, test = temporal_split(test_corpus, split)
    exp = Experiment(train, val, test, left_out, params, beta, cap_per_class, grid_step, seed)
    return exp.result(w)
