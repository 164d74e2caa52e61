"""CSV and JSON writers for evaluation results."""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from pathlib import Path

from .evaluation import ConfusionMatrix, ExperimentResult, RocCurve, Summary, whitelisted_accuracy_by_type

SUMMARY_COLUMNS = (
    "device_type_left_out",
    "tr_star",
    "n_test_sessions",
    "detected_unknown_rate",
    "weighted_whitelisted_accuracy",
    "accuracy_when_white_listed",
)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _writer(fp):
    return csv.writer(fp, lineterminator="\n")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_experiment_json(result: ExperimentResult, path) -> None:
    write_json(result.to_dict(), path)


def write_summary_csv(results: Sequence[ExperimentResult], summary: Summary, path) -> None:
    """One row per left-out type plus ``average`` and ``std`` footer rows."""
    per_type = whitelisted_accuracy_by_type(results)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = _writer(fp)
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            w.writerow([
                r.left_out_type if r.left_out_type is not None else "",
                _fmt(r.tr_star),
                r.n_test_sessions,
                _fmt(r.detected_unknown_rate),
                _fmt(r.weighted_whitelisted_accuracy),
                _fmt(per_type.get(r.left_out_type)),
            ])
        w.writerow(["average", "", "", _fmt(summary.mean_unknown), _fmt(summary.mean_whitelisted), ""])
        w.writerow(["std", "", "", _fmt(summary.std_unknown), _fmt(summary.std_whitelisted), ""])


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    """Counts with actual labels down the side, then each row's accuracy."""
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = _writer(fp)
        w.writerow(["actual/predicted", *cm.labels, "accuracy"])
        for lab, row, acc in zip(cm.labels, cm.counts, cm.row_accuracy):
            w.writerow([lab, *(int(c) for c in row), _fmt(acc)])


def write_window_csv(curves: Mapping[str, Sequence[tuple[int, float, float]]], path, column: int = 1) -> None:
    """Rows are window sizes, columns device types.

    ``column`` 1 selects unknown-detection rates, 2 white-listed accuracy.
    """
    types = list(curves)
    windows = [row[0] for row in curves[types[0]]] if types else []
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = _writer(fp)
        w.writerow(["w", *types])
        for i, win in enumerate(windows):
            w.writerow([win, *(_fmt(curves[t][i][column]) for t in types)])


def write_roc_csv(roc: RocCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = _writer(fp)
        w.writerow(["tr", "fpr", "tpr"])
        for fpr, tpr, tr in roc.points:
            w.writerow([f"{tr:.2f}", _fmt(fpr), _fmt(tpr)])


def write_sstar_csv(rows: Mapping[str, int | None], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = _writer(fp)
        w.writerow(["device_type_left_out", "s_star"])
        for t, s in rows.items():
            w.writerow([t, "" if s is None else s])


def write_inter_arrival_csv(stats: Mapping[str, tuple[float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = _writer(fp)
        w.writerow(["device_type", "mean_seconds", "std_seconds"])
        for t, (mean, std) in stats.items():
            w.writerow([t, _fmt(mean), _fmt(std)])
