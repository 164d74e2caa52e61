"""Columnar container for feature vectors and the dataset CSV format.

CSV layout: one header row of the schema's feature names followed by
``label,stream_id,start_time``; one row per session, ``.`` decimals,
UTF-8. Floats are written with ``repr`` so a write/read cycle is lossless.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaMismatch
from .features import DEFAULT_SCHEMA, FeatureSchema, FeatureVector

META_COLUMNS = ("label", "stream_id", "start_time")


@dataclass
class Dataset:
    """Feature matrix plus per-row label, stream id and start time.

    ``labels`` entries are ``None`` for unlabeled rows.
    """

    schema: FeatureSchema
    X: np.ndarray
    labels: list
    stream_ids: list
    start_times: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, len(self.schema))
        self.start_times = np.asarray(self.start_times, dtype=np.float64)
        self.labels = list(self.labels)
        self.stream_ids = list(self.stream_ids)
        n = len(self.X)
        if not (len(self.labels) == len(self.stream_ids) == len(self.start_times) == n):
            raise ValueError("column lengths disagree")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature values must be finite")

    def __len__(self) -> int:
        return len(self.X)

    @classmethod
    def empty(cls, schema: FeatureSchema = DEFAULT_SCHEMA) -> "Dataset":
        return cls(schema, np.empty((0, len(schema))), [], [], np.empty(0))

    @classmethod
    def from_vectors(cls, vectors: Iterable[FeatureVector], schema: FeatureSchema = DEFAULT_SCHEMA) -> "Dataset":
        vectors = list(vectors)
        if not vectors:
            return cls.empty(schema)
        for v in vectors:
            if len(v.values) != len(schema):
                raise SchemaMismatch(f"vector has {len(v.values)} values, schema has {len(schema)}")
        return cls(
            schema,
            np.array([v.values for v in vectors], dtype=np.float64),
            [v.label for v in vectors],
            [v.stream_id for v in vectors],
            np.array([v.start_time for v in vectors], dtype=np.float64),
        )

    def vectors(self) -> list[FeatureVector]:
        return [
            FeatureVector(tuple(float(x) for x in row), sid, float(t), lab)
            for row, lab, sid, t in zip(self.X, self.labels, self.stream_ids, self.start_times)
        ]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)
        return Dataset(
            self.schema,
            self.X[idx],
            [self.labels[i] for i in idx],
            [self.stream_ids[i] for i in idx],
            self.start_times[idx],
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if other.schema != self.schema:
            raise SchemaMismatch("cannot concatenate datasets with different schemas")
        return Dataset(
            self.schema,
            np.vstack([self.X, other.X]),
            self.labels + other.labels,
            self.stream_ids + other.stream_ids,
            np.concatenate([self.start_times, other.start_times]),
        )

    @property
    def class_names(self) -> list[str]:
        return sorted({lab for lab in self.labels if lab is not None})

    def label_mask(self, names: Sequence[str], include: bool = True) -> np.ndarray:
        names = set(names)
        return np.array([(lab in names) == include for lab in self.labels], dtype=bool)

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for lab in self.labels:
            counts[lab] = counts.get(lab, 0) + 1
        return counts

    def streams(self) -> dict[str, np.ndarray]:
        """Row indices per stream id, each in chronological order."""
        groups: dict[str, list[int]] = {}
        for i, sid in enumerate(self.stream_ids):
            groups.setdefault(sid, []).append(i)
        out = {}
        for sid in sorted(groups):
            idx = np.array(groups[sid])
            out[sid] = idx[np.argsort(self.start_times[idx], kind="stable")]
        return out


def write_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow([*data.schema.names, *META_COLUMNS])
        for row, lab, sid, t in zip(data.X, data.labels, data.stream_ids, data.start_times):
            w.writerow([*(repr(float(x)) for x in row), "" if lab is None else lab, sid, repr(float(t))])


def read_dataset_csv(path, schema: FeatureSchema | None = None) -> Dataset:
    """Load a dataset CSV. With ``schema`` given, the header must match it exactly."""
    with open(Path(path), newline="", encoding="utf-8") as fp:
        reader = csv.reader(fp)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, no header") from None
        if tuple(header[-3:]) != META_COLUMNS:
            raise SchemaMismatch(f"{path}: last columns must be {','.join(META_COLUMNS)}")
        names = tuple(header[:-3])
        if schema is None:
            schema = FeatureSchema(names)
        elif names != schema.names:
            raise SchemaMismatch(f"{path}: feature columns do not match the model schema")
        rows, labels, sids, times = [], [], [], []
        for rec in reader:
            if not rec:
                continue
            rows.append([float(x) for x in rec[:-3]])
            labels.append(rec[-3] or None)
            sids.append(rec[-2])
            times.append(float(rec[-1]))
    if not rows:
        return Dataset.empty(schema)
    return Dataset(schema, np.array(rows), labels, sids, np.array(times))
