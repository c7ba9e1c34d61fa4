"""Stacked segment arrays used by training, attacks and audits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import (
    DEFAULT_MA_WINDOW,
    DatasetError,
    EcgRecord,
    Segment,
    class_names,
    label_index,
    preprocess_record,
    validate_record,
)


@dataclass
class SegmentSet:
    x: np.ndarray            # [n, leads, samples]
    labels: np.ndarray       # [n] class indices for ``task``
    ids: list[str]
    patient_ids: list[str]
    record_ids: list[str]
    task: str = "binary"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if not (self.x.shape[0] == len(self.labels) == n == len(self.patient_ids) == len(self.record_ids)):
            raise ValueError("SegmentSet fields disagree in length")
        if len(set(self.ids)) != n:
            raise ValueError("segment ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(class_names(self.task))

    @classmethod
    def from_segments(cls, segments: list[Segment], task: str = "binary") -> "SegmentSet":
        if not segments:
            raise DatasetError("no segments")
        return cls(
            np.stack([s.leads for s in segments]),
            np.array([label_index(s.label, task) for s in segments]),
            [s.segment_id for s in segments],
            [s.patient_id for s in segments],
            [s.record_id for s in segments],
            task,
        )

    @classmethod
    def empty_like(cls, other: "SegmentSet") -> "SegmentSet":
        return other.subset([])

    def subset(self, idx) -> "SegmentSet":
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        return SegmentSet(
            self.x[idx], self.labels[idx],
            [self.ids[i] for i in idx], [self.patient_ids[i] for i in idx],
            [self.record_ids[i] for i in idx], self.task,
        )

    def where(self, mask) -> "SegmentSet":
        return self.subset(np.flatnonzero(np.asarray(mask, dtype=bool)))

    def patients(self) -> list[str]:
        return sorted(set(self.patient_ids))

    def of_patient(self, pid: str) -> "SegmentSet":
        return self.where([p == pid for p in self.patient_ids])

    def without_patient(self, pid: str) -> "SegmentSet":
        return self.where([p != pid for p in self.patient_ids])

    def concat(self, other: "SegmentSet") -> "SegmentSet":
        if self.task != other.task:
            raise ValueError("cannot concatenate segment sets of different tasks")
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return SegmentSet(
            np.concatenate([self.x, other.x]), np.concatenate([self.labels, other.labels]),
            self.ids + other.ids, self.patient_ids + other.patient_ids,
            self.record_ids + other.record_ids, self.task,
        )


def build_segment_set(records: list[EcgRecord], task: str = "binary",
                      window: int = DEFAULT_MA_WINDOW) -> tuple[SegmentSet, list[tuple[str, str]]]:
    """Validate, segment, filter and normalize records.

    Returns the segment set plus (record_id, reason) for every rejected record.
    """
    segs, rejected = [], []
    for rec in records:
        v = validate_record(rec)
        if not v:
            rejected.append((rec.record_id, v.reason))
            continue
        segs.extend(preprocess_record(rec, window))
    return SegmentSet.from_segments(segs, task), rejected


def split_by_record(data: SegmentSet, rng, train_fraction: float = 0.8) -> tuple[SegmentSet, SegmentSet]:
    """Split so that all segments of one record land on the same side."""
    records = sorted(set(data.record_ids))
    order = rng.permutation(len(records))
    n_train = int(round(train_fraction * len(records)))
    train_records = {records[i] for i in order[:n_train]}
    mask = np.array([r in train_records for r in data.record_ids])
    return data.where(mask), data.where(~mask)
