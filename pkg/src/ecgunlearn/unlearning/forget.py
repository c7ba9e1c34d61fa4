"""Forget-set specification and its partition of a segment set."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..dataset import SegmentSet
from ..signal import DatasetError, class_index, class_names

FORGET_MODES = ("by-patient", "by-class")


@dataclass
class ForgetSpec:
    mode: str = "by-patient"
    targets: tuple = ()           # patient ids or class names, depending on mode
    forget_ids: tuple = field(default=(), compare=False)   # S, resolved
    retain_ids: tuple = field(default=(), compare=False)   # L = D \ S, resolved

    def __post_init__(self):
        if self.mode not in FORGET_MODES:
            raise ValueError(f"forget mode must be one of {FORGET_MODES}, got {self.mode!r}")
        self.targets = tuple(self.targets)

    @property
    def resolved(self) -> bool:
        return bool(self.forget_ids or self.retain_ids)

    def split(self, data: SegmentSet) -> tuple[SegmentSet, SegmentSet]:
        """(S, L) as segment sets, in dataset order."""
        forget = set(self.forget_ids)
        mask = [i in forget for i in data.ids]
        return data.where(mask), data.where([not m for m in mask])


def _selected(data: SegmentSet, spec: ForgetSpec) -> list[bool]:
    if not spec.targets:
        raise DatasetError("forget spec names no targets")
    if spec.mode == "by-patient":
        present = set(data.patient_ids)
        missing = [p for p in spec.targets if p not in present]
        if missing:
            raise DatasetError(f"unknown patient id(s) in forget spec: {', '.join(map(str, missing))}")
        wanted = set(spec.targets)
        return [p in wanted for p in data.patient_ids]
    names = class_names(data.task)
    idx = {class_index(c, data.task) for c in spec.targets}
    absent = [names[i] for i in sorted(idx) if not (data.labels == i).any()]
    if absent:
        raise DatasetError(f"forget class(es) absent from dataset: {', '.join(absent)}")
    return [int(y) in idx for y in data.labels]


def resolve_forget_set(data: SegmentSet, spec: ForgetSpec) -> ForgetSpec:
    """Materialize S and L (segment ids, dataset order) for ``spec``."""
    mask = _selected(data, spec)
    forget = tuple(i for i, m in zip(data.ids, mask) if m)
    retain = tuple(i for i, m in zip(data.ids, mask) if not m)
    if not retain:
        raise DatasetError("forget set covers the whole dataset; nothing to retain")
    return ForgetSpec(spec.mode, spec.targets, forget, retain)
