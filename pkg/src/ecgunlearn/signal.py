"""ECG records: ingestion, validation, segmentation, filtering and spectra.

Dataset directory layout (read by ``load_dataset``, written by
``write_dataset``)::

    manifest.tsv      header + one row per record:
                      record_file  patient_id  label  sampling_rate
    <record_file>     headerless CSV, one row per lead, comma separated
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

SAMPLING_RATE = 500
RECORD_SAMPLES = 5000
SEGMENT_SAMPLES = 500
CLINICAL_LEADS = 12
BLANK_VARIANCE = 1e-10
DEFAULT_MA_WINDOW = 5
MANIFEST_COLUMNS = ("record_file", "patient_id", "label", "sampling_rate")


class DatasetError(ValueError):
    pass


class DiagnosticClass(enum.Enum):
    NORM = "NORM"
    MI = "MI"
    STTC = "STTC"
    CD = "CD"
    HYP = "HYP"

    @property
    def binary(self) -> "BinaryClass":
        return BinaryClass.NORMAL if self is DiagnosticClass.NORM else BinaryClass.ABNORMAL

    @classmethod
    def parse(cls, text: str) -> "DiagnosticClass":
        key = text.strip().upper()
        if key in ("NORMAL",):
            return cls.NORM
        try:
            return cls[key]
        except KeyError:
            raise DatasetError(f"unknown diagnostic class {text!r}") from None


class BinaryClass(enum.Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"


SUPERCLASSES = list(DiagnosticClass)
BINARY_CLASSES = list(BinaryClass)


def class_names(task: str) -> list[str]:
    if task == "binary":
        return [c.value for c in BINARY_CLASSES]
    if task == "superclass":
        return [c.value for c in SUPERCLASSES]
    raise ValueError(f"unknown task {task!r} (binary|superclass)")


def label_index(label: DiagnosticClass, task: str) -> int:
    if task == "binary":
        return BINARY_CLASSES.index(label.binary)
    if task == "superclass":
        return SUPERCLASSES.index(label)
    raise ValueError(f"unknown task {task!r} (binary|superclass)")


def class_index(name, task: str) -> int:
    """Index of a class given by name (case-insensitive) or by index."""
    names = class_names(task)
    if isinstance(name, (int, np.integer)):
        if not 0 <= name < len(names):
            raise DatasetError(f"class index {name} out of range for task {task!r}")
        return int(name)
    lowered = [n.lower() for n in names]
    key = str(name).strip().lower()
    if key == "normal" and task == "superclass":
        key = "norm"
    if key not in lowered:
        raise DatasetError(f"unknown class {name!r} for task {task!r} (have {', '.join(names)})")
    return lowered.index(key)


@dataclass
class EcgRecord:
    patient_id: str
    leads: np.ndarray
    label: DiagnosticClass
    sampling_rate: float = SAMPLING_RATE
    record_id: str = ""

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=np.float64)
        if self.leads.ndim != 2:
            raise DatasetError("leads must be a 2-D array [n_leads, n_samples]")
        if not self.sampling_rate > 0:
            raise DatasetError("sampling_rate must be positive")
        if not self.record_id:
            self.record_id = self.patient_id

    @property
    def n_leads(self) -> int:
        return self.leads.shape[0]

    @property
    def n_samples(self) -> int:
        return self.leads.shape[1]


@dataclass
class Segment:
    patient_id: str
    leads: np.ndarray
    label: DiagnosticClass
    record_id: str
    window: int
    sampling_rate: float = SAMPLING_RATE

    @property
    def segment_id(self) -> str:
        return f"{self.record_id}#{self.window}"

    def with_leads(self, leads: np.ndarray) -> "Segment":
        return Segment(self.patient_id, leads, self.label, self.record_id, self.window,
                       self.sampling_rate)


@dataclass
class Spectrum:
    freqs: np.ndarray
    magnitude: np.ndarray
    n_samples: int = 0
    coefficients: np.ndarray = field(default=None, repr=False)

    def energy(self) -> np.ndarray:
        """Per-lead time-domain energy recovered from the one-sided spectrum."""
        m2 = self.magnitude ** 2
        weights = np.full(m2.shape[-1], 2.0)
        weights[0] = 1.0
        if self.n_samples % 2 == 0:
            weights[-1] = 1.0
        return (m2 * weights).sum(axis=-1) / self.n_samples

    def peak_frequency(self, lead: int = 0, skip_dc: bool = True) -> float:
        mag = self.magnitude[lead]
        start = 1 if skip_dc else 0
        return float(self.freqs[start + int(np.argmax(mag[start:]))])


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""

    def __bool__(self):
        return self.ok


def validate_record(record) -> Validation:
    """Reject records with a non-finite sample or a blank (near-constant) lead."""
    leads = np.asarray(record.leads, dtype=np.float64)
    if not np.isfinite(leads).all():
        return Validation(False, "non-finite")
    var = leads.var(axis=1)
    blank = np.flatnonzero(var < BLANK_VARIANCE)
    if blank.size:
        return Validation(False, f"blank lead {int(blank[0])}")
    return Validation(True)


def segment_record(record: EcgRecord, length: int = SEGMENT_SAMPLES) -> list[Segment]:
    if record.n_samples % length:
        raise DatasetError(
            f"record {record.record_id}: {record.n_samples} samples is not a multiple of {length}")
    return [
        Segment(record.patient_id, record.leads[:, k * length:(k + 1) * length].copy(),
                record.label, record.record_id, k, record.sampling_rate)
        for k in range(record.n_samples // length)
    ]


def moving_average(x: np.ndarray, window: int = DEFAULT_MA_WINDOW) -> np.ndarray:
    """Uniform moving average along the last axis.

    Edges use half-sample symmetric reflection (``x[-1] = x[0]``), under
    which every sample enters exactly ``window`` windows, so each lead's
    mean is preserved.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("moving-average window must be a positive odd integer")
    x = np.asarray(x, dtype=np.float64)
    if window > x.shape[-1]:
        raise ValueError("moving-average window exceeds signal length")
    if window == 1:
        return x.copy()
    half = window // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    padded = np.pad(x, pad, mode="symmetric")
    return sliding_window_view(padded, window, axis=-1).sum(axis=-1) / window


def moving_average_filter(segment: Segment, window: int = DEFAULT_MA_WINDOW) -> Segment:
    return segment.with_leads(moving_average(segment.leads, window))


def fft_analyze(segment) -> Spectrum:
    """One-sided spectrum of a Segment or a [leads, samples] array (500 Hz assumed)."""
    leads = np.atleast_2d(np.asarray(getattr(segment, "leads", segment), dtype=np.float64))
    n = leads.shape[-1]
    if n < 2:
        raise ValueError("fft_analyze needs at least 2 samples per lead")
    fs = getattr(segment, "sampling_rate", SAMPLING_RATE)
    coef = np.fft.rfft(leads, axis=-1)
    return Spectrum(np.fft.rfftfreq(n, d=1.0 / fs), np.abs(coef), n, coef)


def zscore(x: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    std = np.maximum(x.std(axis=-1, keepdims=True), floor)
    return (x - mean) / std


def normalize_segment(segment: Segment) -> Segment:
    return segment.with_leads(zscore(segment.leads))


def preprocess_record(record: EcgRecord, window: int = DEFAULT_MA_WINDOW) -> list[Segment]:
    """Segment, denoise and z-score one validated record."""
    return [normalize_segment(moving_average_filter(s, window)) for s in segment_record(record)]


# dataset directory ----------------------------------------------------------------

def load_dataset(path, n_leads: int | None = CLINICAL_LEADS, strict: bool = True) -> list[EcgRecord]:
    """Read a dataset directory in manifest order.

    With ``strict=False`` malformed record files are logged (file + reason)
    and skipped instead of raising.
    """
    root = Path(path)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    records = []
    with manifest.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        return records
    header = tuple(c.strip() for c in rows[0])
    if header != MANIFEST_COLUMNS:
        raise DatasetError(f"{manifest}: expected columns {MANIFEST_COLUMNS}, got {header}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        try:
            records.append(_read_record(root, row, n_leads))
        except DatasetError as exc:
            if strict:
                raise
            log.warning("skipping manifest line %d: %s", lineno, exc)
    return records


def _read_record(root: Path, row, n_leads) -> EcgRecord:
    if len(row) != len(MANIFEST_COLUMNS):
        raise DatasetError(f"manifest row has {len(row)} columns: {row}")
    fname, patient, label, fs = (c.strip() for c in row)
    fpath = root / fname
    try:
        with fpath.open(newline="") as fh:
            leads = np.array([[float(v) for v in line] for line in csv.reader(fh) if line])
        rate = float(fs)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{fname}: unparseable record ({exc})") from None
    if leads.ndim != 2:
        raise DatasetError(f"{fname}: leads have unequal lengths")
    if n_leads is not None and leads.shape[0] != n_leads:
        raise DatasetError(f"{fname}: expected {n_leads} leads, found {leads.shape[0]}")
    return EcgRecord(patient, leads, DiagnosticClass.parse(label), rate, Path(fname).stem)


def write_dataset(records, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "manifest.tsv").open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for rec in records:
            fname = f"{rec.record_id}.csv"
            np.savetxt(root / fname, rec.leads, delimiter=",", fmt="%.17g")
            w.writerow((fname, rec.patient_id, rec.label.value, f"{rec.sampling_rate:g}"))
    return root
