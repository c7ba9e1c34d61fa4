"""Empirical (epsilon, delta) audit: compare per-sample loss distributions of two models."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import SegmentSet
from ..model import Model, ModelError, evaluate

AUDIT_BINS = 20
DEFAULT_DELTA = 0.01


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_statistic needs two non-empty samples")
    # Both ECDFs are right-continuous step functions, so the supremum is
    # attained at one of the pooled sample points.
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.abs(fa - fb).max())


def common_histograms(a, b, bins: int = AUDIT_BINS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of ``a`` and ``b`` on one shared set of equal-width bins over the pooled range."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    pooled = np.concatenate([a, b])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return np.histogram(a, edges)[0], np.histogram(b, edges)[0], edges


def epsilon_hat(a, b, bins: int = AUDIT_BINS) -> float:
    """max over bins of |log(p_a / p_b)| with add-one smoothed bin probabilities."""
    ca, cb, _ = common_histograms(a, b, bins)
    pa = (ca + 1.0) / (ca.sum() + bins)
    pb = (cb + 1.0) / (cb.sum() + bins)
    return float(np.abs(np.log(pa) - np.log(pb)).max())


@dataclass
class SplitAudit:
    ids: list
    losses_a: np.ndarray
    losses_b: np.ndarray
    ks: float
    epsilon_hat: float

    @property
    def mean_a(self) -> float:
        return float(self.losses_a.mean())

    @property
    def mean_b(self) -> float:
        return float(self.losses_b.mean())

    @property
    def mean_gap(self) -> float:
        return self.mean_a - self.mean_b


@dataclass
class AuditReport:
    splits: dict = field(default_factory=dict)   # split name -> SplitAudit
    labels: tuple = ("unlearned", "baseline")
    delta: float = DEFAULT_DELTA
    bins: int = AUDIT_BINS

    def summary_rows(self) -> list[dict]:
        return [{"split": name, "ks": s.ks, "epsilon_hat": s.epsilon_hat,
                 f"mean_loss_{self.labels[0]}": s.mean_a, f"mean_loss_{self.labels[1]}": s.mean_b,
                 "mean_gap": s.mean_gap, "delta": self.delta, "n": len(s.ids)}
                for name, s in self.splits.items()]

    def to_csv(self, losses_path, summary_path=None) -> list[Path]:
        losses_path = Path(losses_path)
        losses_path.parent.mkdir(parents=True, exist_ok=True)
        with losses_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "model", "sample_id", "loss"])
            for name, s in self.splits.items():
                for label, losses in zip(self.labels, (s.losses_a, s.losses_b)):
                    for sid, v in zip(s.ids, losses):
                        w.writerow([name, label, sid, repr(float(v))])
        out = [losses_path]
        if summary_path is not None:
            rows = self.summary_rows()
            summary_path = Path(summary_path)
            with summary_path.open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["split"],
                                   lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
            out.append(summary_path)
        return out


def audit_losses(losses: dict, labels=("unlearned", "baseline"),
                 delta: float = DEFAULT_DELTA, bins: int = AUDIT_BINS) -> AuditReport:
    """Audit from precomputed {split: (ids, losses_a, losses_b)}."""
    report = AuditReport(labels=tuple(labels), delta=delta, bins=bins)
    for name, (ids, la, lb) in losses.items():
        la, lb = np.asarray(la, dtype=np.float64), np.asarray(lb, dtype=np.float64)
        if la.size == 0 or lb.size == 0:
            raise ModelError(f"audit split {name!r} is empty")
        report.splits[name] = SplitAudit(list(ids), la, lb, ks_statistic(la, lb), epsilon_hat(la, lb, bins))
    return report


def audit_unlearning(unlearned: Model, baseline: Model, splits: dict,
                     labels=("unlearned", "baseline"), delta: float = DEFAULT_DELTA,
                     bins: int = AUDIT_BINS) -> AuditReport:
    """Per-sample loss audit of ``unlearned`` against ``baseline`` on each named split."""
    if unlearned.config != baseline.config:
        raise ModelError("audited models have different configurations")
    losses = {}
    for name, data in splits.items():
        if not isinstance(data, SegmentSet) or len(data) == 0:
            raise ModelError(f"audit split {name!r} is empty")
        losses[name] = (data.ids, evaluate(unlearned, data).losses, evaluate(baseline, data).losses)
    return audit_losses(losses, labels, delta, bins)
