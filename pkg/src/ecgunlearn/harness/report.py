"""CSV tables and self-contained SVG figures.

Every figure is drawn from numbers that are also written to a CSV. SVG
output uses fixed-precision coordinates so identical inputs give identical
bytes. Histogram bars carry ``data-series``/``data-count`` attributes, which
lets tests recount them against the loss CSV.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..unlearning.audit import AUDIT_BINS, AuditReport

CURVE_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
SUMMARY_COLUMNS = ("model", "patient_heldout_acc", "general_test_acc", "combined_test_acc",
                   "forget_class_acc", "retain_class_acc")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")

W, H = 640, 400
MARGIN = (60, 20, 30, 50)   # left, right, top, bottom


def _num(v) -> str:
    """CSV cell: shortest round-trip repr for floats, blank for NaN."""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            values = [r.get(c, "") for c in columns] if isinstance(r, dict) else list(r)
            w.writerow([_num(v) for v in values])
    return path


# svg primitives -------------------------------------------------------------------

def _f(x: float) -> str:
    return f"{x:.2f}"


class _Frame:
    """Maps data coordinates into one plotting rectangle."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = _pad_limits(*xlim)
        self.ylim = _pad_limits(*ylim)

    def x(self, v):
        lo, hi = self.xlim
        return self.x0 + (v - lo) / (hi - lo) * self.w

    def y(self, v):
        lo, hi = self.ylim
        return self.y0 + self.h - (v - lo) / (hi - lo) * self.h

    def axes(self, title, xlabel, ylabel) -> list[str]:
        x0, y0, w, h = self.x0, self.y0, self.w, self.h
        out = [f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" '
               f'fill="none" stroke="#444"/>',
               f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 - 8)}" text-anchor="middle" '
               f'font-size="13">{escape(title)}</text>',
               f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 + h + 34)}" text-anchor="middle" '
               f'font-size="11">{escape(xlabel)}</text>',
               f'<text x="{_f(x0 - 44)}" y="{_f(y0 + h / 2)}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 {_f(x0 - 44)} {_f(y0 + h / 2)})">{escape(ylabel)}</text>']
        for lim, axis in ((self.xlim, "x"), (self.ylim, "y")):
            for v in np.linspace(lim[0], lim[1], 5):
                if axis == "x":
                    out.append(f'<text x="{_f(self.x(v))}" y="{_f(y0 + h + 14)}" '
                               f'text-anchor="middle" font-size="9">{v:.3g}</text>')
                else:
                    out.append(f'<text x="{_f(x0 - 4)}" y="{_f(self.y(v) + 3)}" '
                               f'text-anchor="end" font-size="9">{v:.3g}</text>')
        return out


def _pad_limits(lo, hi):
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    if hi <= lo:
        return lo - 0.5, hi + 0.5
    return lo, hi


def _finite(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    return v[np.isfinite(v)]


def _document(parts: list[str], width=W, height=H) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>'] + parts + ["</svg>", ""])


def _legend(names, x, y) -> list[str]:
    out = []
    for i, name in enumerate(names):
        c = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{_f(x)}" y="{_f(y + 14 * i)}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{_f(x + 14)}" y="{_f(y + 14 * i + 9)}" font-size="10">{escape(name)}</text>')
    return out


def _polyline(frame, xs, ys, color) -> str:
    pts = " ".join(f"{_f(frame.x(a))},{_f(frame.y(b))}" for a, b in zip(xs, ys)
                   if math.isfinite(a) and math.isfinite(b))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str) -> str:
    """``series``: name -> (x values, y values)."""
    xs = _finite(np.concatenate([np.asarray(v[0], float) for v in series.values()])) if series else []
    ys = _finite(np.concatenate([np.asarray(v[1], float) for v in series.values()])) if series else []
    left, right, top, bottom = MARGIN
    frame = _Frame(left, top, W - left - right, H - top - bottom,
                   (min(xs), max(xs)) if len(xs) else (0, 1), (min(ys), max(ys)) if len(ys) else (0, 1))
    parts = frame.axes(title, xlabel, ylabel)
    for i, (name, (x, y)) in enumerate(series.items()):
        parts.append(_polyline(frame, x, y, PALETTE[i % len(PALETTE)]))
    parts += _legend(list(series), frame.x0 + frame.w - 130, frame.y0 + 8)
    return _document(parts)


def histogram_counts(samples: dict, bins: int = AUDIT_BINS) -> tuple[np.ndarray, dict]:
    """Shared equal-width bin edges over the pooled range and per-series counts."""
    pooled = np.concatenate([np.asarray(v, float).ravel() for v in samples.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return edges, {k: np.histogram(np.asarray(v, float), edges)[0] for k, v in samples.items()}


def histogram_svg(samples: dict, title: str, xlabel: str = "per-sample loss",
                  bins: int = AUDIT_BINS) -> str:
    """Overlaid histograms of several samples on common bins."""
    edges, counts = histogram_counts(samples, bins)
    top_count = max(int(c.max()) for c in counts.values())
    left, right, top, bottom = MARGIN
    frame = _Frame(left, top, W - left - right, H - top - bottom, (edges[0], edges[-1]), (0, top_count))
    parts = frame.axes(title, xlabel, "count")
    k = len(counts)
    for i, (name, c) in enumerate(counts.items()):
        color = PALETTE[i % len(PALETTE)]
        for b in range(bins):
            x_lo, x_hi = frame.x(edges[b]), frame.x(edges[b + 1])
            bw = (x_hi - x_lo) / k
            y = frame.y(c[b])
            parts.append(f'<rect class="bar" data-series="{escape(name)}" data-bin="{b}" '
                         f'data-count="{int(c[b])}" x="{_f(x_lo + i * bw)}" y="{_f(y)}" '
                         f'width="{_f(bw)}" height="{_f(frame.y0 + frame.h - y)}" '
                         f'fill="{color}" fill-opacity="0.7"/>')
    parts += _legend(list(counts), frame.x0 + frame.w - 130, frame.y0 + 8)
    return _document(parts)


def waveform_svg(t, original, perturbed, freqs, mag_original, mag_perturbed, title: str) -> str:
    """Two panels: time-domain original vs perturbed lead, and their magnitude spectra."""
    left, right, top, bottom = MARGIN
    h = (H * 2 - top - 2 * bottom - 40) / 2
    w = W - left - right
    ys = _finite(np.concatenate([original, perturbed]))
    f1 = _Frame(left, top, w, h, (t[0], t[-1]), (ys.min(), ys.max()))
    parts = f1.axes(title, "time (s)", "amplitude")
    parts.append(_polyline(f1, t, original, PALETTE[0]))
    parts.append(_polyline(f1, t, perturbed, PALETTE[1]))
    parts += _legend(["original", "perturbed"], left + w - 110, top + 8)
    ms = _finite(np.concatenate([mag_original, mag_perturbed]))
    f2 = _Frame(left, top + h + bottom + 40, w, h, (freqs[0], freqs[-1]), (0, ms.max()))
    parts += f2.axes("magnitude spectrum", "frequency (Hz)", "|X(f)|")
    parts.append(_polyline(f2, freqs, mag_original, PALETTE[0]))
    parts.append(_polyline(f2, freqs, mag_perturbed, PALETTE[1]))
    return _document(parts, W, H * 2)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="\n") as fh:
        fh.write(text)
    return path


# report ---------------------------------------------------------------------------

@dataclass
class ReportMetrics:
    curves: list = field(default_factory=list)      # TrainLog.epochs entries
    summary: list = field(default_factory=list)     # dicts keyed by SUMMARY_COLUMNS
    audits: dict = field(default_factory=dict)      # name -> AuditReport
    histograms: dict = field(default_factory=dict)  # figure name -> {series: losses}
    waveform: dict | None = None                    # t, original, perturbed, freqs, mag_original, mag_perturbed
    gkt_rounds: list = field(default_factory=list)


FIGURES = ("curves", "histograms", "waveform", "gkt")


def emit_report(metrics: ReportMetrics, out_dir, figures=FIGURES) -> list[Path]:
    """Write CSV tables and the requested SVG figures; returns the paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"report directory {out} is not writable: {exc}") from None
    written = [write_csv(out / "curves.csv", CURVE_COLUMNS, metrics.curves)]
    if metrics.summary:
        written.append(write_csv(out / "summary.csv", SUMMARY_COLUMNS, metrics.summary))
    for name, report in metrics.audits.items():
        written += report.to_csv(out / f"audit_{name}_losses.csv", out / f"audit_{name}_summary.csv")

    if "curves" in figures and metrics.curves:
        ep = [e["epoch"] for e in metrics.curves]
        col = lambda k: [e[k] for e in metrics.curves]  # noqa: E731
        written.append(write_text(out / "loss_curve.svg", line_chart_svg(
            {"train": (ep, col("train_loss")), "validation": (ep, col("val_loss"))},
            "Loss per epoch", "epoch", "cross-entropy")))
        written.append(write_text(out / "accuracy_curve.svg", line_chart_svg(
            {"train": (ep, col("train_acc")), "validation": (ep, col("val_acc"))},
            "Accuracy per epoch", "epoch", "accuracy")))
    if "histograms" in figures:
        for name, samples in metrics.histograms.items():
            written.append(write_text(out / f"hist_{name}.svg",
                                      histogram_svg(samples, name.replace("_", " "))))
    if "waveform" in figures and metrics.waveform is not None:
        wv = metrics.waveform
        written.append(write_csv(out / "waveform.csv", ("time_s", "original", "perturbed"),
                                 list(zip(wv["t"], wv["original"], wv["perturbed"]))))
        written.append(write_csv(out / "spectrum.csv", ("freq_hz", "original_mag", "perturbed_mag"),
                                 list(zip(wv["freqs"], wv["mag_original"], wv["mag_perturbed"]))))
        written.append(write_text(out / "waveform.svg", waveform_svg(
            wv["t"], wv["original"], wv["perturbed"], wv["freqs"], wv["mag_original"],
            wv["mag_perturbed"], "Original vs perturbed segment (lead 1)")))
    if "gkt" in figures and metrics.gkt_rounds:
        written.append(write_csv(out / "gkt_rounds.csv",
                                 ("round", "kl_generator", "kl_student", "acceptance", "epsilon_f"),
                                 metrics.gkt_rounds))
        r = [e["round"] for e in metrics.gkt_rounds]
        written.append(write_text(out / "gkt_acceptance.svg", line_chart_svg(
            {"acceptance": (r, [e["acceptance"] for e in metrics.gkt_rounds])},
            "Band-pass filter acceptance per round", "round", "acceptance rate")))
    return written
