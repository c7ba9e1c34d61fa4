"""Synthetic multi-lead ECG records.

Each beat is a sum of Gaussian bumps (P, Q, R, S, ST plateau, T, U) projected
onto the leads through a per-patient gain matrix. A patient keeps its heart
rate, wave amplitudes/widths and lead gains across all of its records, so
patient identity is learnable. Diagnostic classes perturb the morphology on
top of that: MI deepens Q and lifts ST, STTC depresses ST and inverts T, CD
widens QRS, HYP raises R and deepens S.

"Variant" patients are Normal but carry the repolarization pattern of STTC
(depressed ST, inverted T) plus a prominent U wave that no other patient
has. A population model reads them as abnormal; the U wave is the personal
signature that fine-tuning can latch onto without relabelling real STTC.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng
from .signal import SAMPLING_RATE, DiagnosticClass, EcgRecord

WAVES = ("P", "Q", "R", "S", "ST", "T", "U")
# offset from the R peak (s), width sigma (s), nominal amplitude (mV-like units)
_OFFSET = np.array([-0.17, -0.028, 0.0, 0.028, 0.13, 0.27, 0.43])
_WIDTH = np.array([0.022, 0.009, 0.011, 0.010, 0.045, 0.045, 0.03])
_AMP = np.array([0.15, -0.10, 1.0, -0.25, 0.0, 0.30, 0.0])
# inter-patient spread: amplitude/width jitter and per-lead gain noise
AMP_SPREAD = 0.2
WIDTH_SPREAD = 0.1
GAIN_SPREAD = 0.1
# variant patients: ST shift, T-wave factor and U-wave amplitude
VARIANT_ST = -0.18
VARIANT_T = -0.7
VARIANT_U = 0.7


@dataclass
class SynthConfig:
    n_patients: int = 40
    records_per_patient: int = 1
    class_mix: dict = field(default_factory=lambda: {"NORM": 0.5, "Abnormal": 0.5})
    n_leads: int = 12
    seed: int = 0
    noise_sigma: float = 0.05
    n_samples: int = 5000
    sampling_rate: float = SAMPLING_RATE
    variant_fraction: float = 0.0
    patient_prefix: str = "P"


def resolve_class_mix(mix: dict) -> dict[DiagnosticClass, float]:
    """Expand {"Normal"/"Abnormal"/superclass: weight} into per-superclass weights.

    "Abnormal" weight is split evenly over MI, STTC, CD and HYP.
    """
    out = {c: 0.0 for c in DiagnosticClass}
    total = 0.0
    for key, w in mix.items():
        w = float(w)
        if w < 0:
            raise ValueError(f"class_mix weight for {key!r} is negative")
        total += w
        if str(key).strip().lower() == "abnormal":
            for c in list(DiagnosticClass)[1:]:
                out[c] += w / 4
        else:
            out[DiagnosticClass.parse(str(key))] += w
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"class_mix must sum to 1 (got {total!r})")
    return out


def _base_gains(n_leads: int) -> np.ndarray:
    # Fixed population lead pattern (one angle per lead), shared by every dataset.
    angles = np.linspace(-np.pi / 2, np.pi, n_leads, endpoint=False)
    g = np.stack([np.cos(angles - a) for a in (0.6, 0.2, 0.0, -0.3, 0.1, 0.4, 0.4)], axis=1)
    return 0.4 + 0.6 * g


def _patient(rng, n_leads: int, variant: bool) -> dict:
    n = len(WAVES)
    amp = _AMP * rng.uniform(1 - AMP_SPREAD, 1 + AMP_SPREAD, size=n)
    if variant:
        amp[4] += VARIANT_ST
        amp[5] *= VARIANT_T
        amp[6] = VARIANT_U
    hr = rng.uniform(1.0, 1.5)
    width = _WIDTH * rng.uniform(1 - WIDTH_SPREAD, 1 + WIDTH_SPREAD, size=n)
    gain = _base_gains(n_leads) + GAIN_SPREAD * rng.standard_normal((n_leads, n))
    return {"hr": hr, "amp": amp, "width": width, "gain": gain, "wander": rng.uniform(0.02, 0.08)}


def _apply_class(p: dict, cls: DiagnosticClass):
    amp, width = p["amp"].copy(), p["width"].copy()
    if cls is DiagnosticClass.MI:
        amp[1] -= 0.35
        amp[4] += 0.25
    elif cls is DiagnosticClass.STTC:
        amp[4] -= 0.18
        amp[5] *= -0.7
    elif cls is DiagnosticClass.CD:
        width[1:4] *= 2.0
    elif cls is DiagnosticClass.HYP:
        amp[2] *= 1.8
        amp[3] *= 1.8
    return amp, width


def _render(rng, p: dict, cls: DiagnosticClass, cfg: SynthConfig) -> np.ndarray:
    fs = cfg.sampling_rate
    t = np.arange(cfg.n_samples) / fs
    amp, width = _apply_class(p, cls)
    rr = 1.0 / p["hr"]
    beats = []
    tb = rng.uniform(0.0, rr)
    while tb < t[-1] + 0.5:
        beats.append(tb)
        tb += rr * rng.uniform(0.97, 1.03)
    beats = np.array(beats)
    scale = rng.uniform(0.95, 1.05, size=(len(beats), 1))
    # [waves, samples]
    centers = beats[:, None] + _OFFSET[None, :]
    waves = np.zeros((len(WAVES), cfg.n_samples))
    for j in range(len(WAVES)):
        d = t[None, :] - centers[:, j:j + 1]
        waves[j] = (scale * amp[j] * np.exp(-0.5 * (d / width[j]) ** 2)).sum(axis=0)
    leads = p["gain"] @ waves
    phase = rng.uniform(0, 2 * np.pi)
    leads += p["wander"] * np.sin(2 * np.pi * 0.25 * t + phase)[None, :]
    leads += cfg.noise_sigma * rng.standard_normal(leads.shape)
    return leads


def synth_generate(cfg: SynthConfig) -> list[EcgRecord]:
    """Deterministic list of records (patient-major order) for ``cfg``."""
    if cfg.n_patients < 0 or cfg.records_per_patient < 0:
        raise ValueError("patient and record counts must be nonnegative")
    if not 0.0 <= cfg.variant_fraction <= 1.0:
        raise ValueError("variant_fraction must lie in [0, 1]")
    mix = resolve_class_mix(cfg.class_mix)
    classes = list(mix)
    probs = np.array([mix[c] for c in classes])
    rng = make_rng(cfg.seed)
    n_variant = int(round(cfg.variant_fraction * cfg.n_patients))
    variant = set(rng.permutation(cfg.n_patients)[:n_variant].tolist())
    records = []
    for i in range(cfg.n_patients):
        pid = f"{cfg.patient_prefix}{i:04d}"
        p = _patient(rng, cfg.n_leads, i in variant)
        for j in range(cfg.records_per_patient):
            cls = classes[int(rng.choice(len(classes), p=probs))]
            leads = _render(rng, p, cls, cfg)
            records.append(EcgRecord(pid, leads, cls, cfg.sampling_rate, f"{pid}_r{j:02d}"))
    return records
