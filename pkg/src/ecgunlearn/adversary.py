"""FGSM-family attacks and the generalized-vs-personalized discrepancy probe.

Attacks run batched: the loss is the summed cross-entropy, so each sample's
input gradient is independent of the rest of the batch (models are always
queried in eval mode). Parameters never enter the tape.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AutodiffError, Tensor, backward, fresh_tape, softmax_cross_entropy
from .autodiff.ops import per_sample_cross_entropy
from .dataset import SegmentSet
from .model import Model, ModelError, logits_of, forward

LABEL_SOURCES = ("true", "prediction")

PHYSICAL_RANGE = (-6.0, 6.0)


@dataclass
class AttackConfig:
    epsilon: float = 0.02
    iterations: int = 5
    alpha: float | None = 0.08
    label_source: str = "true"
    # physical range of z-scored signals; applied by the clipped attack only
    physical_range: tuple | None = PHYSICAL_RANGE

    def validate(self) -> None:
        if not self.epsilon >= 0:
            raise ValueError("AttackConfig: epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("AttackConfig: iterations M must be >= 1")
        if self.alpha is not None and not self.alpha >= 0:
            raise ValueError("AttackConfig: alpha must be >= 0")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"AttackConfig: label_source must be one of {LABEL_SOURCES}")


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray
    losses: list            # per-iteration mean loss of the current iterate (before its step)
    final_loss: np.ndarray  # per-sample loss of the returned iterate
    predictions: np.ndarray

    @property
    def linf(self) -> np.ndarray:
        d = np.abs(self.adversarial - self.original)
        return d.reshape(len(d), -1).max(axis=1)


def _batch(E) -> tuple[np.ndarray, bool]:
    arr = np.asarray(E.data if isinstance(E, Tensor) else E, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    return arr, False


def _labels(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 1 and n > 1:
        y = np.repeat(y, n)
    if y.size != n:
        raise ValueError("one label per segment required")
    return y


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d(sum of per-sample CE)/dx and the per-sample losses at x."""
    with fresh_tape():
        xt = Tensor(x, requires_grad=True)
        logits = forward(model, xt, train=False, param_grad=False)
        loss = softmax_cross_entropy(logits, y, reduction="sum")
        backward(loss)
    if not np.isfinite(xt.grad).all():
        raise AutodiffError("non-finite input gradient")
    return xt.grad, per_sample_cross_entropy(logits.data, y)


def _step(model, x, y, epsilon):
    g, losses = input_gradient(model, x, y)
    return x + epsilon * np.sign(g), losses


def fgsm_step(model: Model, E, y, epsilon: float) -> np.ndarray:
    """E + epsilon * sign(grad_E L(E, y)). Accepts one segment or a batch."""
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    x, single = _batch(E)
    y = _labels(y, len(x))
    if epsilon == 0:
        return x[0].copy() if single else x.copy()
    adv, _ = _step(model, x, y, epsilon)
    return adv[0] if single else adv


def _iterate(model, E, y, epsilon, M, band=None) -> AttackResult:
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    if M < 1:
        raise ValueError("iterations M must be >= 1")
    x0, _ = _batch(E)
    y = _labels(y, len(x0))
    x = x0.copy()
    losses = []
    for _ in range(M):
        x, step_losses = _step(model, x, y, epsilon)
        losses.append(float(step_losses.mean()))
        if band is not None:
            x = np.clip(x, band[0], band[1])
    z = logits_of(model, x)
    return AttackResult(x0, x, losses, per_sample_cross_entropy(z, y), z.argmax(axis=1))


def ifgsm(model: Model, E, y, epsilon: float, M: int) -> AttackResult:
    """M iterated FGSM steps from E."""
    return _iterate(model, E, y, epsilon, M)


def clip_band(E: np.ndarray, alpha: float, physical_range=None) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise bounds [E - alpha, E + alpha], optionally intersected with a
    physical range widened so the original signal always stays feasible."""
    lo, hi = E - alpha, E + alpha
    if physical_range is not None:
        plo, phi = physical_range
        lo = np.maximum(lo, np.minimum(plo, E))
        hi = np.minimum(hi, np.maximum(phi, E))
    return lo, hi


def clipped_ifgsm(model: Model, E, y, epsilon: float, M: int, alpha: float,
                  physical_range=None) -> AttackResult:
    """Iterated FGSM with every iterate clamped into the alpha-band around E."""
    if not alpha >= 0:
        raise ValueError("alpha must be >= 0")
    x0, _ = _batch(E)
    return _iterate(model, x0, y, epsilon, M, band=clip_band(x0, alpha, physical_range))


def attack(model: Model, E, y, cfg: AttackConfig) -> AttackResult:
    """Run the attack described by ``cfg`` (clipped when alpha is set)."""
    cfg.validate()
    x0, _ = _batch(E)
    if cfg.label_source == "prediction":
        y = logits_of(model, x0).argmax(axis=1)
    if cfg.alpha is None:
        return ifgsm(model, x0, y, cfg.epsilon, cfg.iterations)
    return clipped_ifgsm(model, x0, y, cfg.epsilon, cfg.iterations, cfg.alpha, cfg.physical_range)


# discrepancy probe ----------------------------------------------------------------

@dataclass
class DiscrepancyReport:
    sample_ids: list
    patient_ids: list
    correct_gen: np.ndarray
    correct_ft: np.ndarray
    acc_gen: float = 0.0
    acc_ft: float = 0.0
    delta_acc: float = 0.0
    extracted: list = field(default_factory=list)

    @property
    def extracted_mask(self) -> np.ndarray:
        return self.correct_ft & ~self.correct_gen

    def extraction_rate(self, patient_id: str, member: bool = True) -> float:
        """Fraction of ``patient_id``'s samples (or, with member=False, of all
        other samples) that were extracted."""
        sel = np.array([(p == patient_id) == member for p in self.patient_ids])
        if not sel.any():
            return float("nan")
        return float(self.extracted_mask[sel].mean())

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ext = self.extracted_mask
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "patient_id", "correct_gen", "correct_ft", "extracted"])
            for i, sid in enumerate(self.sample_ids):
                w.writerow([sid, self.patient_ids[i], int(self.correct_gen[i]),
                            int(self.correct_ft[i]), int(ext[i])])
        return path

    @classmethod
    def from_csv(cls, path) -> "DiscrepancyReport":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return _report([r["sample_id"] for r in rows], [r["patient_id"] for r in rows],
                       np.array([r["correct_gen"] == "1" for r in rows]),
                       np.array([r["correct_ft"] == "1" for r in rows]))


def _report(ids, pids, cg, cf) -> DiscrepancyReport:
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ids = [ids[i] for i in order]
    pids = [pids[i] for i in order]
    cg, cf = np.asarray(cg, bool)[order], np.asarray(cf, bool)[order]
    acc_gen, acc_ft = float(cg.mean()), float(cf.mean())
    extracted = [s for s, e in zip(ids, cf & ~cg) if e]
    return DiscrepancyReport(ids, pids, cg, cf, acc_gen, acc_ft, acc_ft - acc_gen, extracted)


def probe_discrepancy(m_gen: Model, m_ft: Model, dataset: SegmentSet,
                      cfg: AttackConfig, batch_size: int = 64) -> DiscrepancyReport:
    """Attack ``m_gen`` on every sample, then score both models on the result.

    A sample is extracted when the personalized model stays correct while
    the generalized model fails. Rows are sorted by sample id.
    """
    if len(dataset) == 0:
        raise ModelError("probe on an empty dataset")
    a, b = m_gen.config, m_ft.config
    if (a.in_leads, a.input_length, a.n_classes) != (b.in_leads, b.input_length, b.n_classes):
        raise ModelError("models disagree on input shape or class count")
    cfg.validate()
    cg, cf = [], []
    for i in range(0, len(dataset), batch_size):
        sl = slice(i, i + batch_size)
        y = dataset.labels[sl]
        res = attack(m_gen, dataset.x[sl], y, cfg)
        cg.append(res.predictions == y)
        cf.append(logits_of(m_ft, res.adversarial).argmax(axis=1) == y)
    return _report(list(dataset.ids), list(dataset.patient_ids),
                   np.concatenate(cg), np.concatenate(cf))
