"""Mini-batch SGD training and per-patient fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import SGD, backward, fresh_tape, softmax_cross_entropy
from .dataset import SegmentSet
from .model import Model, ModelError, evaluate, forward, matches
from .rng import make_rng

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")
REPLAY_SALT = 0x5EED


@dataclass
class Hyper:
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    freeze_spec: tuple | None = None
    lr_schedule: str = "cosine"
    bn_stats: bool = True     # False keeps batch-norm running statistics fixed

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` (cosine decays over the run)."""
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_spec"] = None if self.freeze_spec is None else list(self.freeze_spec)
        return d


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    seed: int = 0

    def column(self, key: str) -> list:
        return [e[key] for e in self.epochs]


def _check_labels(model: Model, data: SegmentSet) -> None:
    if len(data) and (data.labels.min() < 0 or data.labels.max() >= model.config.n_classes):
        raise ModelError(f"label out of range for a {model.config.n_classes}-class model")


def draw_replay(base: SegmentSet, replay: SegmentSet, rng, ratio: float = 1.0) -> SegmentSet:
    """Uniform replay sample of size round(ratio * len(base)), without replacement."""
    k = min(int(round(ratio * len(base))), len(replay))
    return replay.subset(np.sort(rng.choice(len(replay), size=k, replace=False)))


def train(model: Model, train_set: SegmentSet, val_set: SegmentSet | None, hyper: Hyper,
          observer=None, replay: SegmentSet | None = None,
          replay_ratio: float = 1.0) -> tuple[Model, TrainLog]:
    """Train a copy of ``model`` with softmax cross-entropy.

    Samples are reshuffled every epoch from a PCG64 stream seeded by
    ``hyper.seed``. ``observer``, if given, is called with the segment ids
    of every mini-batch before its gradient step. With ``replay``, every
    epoch also mixes in a fresh replay sample (``replay_ratio`` times the
    size of ``train_set``) drawn without replacement from a separate stream.
    """
    hyper.validate()
    if len(train_set) == 0:
        raise ModelError("empty training set")
    _check_labels(model, train_set)
    out = model.copy()
    history = TrainLog(hyper=hyper.to_dict(), seed=hyper.seed)
    if hyper.epochs == 0:
        return out, history

    frozen = tuple(hyper.freeze_spec or ())
    trainable = [p for name, p in out.params.items() if not matches(name, frozen)]
    if not trainable:
        raise ModelError("freeze_spec freezes every parameter")
    opt = SGD(trainable, hyper.lr, hyper.momentum)
    rng = make_rng(hyper.seed)
    replay_rng = make_rng(hyper.seed ^ REPLAY_SALT)
    base_set = train_set
    for epoch in range(hyper.epochs):
        train_set = base_set
        if replay is not None and len(replay):
            train_set = base_set.concat(draw_replay(base_set, replay, replay_rng, replay_ratio))
        n = len(train_set)
        order = rng.permutation(n)
        opt.lr = hyper.lr_at(epoch)
        loss_sum, hits = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            if observer is not None:
                observer([train_set.ids[i] for i in idx])
            labels = train_set.labels[idx]
            opt.zero_grad()
            with fresh_tape():
                logits = forward(out, train_set.x[idx], train=True, frozen=frozen,
                                 bn_stats=hyper.bn_stats)
                loss = softmax_cross_entropy(logits, labels)
                backward(loss)
            opt.step()
            loss_sum += loss.item() * len(idx)
            hits += int((logits.data.argmax(axis=1) == labels).sum())
        entry = {"epoch": epoch + 1, "train_loss": loss_sum / n, "train_acc": hits / n,
                 "val_loss": float("nan"), "val_acc": float("nan")}
        if val_set is not None and len(val_set):
            ev = evaluate(out, val_set)
            entry["val_loss"], entry["val_acc"] = ev.mean_loss, ev.accuracy
        history.epochs.append(entry)
        log.debug("epoch %d: %s", epoch + 1, entry)
    return out, history


def finetune_hyper(base: Hyper, lr_factor: float = 0.1, **overrides) -> Hyper:
    """Fine-tuning defaults derived from the base training run (lr x 0.1)."""
    return replace(base, lr=base.lr * lr_factor, **overrides)


def finetune_patient(base: Model, patient_segments: SegmentSet, hyper: Hyper,
                     replay: SegmentSet | None = None, observer=None,
                     replay_ratio: float = 1.0) -> Model:
    """Personalize ``base`` on one patient's segments.

    Parameters under ``hyper.freeze_spec`` (default: stem and every stage
    but the last) are left untouched. When ``replay`` is given, every epoch
    mixes in a fresh sample of it, by default as large as the patient set
    (see ``train``).
    """
    if len(patient_segments) == 0:
        raise ModelError("empty patient segment set")
    pids = set(patient_segments.patient_ids)
    if len(pids) != 1:
        raise ModelError(f"patient segments span {len(pids)} patients")
    freeze = base.default_freeze() if hyper.freeze_spec is None else tuple(hyper.freeze_spec)
    names = list(base.params)
    hit = [n for n in names if matches(n, freeze)]
    if freeze and not hit:
        log.warning("freeze_spec %s matches no parameter", freeze)
    if len(hit) == len(names):
        raise ModelError("freeze_spec freezes every parameter")
    model, _ = train(base, patient_segments, None, replace(hyper, freeze_spec=freeze), observer,
                     replay, replay_ratio)
    return model
