"""Unlearning by continued training on the retain set, and the retrained baseline."""
from __future__ import annotations

from ..dataset import SegmentSet
from ..model import Model, ModelConfig, ModelError, build_model
from ..training import Hyper, TrainLog, train
from .config import UnlearnConfig
from .forget import ForgetSpec, resolve_forget_set


def unlearn_finetune(model: Model, retain: SegmentSet, config: UnlearnConfig,
                     observer=None) -> Model:
    """U = A(D) fine-tuned on L: every parameter keeps training on ``retain`` only.

    ``model`` is not modified. ``observer`` sees the segment ids of every
    mini-batch (the loader never touches anything outside ``retain``).
    """
    config.validate()
    if len(retain) == 0:
        raise ModelError("empty retain set")
    hyper = Hyper(lr=config.lr, momentum=config.momentum, epochs=config.epochs,
                  batch_size=config.batch_size, seed=config.seed, freeze_spec=())
    unlearned, _ = train(model, retain, None, hyper, observer)
    return unlearned


def retrain_baseline(data: SegmentSet, spec: ForgetSpec, model_config: ModelConfig,
                     hyper: Hyper, init_seed: int, val: SegmentSet | None = None,
                     observer=None) -> tuple[Model, TrainLog]:
    """A(D minus S): the ordinary training procedure on L from a fresh seeded init."""
    if not spec.resolved:
        spec = resolve_forget_set(data, spec)
    _, retain = spec.split(data)
    if len(retain) == 0:
        raise ModelError("empty retain set")
    return train(build_model(model_config, init_seed), retain, val, hyper, observer)
