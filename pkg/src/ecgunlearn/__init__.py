"""Personalized ECG classification, adversarial membership probing and machine unlearning.

Subpackages: ``autodiff`` (reverse-mode tensors), ``unlearning`` (fine-tune
and gated-knowledge-transfer routes plus the loss audit) and ``harness``
(config, pipeline, reports, CLI support).
"""
__version__ = "0.1.0"

from .adversary import AttackConfig, AttackResult, DiscrepancyReport, attack, probe_discrepancy
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import SegmentSet, build_segment_set, split_by_record
from .kernels import BACKEND
from .model import Model, ModelConfig, ModelError, build_model, evaluate, forward, predict
from .rng import derive_seed, make_rng
from .signal import DatasetError, DiagnosticClass, EcgRecord, Segment, load_dataset
from .synth import SynthConfig, synth_generate
from .training import Hyper, TrainLog, finetune_patient, train

__all__ = [
    "AttackConfig", "AttackResult", "BACKEND", "CheckpointError", "DatasetError",
    "DiagnosticClass", "DiscrepancyReport", "EcgRecord", "Hyper", "Model", "ModelConfig",
    "ModelError", "Segment", "SegmentSet", "SynthConfig", "TrainLog", "attack",
    "build_model", "build_segment_set", "derive_seed", "evaluate", "finetune_patient",
    "forward", "load_checkpoint", "load_dataset", "make_rng", "predict", "probe_discrepancy",
    "save_checkpoint", "split_by_record", "synth_generate", "train",
]
