"""Forgetting routes (retain-set fine-tuning, gated knowledge transfer) and their audit."""
from .audit import (
    AUDIT_BINS,
    DEFAULT_DELTA,
    AuditReport,
    SplitAudit,
    audit_losses,
    audit_unlearning,
    common_histograms,
    epsilon_hat,
    ks_statistic,
)
from .config import UnlearnConfig
from .finetune import retrain_baseline, unlearn_finetune
from .forget import FORGET_MODES, ForgetSpec, resolve_forget_set
from .gkt import (
    FilterResult,
    Generator,
    GktLog,
    attention_loss,
    band_pass_filter,
    build_generator,
    gkt_unlearn,
    resolve_classes,
)
