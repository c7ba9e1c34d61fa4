"""Residual 1D CNN over [leads x samples] segments.

Layout: stem conv (stride 2) -> BN -> ReLU, then residual stages. Each block
is conv-BN-ReLU-conv-BN plus an identity shortcut (or a strided 1x1
projection + BN when the shape changes), followed by ReLU. The first block of
every stage after the first downsamples by 2. Global average pooling and a
linear head produce the logits.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    RunningStats,
    Tensor,
    add,
    batch_norm1d,
    conv1d,
    global_avg_pool,
    linear,
    no_grad,
    per_sample_cross_entropy,
    relu,
)
from .dataset import SegmentSet
from .rng import make_rng
from .signal import SEGMENT_SAMPLES, Segment, class_names

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
HEAD_INIT_STD = 0.01


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    stage_blocks: tuple = (1, 1, 1, 1)
    stage_channels: tuple = (8, 16, 32, 64)
    stem_kernel: int = 7
    block_kernel: int = 3
    n_classes: int = 2
    in_leads: int = 12
    input_length: int = SEGMENT_SAMPLES
    stem_stride: int = 2

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)

    def validate(self) -> None:
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise ModelError("stage_blocks and stage_channels must be non-empty and equally long")
        if any(b < 1 for b in self.stage_blocks):
            raise ModelError("every stage needs at least one block")
        if any(c < 1 for c in self.stage_channels):
            raise ModelError("channel counts must be positive")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ModelError("stage_channels must be strictly increasing")
        if self.stem_kernel < 1 or self.block_kernel < 1 or self.block_kernel % 2 == 0:
            raise ModelError("kernel widths must be positive (block kernel odd)")
        if self.n_classes < 2 or self.in_leads < 1 or self.stem_stride < 1:
            raise ModelError("need n_classes >= 2, in_leads >= 1, stem_stride >= 1")
        if self.input_length < self.stem_kernel:
            raise ModelError("input shorter than the stem kernel")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @property
    def stage_names(self) -> list[str]:
        return [f"stage{i + 1}" for i in range(len(self.stage_blocks))]


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)       # name -> Tensor
    stats: dict = field(default_factory=dict)        # bn name -> RunningStats
    training: bool = False

    def copy(self) -> "Model":
        params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        stats = {k: v.copy() for k, v in self.stats.items()}
        return Model(self.config, params, stats, self.training)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        """Digest over parameters and running statistics."""
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        for k in sorted(self.stats):
            h.update(k.encode())
            h.update(self.stats[k].mean.tobytes())
            h.update(self.stats[k].var.tobytes())
        return h.hexdigest()

    def default_freeze(self) -> tuple:
        """Everything except the last stage and the head."""
        return ("stem",) + tuple(self.config.stage_names[:-1])


def _block_specs(cfg: ModelConfig):
    """Yield (prefix, in_ch, out_ch, stride) for every residual block."""
    in_ch = cfg.stage_channels[0]
    for s, (nb, ch) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
        for b in range(nb):
            stride = 2 if (s > 0 and b == 0) else 1
            yield f"stage{s + 1}.block{b}", in_ch, ch, stride
            in_ch = ch


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """He-initialized model (conv weights ~ N(0, 2/fan_in)).

    The head starts small (std HEAD_INIT_STD) so an untrained model is close
    to uniform.
    """
    config.validate()
    rng = make_rng(seed)
    params, stats = {}, {}

    def conv(name, cout, cin, k):
        params[f"{name}.weight"] = rng.standard_normal((cout, cin, k)) * np.sqrt(2.0 / (cin * k))

    def bn(name, ch):
        params[f"{name}.gamma"] = np.ones(ch)
        params[f"{name}.beta"] = np.zeros(ch)
        stats[name] = RunningStats(ch, BN_MOMENTUM)

    c0 = config.stage_channels[0]
    conv("stem.conv", c0, config.in_leads, config.stem_kernel)
    bn("stem.bn", c0)
    for prefix, cin, cout, stride in _block_specs(config):
        conv(f"{prefix}.conv1", cout, cin, config.block_kernel)
        bn(f"{prefix}.bn1", cout)
        conv(f"{prefix}.conv2", cout, cout, config.block_kernel)
        bn(f"{prefix}.bn2", cout)
        if stride != 1 or cin != cout:
            conv(f"{prefix}.proj", cout, cin, 1)
            bn(f"{prefix}.proj_bn", cout)
    last = config.stage_channels[-1]
    params["head.weight"] = rng.standard_normal((config.n_classes, last)) * HEAD_INIT_STD
    params["head.bias"] = np.zeros(config.n_classes)
    return Model(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}, stats)


def matches(name: str, prefixes) -> bool:
    return any(name == p or name.startswith(p.rstrip(".") + ".") for p in prefixes)


def forward(model: Model, x, *, train: bool = False, param_grad: bool = True,
            frozen=(), return_acts: bool = False, bn_stats: bool = True):
    """Logits [batch, n_classes] (and per-stage activations if requested).

    ``param_grad=False`` keeps parameters off the tape (input-gradient use).
    Parameters under a ``frozen`` prefix are not recorded, and their
    batch-norm layers run in eval mode so running statistics stay fixed.
    ``bn_stats=False`` runs every batch-norm layer in eval mode (running
    statistics fixed, affine parameters still trainable).
    """
    cfg = model.config

    def p(name):
        t = model.params[name]
        if param_grad and not matches(name, frozen):
            return t
        return Tensor._wrap(t.data)

    def bn(h, name):
        # a layer whose scale is frozen also keeps its running statistics
        mode = "train" if (train and bn_stats and not matches(f"{name}.gamma", frozen)) else "eval"
        return batch_norm1d(h, p(f"{name}.gamma"), p(f"{name}.beta"), BN_EPS, mode, model.stats[name])

    k0 = cfg.stem_kernel
    h = conv1d(x, p("stem.conv.weight"), None, cfg.stem_stride, k0 // 2)
    h = relu(bn(h, "stem.bn"))
    acts = []
    pad = cfg.block_kernel // 2
    stage_ends = {}
    for prefix, cin, cout, stride in _block_specs(cfg):
        stage_ends[prefix.split(".")[0]] = prefix
    for prefix, cin, cout, stride in _block_specs(cfg):
        out = conv1d(h, p(f"{prefix}.conv1.weight"), None, stride, pad)
        out = relu(bn(out, f"{prefix}.bn1"))
        out = conv1d(out, p(f"{prefix}.conv2.weight"), None, 1, pad)
        out = bn(out, f"{prefix}.bn2")
        if f"{prefix}.proj.weight" in model.params:
            short = conv1d(h, p(f"{prefix}.proj.weight"), None, stride, 0)
            short = bn(short, f"{prefix}.proj_bn")
        else:
            short = h
        h = relu(add(out, short))
        if stage_ends[prefix.split(".")[0]] == prefix:
            acts.append(h)
    logits = linear(global_avg_pool(h), p("head.weight"), p("head.bias"))
    return (logits, acts) if return_acts else logits


def _as_batch(x, cfg: ModelConfig) -> np.ndarray:
    if isinstance(x, Segment):
        x = x.leads
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.in_leads, cfg.input_length):
        raise ModelError(f"segment shape {x.shape[1:]} does not match model input "
                         f"({cfg.in_leads}, {cfg.input_length})")
    return x


def logits_of(model: Model, x, batch_size: int = 128) -> np.ndarray:
    x = _as_batch(x, model.config)
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward(model, Tensor._wrap(x[i:i + batch_size])).data)
    return np.concatenate(out)


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(model: Model, segment) -> np.ndarray:
    """Class probabilities; a single segment gives [n_classes], a batch [n, n_classes]."""
    single = isinstance(segment, Segment) or np.ndim(getattr(segment, "data", segment)) == 2
    probs = softmax_np(logits_of(model, segment))
    return probs[0] if single else probs


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    losses: np.ndarray
    per_class_accuracy: dict
    predictions: np.ndarray
    probs: np.ndarray
    correct: np.ndarray


def evaluate(model: Model, data: SegmentSet) -> EvalResult:
    if len(data) == 0:
        raise ModelError("evaluate() on an empty dataset")
    z = logits_of(model, data.x)
    losses = per_sample_cross_entropy(z, data.labels)
    pred = z.argmax(axis=1)
    ok = pred == data.labels
    names = class_names(data.task)
    per_class = {}
    for c, name in enumerate(names):
        sel = data.labels == c
        per_class[name] = float(ok[sel].mean()) if sel.any() else float("nan")
    return EvalResult(float(ok.mean()), float(losses.mean()), losses, per_class, pred,
                      softmax_np(z), ok)
