"""Zero-shot class unlearning by gated knowledge transfer.

A generator maps Gaussian noise to pseudo segments. Each round it first
ascends the teacher-student KL divergence (seeking inputs where the two
disagree), then the student descends KL plus beta times the attention loss,
but only on pseudo samples that pass the band-pass filter: a sample gets
through only if the teacher gives every forget class probability strictly
below epsilon_f. Nothing in this module reads real data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import (
    SGD,
    Tensor,
    add,
    attention_transfer,
    backward,
    conv1d,
    fresh_tape,
    kl_divergence,
    linear,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    softmax,
    tanh,
    upsample,
)
from ..model import Model, ModelConfig, ModelError, build_model, forward, logits_of, softmax_np
from ..rng import derive_seed, make_rng
from ..signal import class_index
from .config import UnlearnConfig

log = logging.getLogger(__name__)

GEN_KERNEL = 5
UPSAMPLE_STAGES = 2


def attention_loss(teacher_acts, student_acts) -> Tensor:
    """Sum over layers of ||a_t/||a_t|| - a_s/||a_s|| ||, a = channel sum of squared activations."""
    return attention_transfer(teacher_acts, student_acts)


# generator --------------------------------------------------------------------

@dataclass
class Generator:
    params: dict
    noise_dim: int
    channels: int
    out_leads: int
    out_length: int
    scale: float

    @property
    def base_length(self) -> int:
        return self.out_length // 2 ** UPSAMPLE_STAGES

    def __call__(self, z) -> Tensor:
        p = self.params
        pad = GEN_KERNEL // 2
        h = relu(linear(z, p["fc1.weight"], p["fc1.bias"]))
        h = relu(linear(h, p["fc2.weight"], p["fc2.bias"]))
        h = reshape(h, (h.shape[0], self.channels, self.base_length))
        h = relu(conv1d(upsample(h, 2), p["up1.weight"], p["up1.bias"], 1, pad))
        h = conv1d(upsample(h, 2), p["up2.weight"], p["up2.bias"], 1, pad)
        return scalar_mul(tanh(h), self.scale)

    def sample(self, rng, n: int) -> np.ndarray:
        with no_grad():
            return self(rng.standard_normal((n, self.noise_dim))).data


def build_generator(model_config: ModelConfig, config: UnlearnConfig, seed: int) -> Generator:
    """noise -> fc -> fc -> reshape [ch, len/4] -> (upsample x2, conv) x2 -> tanh * scale."""
    n_up = 2 ** UPSAMPLE_STAGES
    if model_config.input_length % n_up:
        raise ModelError(f"generator needs an input length divisible by {n_up}")
    rng = make_rng(seed)
    d, hdim, ch = config.noise_dim, config.generator_hidden, config.generator_channels
    base = model_config.input_length // n_up
    leads = model_config.in_leads

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    params = {
        "fc1.weight": he((hdim, d), d), "fc1.bias": np.zeros(hdim),
        "fc2.weight": he((ch * base, hdim), hdim), "fc2.bias": np.zeros(ch * base),
        "up1.weight": he((ch, ch, GEN_KERNEL), ch * GEN_KERNEL), "up1.bias": np.zeros(ch),
        "up2.weight": rng.standard_normal((leads, ch, GEN_KERNEL)) * np.sqrt(1.0 / (ch * GEN_KERNEL)),
        "up2.bias": np.zeros(leads),
    }
    params = {k: Tensor(v, requires_grad=True, name=f"generator.{k}") for k, v in params.items()}
    return Generator(params, d, ch, leads, model_config.input_length, config.generator_scale)


# filter -----------------------------------------------------------------------

@dataclass
class FilterResult:
    accepted: np.ndarray        # accepted pseudo samples, original order
    mask: np.ndarray            # per-sample acceptance
    teacher_probs: np.ndarray   # teacher probabilities for the whole batch

    @property
    def acceptance_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def _task_of(model: Model) -> str:
    return {2: "binary", 5: "superclass"}.get(model.config.n_classes, "")


def resolve_classes(model: Model, classes) -> tuple[int, ...]:
    """Forget classes given by index or (for the binary/superclass tasks) by name."""
    out = set()
    for c in classes:
        if isinstance(c, (int, np.integer)):
            if not 0 <= c < model.config.n_classes:
                raise ModelError(f"forget class index {c} out of range")
            out.add(int(c))
        else:
            task = _task_of(model)
            if not task:
                raise ModelError(f"class names need a binary or superclass model, got {c!r}")
            out.add(class_index(c, task))
    if not out:
        raise ModelError("empty forget class set")
    if len(out) == model.config.n_classes:
        raise ModelError("cannot forget every class")
    return tuple(sorted(out))


def band_pass_filter(pseudo_batch, teacher: Model, forget_classes, epsilon_f: float) -> FilterResult:
    """Keep the samples for which every forget-class teacher probability is < epsilon_f."""
    if not 0 < epsilon_f < 1:
        raise ValueError("epsilon_f must lie in (0, 1)")
    forget = resolve_classes(teacher, forget_classes)
    x = np.asarray(pseudo_batch.data if isinstance(pseudo_batch, Tensor) else pseudo_batch,
                   dtype=np.float64)
    probs = softmax_np(logits_of(teacher, x))
    mask = (probs[:, list(forget)] < epsilon_f).all(axis=1)
    return FilterResult(x[mask], mask, probs)


# distillation loop -------------------------------------------------------------

@dataclass
class GktLog:
    rounds: list = field(default_factory=list)   # dicts: round, kl_generator, kl_student, acceptance, epsilon_f
    events: list = field(default_factory=list)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rounds]


def gkt_unlearn(teacher: Model, config: UnlearnConfig, forget_classes) -> tuple[Model, GktLog]:
    """Distil ``teacher`` into a fresh student on filtered pseudo data only.

    Returns the student and a per-round log. If no pseudo sample passes the
    filter for ``starvation_rounds`` consecutive rounds, epsilon_f doubles
    (up to ``epsilon_f_cap``) and the event is logged.
    """
    config.validate()
    forget = resolve_classes(teacher, forget_classes)
    student = build_model(teacher.config, derive_seed(config.seed, "gkt.student"))
    gen = build_generator(teacher.config, config, derive_seed(config.seed, "gkt.generator"))
    history = GktLog()
    if config.rounds == 0:
        return student, history

    rng = make_rng(derive_seed(config.seed, "gkt.noise"))
    g_opt = SGD(gen.params.values(), config.generator_lr, config.momentum)
    s_opt = SGD(student.params.values(), config.student_lr, config.momentum)
    eps_f = config.epsilon_f
    starved = 0
    for r in range(config.rounds):
        kl_gen = float("nan")
        for _ in range(config.generator_steps):
            g_opt.zero_grad()
            with fresh_tape():
                x = gen(rng.standard_normal((config.pseudo_batch, config.noise_dim)))
                t = softmax(forward(teacher, x, param_grad=False))
                s = softmax(forward(student, x, param_grad=False))
                kl = kl_divergence(t, s)
                backward(scalar_mul(kl, -1.0))
            g_opt.step()
            kl_gen = kl.item()

        accepted, seen, kl_sum, steps = 0, 0, 0.0, 0
        for _ in range(config.student_steps):
            filt = band_pass_filter(gen.sample(rng, config.pseudo_batch), teacher, forget, eps_f)
            seen += filt.mask.size
            accepted += int(filt.mask.sum())
            if len(filt.accepted) < 2:
                continue    # batch-norm statistics need at least two samples
            with no_grad():
                _, t_acts = forward(teacher, Tensor._wrap(filt.accepted), return_acts=True)
            t_probs = Tensor._wrap(filt.teacher_probs[filt.mask])
            s_opt.zero_grad()
            with fresh_tape():
                logits, s_acts = forward(student, filt.accepted, train=True, return_acts=True)
                kl = kl_divergence(t_probs, softmax(logits))
                loss = add(kl, scalar_mul(attention_loss(t_acts, s_acts), config.beta))
                backward(loss)
            s_opt.step()
            kl_sum += kl.item()
            steps += 1

        history.rounds.append({"round": r + 1, "kl_generator": kl_gen,
                               "kl_student": kl_sum / steps if steps else float("nan"),
                               "acceptance": accepted / seen, "epsilon_f": eps_f})
        starved = starved + 1 if accepted == 0 else 0
        if starved:
            log.debug("gkt round %d: filter accepted no pseudo sample", r + 1)
        if starved >= config.starvation_rounds:
            new = min(2 * eps_f, config.epsilon_f_cap)
            event = "epsilon_f escalation" if new > eps_f else "starved at epsilon_f cap"
            history.events.append({"round": r + 1, "event": event, "from": eps_f, "to": new})
            log.warning("gkt: filter starved for %d rounds (%s, epsilon_f %g -> %g)",
                        starved, event, eps_f, new)
            eps_f, starved = new, 0
    return student, history
