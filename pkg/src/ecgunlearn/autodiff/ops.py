"""Differentiable primitives.

Each primitive is a ``forward(arrays, attrs) -> (out, ctx)`` and
``backward(ctx, grad_out, attrs) -> tuple of input grads`` pair registered
under its kind name. The public functions below validate arguments, run the
forward pass and record the application on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from .tensor import Tensor, check_finite, record

KL_FLOOR = 1e-12
ROW_SUM_TOL = 1e-9


@dataclass
class Primitive:
    forward: callable
    backward: callable


PRIMITIVES: dict[str, Primitive] = {}


def primitive(kind):
    def deco(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, cls.backward)
        return cls
    return deco


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(kind: str, inputs: tuple, attrs: dict) -> Tensor:
    arrays = [None if t is None else t.data for t in inputs]
    out, ctx = PRIMITIVES[kind].forward(arrays, attrs)
    check_finite(out, f"output of {kind}")
    return record(kind, inputs, attrs, out, ctx)


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Generic entry point: run primitive ``kind`` on ``inputs``."""
    fn = _WRAPPERS.get(kind)
    if fn is None:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return fn(*inputs, **attrs)


# elementwise ------------------------------------------------------------------

@primitive("relu")
class _Relu:
    @staticmethod
    def forward(a, attrs):
        x, = a
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    @staticmethod
    def backward(mask, g, attrs):
        return (g * mask,)


def relu(x) -> Tensor:
    return _apply("relu", (_as_tensor(x),), {})


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(a, attrs):
        y = np.tanh(a[0])
        return y, y

    @staticmethod
    def backward(y, g, attrs):
        return (g * (1.0 - y * y),)


def tanh(x) -> Tensor:
    return _apply("tanh", (_as_tensor(x),), {})


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, attrs):
        return a[0] + a[1], None

    @staticmethod
    def backward(ctx, g, attrs):
        return g, g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _apply("add", (a, b), {})


@primitive("scalar_mul")
class _ScalarMul:
    @staticmethod
    def forward(a, attrs):
        return a[0] * attrs["c"], None

    @staticmethod
    def backward(ctx, g, attrs):
        return (g * attrs["c"],)


def scalar_mul(x, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise ValueError("scalar_mul: non-finite scalar")
    return _apply("scalar_mul", (_as_tensor(x),), {"c": c})


@primitive("clamp")
class _Clamp:
    @staticmethod
    def forward(a, attrs):
        x = a[0]
        lo, hi = attrs["lo"], attrs["hi"]
        inside = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi), inside

    @staticmethod
    def backward(inside, g, attrs):
        return (g * inside,)


def clamp(x, lo, hi) -> Tensor:
    """Elementwise clamp into [lo, hi]; bounds may be scalars or arrays."""
    x = _as_tensor(x)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), x.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), x.shape)
    if np.any(lo > hi):
        raise ValueError("clamp: lower bound exceeds upper bound")
    return _apply("clamp", (x,), {"lo": lo, "hi": hi})


@primitive("sign")
class _Sign:
    @staticmethod
    def forward(a, attrs):
        # np.sign gives sign(0) == 0
        return np.sign(a[0]), None

    @staticmethod
    def backward(ctx, g, attrs):
        return (np.zeros_like(g),)


def sign(x) -> Tensor:
    return _apply("sign", (_as_tensor(x),), {})


# shape ------------------------------------------------------------------------

@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(a, attrs):
        return a[0].reshape(attrs["shape"]), a[0].shape

    @staticmethod
    def backward(shape, g, attrs):
        return (g.reshape(shape),)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    return _apply("reshape", (x,), {"shape": shape})


@primitive("upsample")
class _Upsample:
    @staticmethod
    def forward(a, attrs):
        return np.repeat(a[0], attrs["factor"], axis=2), None

    @staticmethod
    def backward(ctx, g, attrs):
        b, c, n = g.shape
        f = attrs["factor"]
        return (g.reshape(b, c, n // f, f).sum(axis=3),)


def upsample(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling along the last axis of [batch, ch, len]."""
    x = _as_tensor(x)
    if x.data.ndim != 3 or factor < 1:
        raise ValueError("upsample expects [batch, ch, len] and factor >= 1")
    return _apply("upsample", (x,), {"factor": int(factor)})


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, attrs):
        return np.array([a[0].sum()]), a[0].shape

    @staticmethod
    def backward(shape, g, attrs):
        return (np.full(shape, g.reshape(-1)[0]),)


def tensor_sum(x) -> Tensor:
    return _apply("sum", (_as_tensor(x),), {})


@primitive("global_avg_pool")
class _GlobalAvgPool:
    @staticmethod
    def forward(a, attrs):
        x = a[0]
        return x.mean(axis=2), x.shape

    @staticmethod
    def backward(shape, g, attrs):
        return (np.broadcast_to(g[:, :, None] / shape[2], shape).copy(),)


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError("global_avg_pool expects [batch, ch, len]")
    return _apply("global_avg_pool", (x,), {})


# dense / conv -----------------------------------------------------------------

@primitive("linear")
class _Linear:
    @staticmethod
    def forward(a, attrs):
        x, w, b = a
        y = x @ w.T
        if b is not None:
            y = y + b
        return y, (x, w)

    @staticmethod
    def backward(ctx, g, attrs):
        x, w = ctx
        return g @ w, g.T @ x, g.sum(axis=0)


def linear(x, w, b=None) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError("linear: bias shape mismatch")
    return _apply("linear", (x, w, b), {})


@primitive("conv1d")
class _Conv1d:
    @staticmethod
    def forward(a, attrs):
        x, w, b = a
        s, p = attrs["stride"], attrs["padding"]
        y = kernels.conv1d_forward(x, w, s, p)
        if b is not None:
            y += b[None, :, None]
        return y, (x, w)

    @staticmethod
    def backward(ctx, g, attrs):
        x, w = ctx
        s, p = attrs["stride"], attrs["padding"]
        g = np.ascontiguousarray(g)
        gx = kernels.conv1d_backward_input(g, w, x.shape[2], s, p)
        gw = kernels.conv1d_backward_weight(g, x, w.shape[2], s, p)
        return gx, gw, g.sum(axis=(0, 2))


def conv_out_len(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [batch, in_ch, len] with w [out_ch, in_ch, k]."""
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ValueError("conv1d expects x [batch, in_ch, len] and w [out_ch, in_ch, k]")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    if conv_out_len(x.shape[2], w.shape[2], stride, padding) < 1:
        raise ValueError("conv1d: output length < 1")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError("conv1d: bias shape mismatch")
    return _apply("conv1d", (x, w, b), {"stride": int(stride), "padding": int(padding)})


# normalization ----------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/var, updated by exponential moving average."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum

    def update(self, mean, var_unbiased):
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * mean
        self.var = (1 - m) * self.var + m * var_unbiased

    def copy(self) -> "RunningStats":
        rs = RunningStats(len(self.mean), self.momentum)
        rs.mean = self.mean.copy()
        rs.var = self.var.copy()
        return rs


@primitive("batch_norm1d")
class _BatchNorm:
    @staticmethod
    def forward(a, attrs):
        x, gamma, beta = a
        eps, stats = attrs["eps"], attrs["stats"]
        if attrs["mode"] == "train":
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            if stats is not None and not attrs.get("_replay"):
                n = x.shape[0] * x.shape[2]
                stats.update(mean, var * n / (n - 1))
        else:
            mean, var = attrs["mean"], attrs["var"]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        return gamma[None, :, None] * xhat + beta[None, :, None], (xhat, inv, gamma)

    @staticmethod
    def backward(ctx, g, attrs):
        xhat, inv, gamma = ctx
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma[None, :, None]
        if attrs["mode"] == "train":
            n = g.shape[0] * g.shape[2]
            dx = (inv[None, :, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2))[None, :, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
            )
        else:
            dx = dxhat * inv[None, :, None]
        return dx, dgamma, dbeta


def batch_norm1d(x, gamma, beta, eps: float = 1e-5, mode: str = "train",
                 stats: RunningStats | None = None) -> Tensor:
    """Batch norm over [batch, ch, len].

    Train mode normalizes with batch statistics and, when ``stats`` is
    given, folds them into the running estimates. Eval mode uses ``stats``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError("batch_norm1d: shape mismatch")
    if not eps > 0:
        raise ValueError("batch_norm1d: eps must be positive")
    attrs = {"eps": float(eps), "mode": mode, "stats": stats}
    if mode == "train":
        if x.shape[0] * x.shape[2] < 2:
            raise ValueError("batch_norm1d: degenerate batch (batch*len < 2) in train mode")
    elif mode == "eval":
        if stats is None:
            raise ValueError("batch_norm1d: eval mode needs running stats")
        attrs["mean"], attrs["var"] = stats.mean.copy(), stats.var.copy()
    else:
        raise ValueError(f"batch_norm1d: unknown mode {mode!r}")
    return _apply("batch_norm1d", (x, gamma, beta), attrs)


# losses -----------------------------------------------------------------------

def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(a, attrs):
        p = _softmax(a[0])
        return p, p

    @staticmethod
    def backward(p, g, attrs):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)


def softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError("softmax expects [batch, classes]")
    return _apply("softmax", (logits,), {})


@primitive("softmax_cross_entropy")
class _SoftmaxCE:
    @staticmethod
    def forward(a, attrs):
        z = a[0]
        labels = attrs["labels"]
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        per = lse - shifted[np.arange(len(labels)), labels]
        total = per.sum()
        if attrs["reduction"] == "mean":
            total /= len(labels)
        return np.array([total]), np.exp(shifted - lse[:, None])

    @staticmethod
    def backward(p, g, attrs):
        labels = attrs["labels"]
        d = p.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        if attrs["reduction"] == "mean":
            d /= len(labels)
        return (d * g.reshape(-1)[0],)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) -log softmax(logits)[label], max-subtracted."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or len(labels) != logits.shape[0]:
        raise ValueError("softmax_cross_entropy: logits [batch, C] and one label per row")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return _apply("softmax_cross_entropy", (logits,), {"labels": labels, "reduction": reduction})


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Untaped per-row cross-entropy, for evaluation and audits."""
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


@primitive("kl_divergence")
class _KL:
    @staticmethod
    def forward(a, attrs):
        t, s = a
        sf = np.maximum(s, KL_FLOOR)
        pos = t > 0
        terms = np.where(pos, t * (np.log(np.where(pos, t, 1.0)) - np.log(sf)), 0.0)
        return np.array([terms.sum() / t.shape[0]]), (t, s, sf, pos)

    @staticmethod
    def backward(ctx, g, attrs):
        t, s, sf, pos = ctx
        n = t.shape[0]
        gs = g.reshape(-1)[0] / n
        tf = np.maximum(t, KL_FLOOR)
        dt = (np.log(tf) - np.log(sf) + 1.0) * gs
        ds = np.where(s > KL_FLOOR, -t / sf, 0.0) * gs
        return dt, ds


def kl_divergence(teacher_probs, student_probs) -> Tensor:
    """Batch mean of sum_i t_i log(t_i / s_i); zero-probability teacher terms drop out."""
    t, s = _as_tensor(teacher_probs), _as_tensor(student_probs)
    if t.shape != s.shape or t.data.ndim != 2:
        raise ValueError("kl_divergence: both inputs must be [batch, C] of equal shape")
    for name, arr in (("teacher", t.data), ("student", s.data)):
        if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValueError(f"kl_divergence: {name} rows are not normalized distributions")
    return _apply("kl_divergence", (t, s), {})


@primitive("attention_transfer")
class _AttentionTransfer:
    @staticmethod
    def forward(a, attrs):
        n = attrs["n_layers"]
        total = 0.0
        ctx = []
        for ta, sa in zip(a[:n], a[n:]):
            ut, nt = _attention_unit(ta)
            us, ns = _attention_unit(sa)
            d = ut - us
            r = np.sqrt((d * d).sum(axis=1))
            total += r.mean()
            ctx.append((ta, sa, ut, nt, us, ns, d, r))
        return np.array([total]), ctx

    @staticmethod
    def backward(ctx, g, attrs):
        gs = g.reshape(-1)[0]
        gt, gsd = [], []
        for ta, sa, ut, nt, us, ns, d, r in ctx:
            b = d.shape[0]
            with np.errstate(invalid="ignore", divide="ignore"):
                dd = np.where(r[:, None] > 0, d / r[:, None], 0.0) * (gs / b)
            gt.append(_attention_unit_grad(ta, ut, nt, dd))
            gsd.append(_attention_unit_grad(sa, us, ns, -dd))
        return tuple(gt + gsd)


def _attention_unit(act):
    q = (act * act).sum(axis=1).reshape(act.shape[0], -1)
    norm = np.sqrt((q * q).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm[:, None] > 0, q / safe[:, None], 0.0), norm


def _attention_unit_grad(act, u, norm, du):
    safe = np.where(norm > 0, norm, 1.0)
    dq = np.where(norm[:, None] > 0,
                  (du - u * (du * u).sum(axis=1, keepdims=True)) / safe[:, None], 0.0)
    return 2.0 * act * dq.reshape(act.shape[0], 1, *act.shape[2:])


def attention_transfer(teacher_acts, student_acts) -> Tensor:
    """Sum over layers of the batch-mean L2 distance between normalized attention maps.

    The attention map of an activation [batch, ch, ...] is the channel sum of
    squared activations, flattened per sample and scaled to unit L2 norm
    (all-zero maps stay zero).
    """
    teacher_acts = [_as_tensor(t) for t in teacher_acts]
    student_acts = [_as_tensor(s) for s in student_acts]
    if len(teacher_acts) != len(student_acts) or not teacher_acts:
        raise ValueError("attention_transfer: layer lists must be non-empty and equal length")
    for t, s in zip(teacher_acts, student_acts):
        if t.shape != s.shape or t.data.ndim < 2:
            raise ValueError(f"attention_transfer: shape mismatch {t.shape} vs {s.shape}")
    return _apply("attention_transfer", tuple(teacher_acts) + tuple(student_acts),
                  {"n_layers": len(teacher_acts)})


_WRAPPERS = {
    "relu": relu, "tanh": tanh, "add": add, "scalar_mul": scalar_mul,
    "clamp": clamp, "sign": sign, "reshape": reshape, "upsample": upsample,
    "sum": tensor_sum, "global_avg_pool": global_avg_pool, "linear": linear,
    "conv1d": conv1d, "batch_norm1d": batch_norm1d, "softmax": softmax,
    "softmax_cross_entropy": softmax_cross_entropy, "kl_divergence": kl_divergence,
    "attention_transfer": attention_transfer,
}
