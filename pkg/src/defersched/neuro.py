"""Differentiable primitives for the scheduling network, plus Adam.

Reverse mode works on a recorded tape: every operator pushes a closure that
maps the output gradient to input gradients, and ``Tape.backward`` replays
them in reverse. Only the operators the network needs exist here.

Forward passes keep a leading batch axis on every matmul. Stacked ``matmul``
evaluates each batch slice with its own GEMM call, so one sample's output does
not depend on what else is in the batch; rollouts rely on that.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

LN_EPS = 1e-5
SOFTPLUS_CUTOFF = 30.0
CHECKPOINT_FORMAT = "defersched.params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    """A value on a tape, with a gradient slot when it requires one."""

    __slots__ = ("value", "grad", "requires_grad", "tape")

    def __init__(self, value, tape: "Tape", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=tape.dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


class Tape:
    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self._closures: list[Callable[[], None]] = []

    def param(self, value) -> Tensor:
        return Tensor(value, self, requires_grad=True)

    def const(self, value) -> Tensor:
        return Tensor(value, self)

    def params(self, values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(v) for k, v in values.items()}

    def _out(self, value, inputs) -> Tensor:
        return Tensor(value, self, requires_grad=any(t.requires_grad for t in inputs))

    def record(self, fn: Callable[[], None]) -> None:
        self._closures.append(fn)

    def backward(self, out: Tensor, seed: np.ndarray | float = 1.0) -> None:
        out.grad = np.broadcast_to(np.asarray(seed, dtype=out.value.dtype), out.shape).copy()
        for fn in reversed(self._closures):
            fn()
        self._closures.clear()


def _batched(x: np.ndarray) -> bool:
    return x.ndim >= 3


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x[..., n, k] @ w[k, m], bitwise independent of the leading batch size.

    Stacked inputs run one product per sample. A plain [n, k] matrix is treated
    as n independent rows, since callers stack per-sample vectors that way.
    """
    if _batched(x):
        return np.matmul(x, w)
    return _rowmm(x, w)


def _sum_outer(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum over all leading rows of x^T g (weight gradient of a row-wise affine map)."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


# ---------------------------------------------------------------- affine / elementwise


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``x @ W + b`` over the last axis."""
    if x.shape[-1] != w.shape[0] or w.value.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x{x.shape} W{w.shape} b{b.shape} do not conform")
    tape = x.tape
    out = tape._out(_mm(x.value, w.value) + b.value, (x, w, b))

    def backward():
        g = out.grad
        if g is None:
            return
        x._accumulate(_mm(g, w.value.T))
        w._accumulate(_sum_outer(x.value, g))
        b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    tape.record(backward)
    return out


def _unary(x: Tensor, value: np.ndarray, dfdx: Callable[[], np.ndarray]) -> Tensor:
    out = x.tape._out(value, (x,))

    def backward():
        if out.grad is not None:
            x._accumulate(out.grad * dfdx())

    x.tape.record(backward)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _unary(x, y, lambda: 1.0 - y * y)


def sigmoid_values(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_values(x.value)
    return _unary(x, y, lambda: y * (1.0 - y))


def softplus_values(v: np.ndarray) -> np.ndarray:
    safe = np.minimum(v, SOFTPLUS_CUTOFF)
    return np.where(v > SOFTPLUS_CUTOFF, v, np.log1p(np.exp(safe)))


def softplus(x: Tensor) -> Tensor:
    return _unary(x, softplus_values(x.value), lambda: sigmoid_values(x.value))


def relu(x: Tensor) -> Tensor:
    return _unary(x, np.maximum(x.value, 0.0), lambda: (x.value > 0).astype(x.value.dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = a.tape._out(a.value + b.value, (a, b))

    def backward():
        if out.grad is not None:
            a._accumulate(out.grad)
            b._accumulate(out.grad)

    a.tape.record(backward)
    return out


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array)."""
    factor = np.asarray(factor, dtype=x.value.dtype)
    return _unary(x, x.value * factor, lambda: np.broadcast_to(factor, x.shape))


def shift(x: Tensor, offset) -> Tensor:
    offset = np.asarray(offset, dtype=x.value.dtype)
    return _unary(x, x.value + offset, lambda: np.ones_like(x.value))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop, :]``."""
    out = x.tape._out(x.value[..., start:stop, :], (x,))

    def backward():
        if out.grad is not None and x.requires_grad:
            g = np.zeros_like(x.value)
            g[..., start:stop, :] = out.grad
            x._accumulate(g)

    x.tape.record(backward)
    return out


def squeeze_last(x: Tensor) -> Tensor:
    if x.shape[-1] != 1:
        raise ShapeError(f"squeeze_last: trailing dim is {x.shape[-1]}")
    out = x.tape._out(x.value[..., 0], (x,))

    def backward():
        if out.grad is not None:
            x._accumulate(out.grad[..., None])

    x.tape.record(backward)
    return out


def concat_last(parts: list[Tensor]) -> Tensor:
    tape = parts[0].tape
    out = tape._out(np.concatenate([p.value for p in parts], axis=-1), parts)
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward():
        if out.grad is None:
            return
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accumulate(out.grad[..., lo:hi])

    tape.record(backward)
    return out


# ---------------------------------------------------------------- normalization / attention


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x{x.shape} gain{gain.shape} bias{bias.shape}")
    mean = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    out = x.tape._out(xhat * gain.value + bias.value, (x, gain, bias))

    def backward():
        g = out.grad
        if g is None:
            return
        gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.value
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    x.tape.record(backward)
    return out


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, mask: np.ndarray) -> Tensor:
    """Single-head scaled dot-product self-attention over the rows of ``x``.

    ``mask`` marks live rows. Dead rows are never attended to and their
    outputs are zero.
    """
    squeeze = x.value.ndim == 2
    xv = x.value[None] if squeeze else x.value
    live = np.asarray(mask, dtype=bool)
    live = live[None] if squeeze else live
    if xv.ndim != 3 or live.shape != xv.shape[:2]:
        raise ShapeError(f"self_attention: x{x.shape} mask{np.shape(mask)}")
    if not live.any(axis=-1).all():
        raise ValueError("self_attention: every position is masked")
    d = xv.shape[-1]
    for w in (wq, wk, wv):
        if w.shape != (d, d):
            raise ShapeError(f"self_attention: projection {w.shape} for width {d}")
    q, k, v = np.matmul(xv, wq.value), np.matmul(xv, wk.value), np.matmul(xv, wv.value)
    inv_sqrt = 1.0 / math.sqrt(d)
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * inv_sqrt
    logits = np.where(live[:, None, :], logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    rowmask = live[..., None].astype(xv.dtype)
    y = np.matmul(p, v) * rowmask
    out = x.tape._out(y[0] if squeeze else y, (x, wq, wk, wv))

    def backward():
        if out.grad is None:
            return
        g = (out.grad[None] if squeeze else out.grad) * rowmask
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * inv_sqrt
        dq = np.matmul(ds, k)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q)
        wq._accumulate(_sum_outer(xv, dq))
        wk._accumulate(_sum_outer(xv, dk))
        wv._accumulate(_sum_outer(xv, dv))
        if x.requires_grad:
            dx = (np.matmul(dq, wq.value.T) + np.matmul(dk, wk.value.T)
                  + np.matmul(dv, wv.value.T))
            x._accumulate(dx[0] if squeeze else dx)

    x.tape.record(backward)
    return out


def attention_weights(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax attention matrix for inspection and tests (no tape)."""
    q, k = np.matmul(x, wq), np.matmul(x, wk)
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(x.shape[-1])
    live = np.asarray(mask, dtype=bool)
    logits = np.where(live[..., None, :], logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- recurrent cell

GRU_KEYS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


def gru_cell(x: Tensor, h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """One GRU update with h' = (1 - z) * h + z * h_tilde.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    h_tilde = tanh(x Wh + (r * h) Uh + bh). Inputs are row vectors ``[..., d]``.
    """
    d_in, d_h = x.shape[-1], h.shape[-1]
    for name in GRU_KEYS:
        want = (d_h,) if name[0] == "b" else ((d_in if name[0] == "W" else d_h), d_h)
        if p[name].shape != want:
            raise ShapeError(f"gru_cell: {name} has shape {p[name].shape}, expected {want}")
    xv, hv = x.value, h.value
    pv = {k: p[k].value for k in GRU_KEYS}
    z = sigmoid_values(_rowmm(xv, pv["Wz"]) + _rowmm(hv, pv["Uz"]) + pv["bz"])
    r = sigmoid_values(_rowmm(xv, pv["Wr"]) + _rowmm(hv, pv["Ur"]) + pv["br"])
    rh = r * hv
    htil = np.tanh(_rowmm(xv, pv["Wh"]) + _rowmm(rh, pv["Uh"]) + pv["bh"])
    out = x.tape._out((1.0 - z) * hv + z * htil, (x, h, *p.values()))

    def backward():
        g = out.grad
        if g is None:
            return
        dz = g * (htil - hv)
        dhtil = g * z
        da_h = dhtil * (1.0 - htil * htil)
        drh = _rowmm(da_h, pv["Uh"].T)
        dr = drh * hv
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        p["Wz"]._accumulate(_sum_outer(xv, da_z))
        p["Uz"]._accumulate(_sum_outer(hv, da_z))
        p["bz"]._accumulate(da_z.reshape(-1, d_h).sum(axis=0))
        p["Wr"]._accumulate(_sum_outer(xv, da_r))
        p["Ur"]._accumulate(_sum_outer(hv, da_r))
        p["br"]._accumulate(da_r.reshape(-1, d_h).sum(axis=0))
        p["Wh"]._accumulate(_sum_outer(xv, da_h))
        p["Uh"]._accumulate(_sum_outer(rh, da_h))
        p["bh"]._accumulate(da_h.reshape(-1, d_h).sum(axis=0))
        if x.requires_grad:
            x._accumulate(_rowmm(da_z, pv["Wz"].T) + _rowmm(da_r, pv["Wr"].T)
                          + _rowmm(da_h, pv["Wh"].T))
        if h.requires_grad:
            h._accumulate(g * (1.0 - z) + drh * r + _rowmm(da_z, pv["Uz"].T)
                          + _rowmm(da_r, pv["Ur"].T))

    x.tape.record(backward)
    return out


def _rowmm(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-row vector-matrix product that is independent of the batch size."""
    return np.matmul(v[..., None, :], w)[..., 0, :]


# ---------------------------------------------------------------- reductions and losses


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x[..., n, k]`` over rows where ``mask[..., n]`` is set."""
    m = np.asarray(mask, dtype=x.value.dtype)[..., None]
    count = m.sum(axis=-2)
    if np.any(count == 0):
        raise ValueError("masked_mean: a sample has no live rows")
    out = x.tape._out((x.value * m).sum(axis=-2) / count, (x,))

    def backward():
        if out.grad is not None:
            x._accumulate(np.broadcast_to((out.grad / count)[..., None, :], x.shape) * m)

    x.tape.record(backward)
    return out


def total(x: Tensor) -> Tensor:
    out = x.tape._out(np.asarray(x.value.sum()), (x,))

    def backward():
        if out.grad is not None:
            x._accumulate(np.broadcast_to(out.grad, x.shape))

    x.tape.record(backward)
    return out


LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_log_prob_values(mu, sigma, sample, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    z = (sample - mu) / sigma
    dens = -0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI
    return (np.where(m > 0, dens, 0.0)).sum(axis=-1)


def gaussian_log_prob(mu: Tensor, sigma: Tensor, sample: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed diagonal-Gaussian log-density over live slots, one value per sample."""
    m = np.asarray(mask, dtype=mu.value.dtype)
    sample = np.where(m > 0, sample, mu.value)
    z = (sample - mu.value) / sigma.value
    out = mu.tape._out(gaussian_log_prob_values(mu.value, sigma.value, sample, m), (mu, sigma))

    def backward():
        if out.grad is None:
            return
        g = out.grad[..., None] * m
        mu._accumulate(g * z / sigma.value)
        sigma._accumulate(g * (z * z - 1.0) / sigma.value)

    mu.tape.record(backward)
    return out


def clipped_surrogate_values(ratio, advantage, epsilon):
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def ppo_policy_loss(logp: Tensor, logp_old: np.ndarray, advantage: np.ndarray, epsilon: float) -> Tensor:
    """Negated mean clipped surrogate (a quantity to minimize)."""
    ratio = np.exp(logp.value - logp_old)
    surr = clipped_surrogate_values(ratio, advantage, epsilon)
    n = ratio.size
    out = logp.tape._out(np.asarray(-surr.mean()), (logp,))

    def backward():
        if out.grad is None:
            return
        # The unclipped branch carries the gradient wherever it attains the min.
        active = ratio * advantage <= np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage
        logp._accumulate(-out.grad * np.where(active, advantage * ratio, 0.0) / n)

    logp.tape.record(backward)
    return out


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.value - target
    out = pred.tape._out(np.asarray((diff * diff).mean()), (pred,))

    def backward():
        if out.grad is not None:
            pred._accumulate(out.grad * 2.0 * diff / diff.size)

    pred.tape.record(backward)
    return out


# ---------------------------------------------------------------- parameters and Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``params`` in place, for the names in ``grads``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class ParamStore:
    """Named parameter arrays, with one Adam state per optimizer group."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64)
                                               for k, v in (params or {}).items()}
        self.adam: dict[str, AdamState] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self.params if k.startswith(prefix))

    def snapshot(self) -> dict[str, np.ndarray]:
        """Immutable copy for readers that must not see later updates."""
        snap = {}
        for k, v in self.params.items():
            c = v.copy()
            c.setflags(write=False)
            snap[k] = c
        return snap

    def step(self, group: str, grads: Mapping[str, np.ndarray], lr: float) -> None:
        adam_step(self.params, grads, self.adam.setdefault(group, AdamState()), lr)

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": [
                {"name": k, "shape": list(self.params[k].shape),
                 "values": self.params[k].ravel().tolist()}
                for k in sorted(self.params)
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ParamStore":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a parameter checkpoint (format={doc.get('format')!r})")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        params = {}
        for entry in doc["params"]:
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != math.prod(shape):
                raise ShapeError(f"checkpoint entry {entry['name']}: {values.size} values for shape {shape}")
            params[entry["name"]] = values.reshape(shape)
        return cls(params)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- gradient checking


def finite_diff_check(build: Callable[[Tape, dict[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must construct a scalar output from the given parameter tensors.
    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape(np.float64)
    nodes = tape.params(params)
    out = build(tape, nodes)
    tape.backward(out)
    worst = 0.0
    for name, value in params.items():
        analytic = nodes[name].grad if nodes[name].grad is not None else np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = _evaluate(build, params)
            flat[i] = saved - step
            down = _evaluate(build, params)
            flat[i] = saved
            numeric = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def _evaluate(build, params) -> float:
    tape = Tape(np.float64)
    return float(build(tape, {k: tape.const(v) for k, v in params.items()}).value)
