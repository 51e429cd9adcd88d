"""Dense numeric kernels: trainable layers with explicit forward/backward,
the Adam optimizer, warmup/decay learning-rate schedule, and the finite-
difference gradient checker.

Everything runs in float64. No autodiff tape exists anywhere in the
package: each layer's backward is written by hand and checkable against
central differences via `grad_check`.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericsError


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Param:
    """A named trainable tensor with an accumulated gradient of equal shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"param {self.name}: grad shape {self.grad.shape} != "
                f"value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def orthogonal_init(rng: np.random.Generator, shape) -> np.ndarray:
    """Orthogonal-like square init via QR of a seeded Gaussian."""
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a)
    # sign-fix so the decomposition is unique and reproducible
    q = q * np.sign(np.diag(r))
    return q


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {where}")
    return x


# Optional recorder for distances to piecewise-linear kinks (ReLU zero
# crossings, max-pool ties). The gradient checker uses it to reject test
# instances where a central difference would straddle a kink; it is None
# (zero overhead beyond one if) in normal operation.
_kink_recorder: list | None = None


def record_kink_margin(margins: np.ndarray) -> None:
    if _kink_recorder is not None:
        _kink_recorder.append(float(np.min(np.abs(margins))))


@contextlib.contextmanager
def kink_margins():
    """Collect the kink margins of every op run inside the block."""
    global _kink_recorder
    prev = _kink_recorder
    _kink_recorder = rec = []
    try:
        yield rec
    finally:
        _kink_recorder = prev


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D vector; shift-invariant by construction."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise DimensionError("softmax expects a non-empty 1-D vector")
    if np.any(np.isnan(x)):
        raise NumericsError("NaN input to softmax")
    e = np.exp(x - np.max(x))
    return e / e.sum()


def softmax_backward(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Gradient through y = softmax(x) given y (=w) and dL/dy (=dw)."""
    return w * (dw - np.dot(w, dw))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Affine:
    """y = x W + b with exact gradient accumulation."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.W = Param(f"{name}.W", uniform_init(rng, (d_in, d_out)))
        self.b = Param(f"{name}.b", np.zeros(d_out))

    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.W.value.shape[0]:
            raise DimensionError(
                f"{self.W.name}: input dim {x.shape[-1]} != {self.W.value.shape[0]}")
        return x @ self.W.value + self.b.value, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        if x.ndim == 1:
            self.W.grad += np.outer(x, dy)
            self.b.grad += dy
        else:
            self.W.grad += x.T @ dy
            self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class GRUCell:
    """Single gated recurrent step.

    z = sigm(x Wz + h Uz + bz), r = sigm(x Wr + h Ur + br),
    c = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*c.
    """

    def __init__(self, name: str, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        self.Wz = Param(f"{name}.Wz", uniform_init(rng, (d_in, d_h)))
        self.Wr = Param(f"{name}.Wr", uniform_init(rng, (d_in, d_h)))
        self.Wh = Param(f"{name}.Wh", uniform_init(rng, (d_in, d_h)))
        self.Uz = Param(f"{name}.Uz", orthogonal_init(rng, (d_h, d_h)))
        self.Ur = Param(f"{name}.Ur", orthogonal_init(rng, (d_h, d_h)))
        self.Uh = Param(f"{name}.Uh", orthogonal_init(rng, (d_h, d_h)))
        self.bz = Param(f"{name}.bz", np.zeros(d_h))
        self.br = Param(f"{name}.br", np.zeros(d_h))
        self.bh = Param(f"{name}.bh", np.zeros(d_h))

    def params(self) -> list[Param]:
        return [self.Wz, self.Wr, self.Wh, self.Uz, self.Ur, self.Uh,
                self.bz, self.br, self.bh]

    def forward(self, x: np.ndarray, h: np.ndarray):
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_h:
            raise DimensionError(
                f"gru {self.Wz.name}: got x[{x.shape[-1]}], h[{h.shape[-1]}], "
                f"expected x[{self.d_in}], h[{self.d_h}]")
        z = sigmoid(x @ self.Wz.value + h @ self.Uz.value + self.bz.value)
        r = sigmoid(x @ self.Wr.value + h @ self.Ur.value + self.br.value)
        rh = r * h
        c = np.tanh(x @ self.Wh.value + rh @ self.Uh.value + self.bh.value)
        h_new = (1.0 - z) * h + z * c
        return h_new, (x, h, z, r, rh, c)

    def backward(self, dh_new: np.ndarray, cache):
        """Returns (dx, dh_prev); accumulates parameter gradients."""
        x, h, z, r, rh, c = cache
        dz = dh_new * (c - h)
        dc = dh_new * z
        dh = dh_new * (1.0 - z)

        dc_pre = dc * (1.0 - c * c)
        self.Wh.grad += np.outer(x, dc_pre)
        self.Uh.grad += np.outer(rh, dc_pre)
        self.bh.grad += dc_pre
        drh = dc_pre @ self.Uh.value.T
        dr = drh * h
        dh += drh * r
        dx = dc_pre @ self.Wh.value.T

        dz_pre = dz * z * (1.0 - z)
        self.Wz.grad += np.outer(x, dz_pre)
        self.Uz.grad += np.outer(h, dz_pre)
        self.bz.grad += dz_pre
        dx += dz_pre @ self.Wz.value.T
        dh += dz_pre @ self.Uz.value.T

        dr_pre = dr * r * (1.0 - r)
        self.Wr.grad += np.outer(x, dr_pre)
        self.Ur.grad += np.outer(h, dr_pre)
        self.br.grad += dr_pre
        dx += dr_pre @ self.Wr.value.T
        dh += dr_pre @ self.Ur.value.T
        return dx, dh


class BiGRU:
    """Bidirectional GRU over a sequence; outputs per-step [fwd;bwd] states
    and the concatenation of the two directions' final states."""

    def __init__(self, name: str, d_in: int, d_h: int, rng: np.random.Generator):
        self.fwd = GRUCell(f"{name}.fwd", d_in, d_h, rng)
        self.bwd = GRUCell(f"{name}.bwd", d_in, d_h, rng)
        self.d_h = d_h

    def params(self) -> list[Param]:
        return self.fwd.params() + self.bwd.params()

    def forward(self, xs: np.ndarray):
        T = xs.shape[0]
        if T < 1:
            raise DimensionError("BiGRU requires a non-empty sequence")
        d = self.d_h
        states = np.zeros((T, 2 * d))
        caches_f, caches_b = [], []
        h = np.zeros(d)
        for t in range(T):
            h, cache = self.fwd.forward(xs[t], h)
            states[t, :d] = h
            caches_f.append(cache)
        h_last_f = h
        h = np.zeros(d)
        for t in range(T - 1, -1, -1):
            h, cache = self.bwd.forward(xs[t], h)
            states[t, d:] = h
            caches_b.append(cache)  # order: t = T-1 .. 0
        final = np.concatenate([h_last_f, h])
        return states, final, (caches_f, caches_b, T)

    def backward(self, dstates: np.ndarray, dfinal: np.ndarray, cache) -> np.ndarray:
        caches_f, caches_b, T = cache
        d = self.d_h
        dxs = np.zeros((T, self.fwd.d_in))
        dh = dfinal[:d].copy()
        for t in range(T - 1, -1, -1):
            dh += dstates[t, :d]
            dx, dh = self.fwd.backward(dh, caches_f[t])
            dxs[t] += dx
        dh = dfinal[d:].copy()
        for t in range(T):
            dh += dstates[t, d:]
            dx, dh = self.bwd.backward(dh, caches_b[T - 1 - t])
            dxs[t] += dx
        return dxs


class Conv1dBank:
    """Bank of 1-D convolutions with kernel widths 1..K, same padding, ReLU.

    Outputs are concatenated along the channel axis: [T, K*channels].
    """

    def __init__(self, name: str, d_in: int, K: int, channels: int,
                 rng: np.random.Generator):
        if K < 1:
            raise DimensionError(f"conv bank needs K >= 1, got {K}")
        self.d_in, self.K, self.channels = d_in, K, channels
        self.filters = [Param(f"{name}.w{k}", uniform_init(rng, (k, d_in, channels)))
                        for k in range(1, K + 1)]
        self.biases = [Param(f"{name}.b{k}", np.zeros(channels))
                       for k in range(1, K + 1)]

    def params(self) -> list[Param]:
        out: list[Param] = []
        for w, b in zip(self.filters, self.biases):
            out += [w, b]
        return out

    @staticmethod
    def _pad(x: np.ndarray, k: int) -> np.ndarray:
        return np.pad(x, (((k - 1) // 2, k // 2), (0, 0)))

    def forward(self, x: np.ndarray):
        T = x.shape[0]
        outs, pres = [], []
        for k, (w, b) in enumerate(zip(self.filters, self.biases), start=1):
            xp = self._pad(x, k)
            pre = np.tile(b.value, (T, 1))
            for i in range(k):
                pre += xp[i:i + T] @ w.value[i]
            record_kink_margin(pre)
            pres.append(pre)
            outs.append(np.maximum(pre, 0.0))
        return np.concatenate(outs, axis=1), (x, pres)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, pres = cache
        T = x.shape[0]
        dx = np.zeros_like(x)
        for k, (w, b) in enumerate(zip(self.filters, self.biases), start=1):
            c0 = (k - 1) * self.channels
            dpre = dy[:, c0:c0 + self.channels] * (pres[k - 1] > 0.0)
            b.grad += dpre.sum(axis=0)
            xp = self._pad(x, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                w.grad[i] += xp[i:i + T].T @ dpre
                dxp[i:i + T] += dpre @ w.value[i].T
            lo = (k - 1) // 2
            dx += dxp[lo:lo + T]
        return dx


def maxpool1d_same(x: np.ndarray):
    """Width-2 stride-1 max pool, last frame padded with itself.

    Ties route the gradient to the earlier index.
    """
    T = x.shape[0]
    if T < 1:
        raise DimensionError("maxpool on empty sequence")
    xn = np.vstack([x[1:], x[-1:]])
    if x.shape[0] > 1:
        # Exact ties are benign: they arise from pairs of ReLU-clipped zeros
        # whose shared pre-activation margin is tracked at the ReLU itself.
        m = (x - xn)[:-1]
        m = m[m != 0.0]
        if m.size:
            record_kink_margin(m)
    take_first = x >= xn
    y = np.where(take_first, x, xn)
    return y, take_first


def maxpool1d_same_backward(dy: np.ndarray, take_first: np.ndarray) -> np.ndarray:
    dx = np.where(take_first, dy, 0.0)
    shifted = np.where(take_first, 0.0, dy)
    dx[1:] += shifted[:-1]
    dx[-1] += shifted[-1]
    return dx


class Conv1dSame:
    """Single 1-D convolution, fixed width, same padding, optional ReLU."""

    def __init__(self, name: str, d_in: int, d_out: int, width: int,
                 relu: bool, rng: np.random.Generator):
        self.width, self.relu = width, relu
        self.w = Param(f"{name}.w", uniform_init(rng, (width, d_in, d_out)))
        self.b = Param(f"{name}.b", np.zeros(d_out))

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray):
        T, k = x.shape[0], self.width
        xp = Conv1dBank._pad(x, k)
        pre = np.tile(self.b.value, (T, 1))
        for i in range(k):
            pre += xp[i:i + T] @ self.w.value[i]
        if self.relu:
            record_kink_margin(pre)
        y = np.maximum(pre, 0.0) if self.relu else pre
        return y, (x, pre)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, pre = cache
        T, k = x.shape[0], self.width
        dpre = dy * (pre > 0.0) if self.relu else dy
        self.b.grad += dpre.sum(axis=0)
        xp = Conv1dBank._pad(x, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            self.w.grad[i] += xp[i:i + T].T @ dpre
            dxp[i:i + T] += dpre @ self.w.value[i].T
        lo = (k - 1) // 2
        return dxp[lo:lo + T]


class HighwayLayer:
    """y = T(x)*H(x) + (1-T(x))*x with H = ReLU affine, T = sigmoid affine."""

    def __init__(self, name: str, d: int, rng: np.random.Generator):
        self.d = d
        self.h = Affine(f"{name}.h", d, d, rng)
        self.t = Affine(f"{name}.t", d, d, rng)

    def params(self) -> list[Param]:
        return self.h.params() + self.t.params()

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.d:
            raise DimensionError(f"highway expects dim {self.d}, got {x.shape[-1]}")
        h_pre, hc = self.h.forward(x)
        record_kink_margin(h_pre)
        h = np.maximum(h_pre, 0.0)
        t_pre, tc = self.t.forward(x)
        t = sigmoid(t_pre)
        y = t * h + (1.0 - t) * x
        return y, (x, h_pre, h, t, hc, tc)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, h_pre, h, t, hc, tc = cache
        dt = dy * (h - x)
        dh = dy * t
        dx = dy * (1.0 - t)
        dx += self.h.backward(dh * (h_pre > 0.0), hc)
        dx += self.t.backward(dt * t * (1.0 - t), tc)
        return dx


def dropout_mask(shape, rate: float, rng: np.random.Generator,
                 training: bool = True) -> np.ndarray:
    """Inverted-scaling dropout mask: entries are 0 or 1/(1-rate).

    All-ones when rate == 0 or in inference mode, so inference needs no
    rescaling.
    """
    if not 0.0 <= rate < 1.0:
        raise NumericsError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to peak_lr at warmup_steps, then inverse-sqrt decay."""

    peak_lr: float = 0.002
    warmup_steps: int = 4000


def noam_lr(step: int, sched: LrSchedule) -> float:
    if step < 1:
        raise NumericsError(f"noam_lr requires step >= 1, got {step}")
    # peak * sqrt(w) * min(step * w^-1.5, step^-0.5), factored so the peak
    # value is reached exactly at step == warmup_steps.
    w = float(sched.warmup_steps)
    return sched.peak_lr * min(step / w, math.sqrt(w / step))


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters.

    A parameter whose gradient is exactly zero for a step is left untouched
    (value, m and v), so updates on a fully-masked path are true no-ops.
    Gradients are zeroed after each update.
    """

    def __init__(self, params: Sequence[Param], beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise NumericsError("duplicate parameter names in optimizer")
        self.params = list(params)
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if np.any(np.isnan(p.grad)):
                raise NumericsError(f"NaN gradient in parameter {p.name}")
            if not p.grad.any():
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    params = list(params)
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(loss_fn: Callable[[], float], params: Sequence[Param],
               epsilon: float = 1e-5,
               analytic: dict[str, np.ndarray] | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn` must be deterministic (no live dropout). If `analytic` is not
    given, gradients are read from each param's `.grad` as accumulated by a
    prior backward pass.
    """
    max_rel = 0.0
    for p in params:
        a = analytic[p.name] if analytic is not None else p.grad
        check_finite(a, f"analytic gradient of {p.name}")
        flat = p.value.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_fn()
            flat[i] = orig - epsilon
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(aflat[i]), abs(num), 1e-8)
            max_rel = max(max_rel, abs(aflat[i] - num) / denom)
    return max_rel
