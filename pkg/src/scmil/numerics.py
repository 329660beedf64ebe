"""Dense 2-D tensors with a reverse-mode gradient tape.

Every value is a float64 matrix. Operations executed while a :class:`Tape`
is active are recorded in order; ``Tape.backward`` replays them in reverse
and accumulates gradients into every tensor that requires one.

    with Tape() as tape:
        loss = sum_all(square(matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError, OptimizerStateError

__all__ = [
    "Tensor", "Parameter", "Tape", "Adam",
    "constant", "matmul", "add", "sub", "mul", "div", "neg", "scale",
    "exp", "log", "square", "sigmoid", "tanh_act", "softplus",
    "softmax_rows", "log_softmax_rows", "logsumexp_rows",
    "sum_all", "sum_rows", "sum_cols", "mean_rows", "transpose",
    "concat_rows", "concat_cols", "select_rows", "select_cols",
    "maximum", "dropout", "log_norm_sf",
    "erf", "erfc", "log_erfc", "norm_cdf", "norm_sf", "norm_logpdf",
    "uniform_init", "record_op",
]

_TAPE_STACK: list[Tape] = []


class Tensor:
    """A float64 matrix node, optionally tracked by the active tape."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {value.shape}")
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self):
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A learnable tensor with a stable identifier used in checkpoints."""

    __slots__ = ("name",)

    def __init__(self, value, name, requires_grad=True):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=requires_grad)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable operations.

    A tape supports exactly one backward pass; open a new one for each
    forward pass.
    """

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, out, inputs, backward_fn):
        self._ops.append((out, inputs, backward_fn))

    def backward(self, loss):
        if self._consumed:
            raise RuntimeError("backward already ran on this tape")
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for out, inputs, fn in reversed(self._ops):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                g = _unbroadcast(g, inp.value.shape)
                if inp.grad is None:
                    inp.grad = g.copy() if g is out.grad else g
                else:
                    inp.grad = inp.grad + g
        self._ops = []


def _active():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def constant(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(value, inputs, backward_fn, name):
    """Wrap ``value`` as the output of a custom differentiable operation.

    ``backward_fn`` maps the output gradient to a tuple with one gradient
    (or None) per input tensor.
    """
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{name} produced a non-finite value")
    tape = _active()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        tape.record(out, inputs, backward_fn)
    return out


def _check_broadcast(a, b, name):
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape} (inner dims {a.cols} != {b.rows})")
    av, bv = a.value, b.value
    return record_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(a):
    a = constant(a)
    return record_op(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a, b):
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")
    return record_op(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")
    return record_op(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return record_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b):
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return record_op(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def neg(a):
    a = constant(a)
    return record_op(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    a = constant(a)
    c = float(c)
    return record_op(a.value * c, (a,), lambda g: (g * c,), "scale")


def maximum(a, floor):
    """Elementwise max with a constant; no gradient where the floor is active."""
    a = constant(a)
    keep = a.value >= floor
    return record_op(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------- elementwise

def exp(a):
    a = constant(a)
    out = np.exp(a.value)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = constant(a)
    av = a.value
    if (av <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return record_op(np.log(av), (a,), lambda g: (g / av,), "log")


def square(a):
    a = constant(a)
    av = a.value
    return record_op(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = constant(a)
    s = _sigmoid(a.value)
    return record_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh_act(a):
    a = constant(a)
    t = np.tanh(a.value)
    return record_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(a):
    a = constant(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return record_op(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


# ---------------------------------------------------------------- row-wise reductions

def softmax_rows(a):
    a = constant(a)
    x = a.value
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return record_op(s, (a,), back, "softmax_rows")


def logsumexp_rows(a):
    a = constant(a)
    x = a.value
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    return record_op(lse, (a,), lambda g: (g * np.exp(x - lse),), "logsumexp_rows")


def log_softmax_rows(a):
    a = constant(a)
    x = a.value
    m = x.max(axis=1, keepdims=True)
    out = x - (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return record_op(out, (a,), back, "log_softmax_rows")


def sum_all(a):
    a = constant(a)
    shape = a.shape
    return record_op(np.array([[a.value.sum()]]), (a,), lambda g: (np.broadcast_to(g, shape),), "sum_all")


def sum_rows(a):
    """Sum across columns: (n, d) -> (n, 1)."""
    a = constant(a)
    shape = a.shape
    return record_op(a.value.sum(axis=1, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g, shape),), "sum_rows")


def sum_cols(a):
    """Sum down rows: (n, d) -> (1, d)."""
    a = constant(a)
    shape = a.shape
    return record_op(a.value.sum(axis=0, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g, shape),), "sum_cols")


def mean_rows(a):
    a = constant(a)
    return scale(sum_rows(a), 1.0 / a.cols)


# ---------------------------------------------------------------- structure

def concat_rows(parts):
    parts = [constant(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows of an empty list")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError(f"concat_rows: column counts differ ({p.cols} != {cols})")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record_op(np.concatenate([p.value for p in parts], axis=0), tuple(parts), back, "concat_rows")


def concat_cols(parts):
    parts = [constant(p) for p in parts]
    if not parts:
        raise DimensionError("concat_cols of an empty list")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError(f"concat_cols: row counts differ ({p.rows} != {rows})")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record_op(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back, "concat_cols")


def select_rows(a, index):
    a = constant(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape
    unique = len(np.unique(index)) == len(index)

    def back(g):
        full = np.zeros(shape)
        if unique:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op(a.value[index], (a,), back, "select_rows")


def select_cols(a, cols):
    """Column slice; ``cols`` is a ``slice`` or an index array."""
    a = constant(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        if isinstance(cols, slice):
            full[:, cols] = g
        else:
            np.add.at(full.T, np.asarray(cols, dtype=np.intp), g.T)
        return (full,)

    return record_op(a.value[:, cols], (a,), back, "select_cols")


def dropout(a, rate, training, rng):
    """Inverted dropout. Identity at inference or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    a = constant(a)
    if not training or rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return record_op(a.value * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- error function

_SQRT_PI = math.sqrt(math.pi)
_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SERIES_CUT = 3.0
_CF_DEPTH = 90


def _erf_series(x):
    # erf(x) = 2/sqrt(pi) exp(-x^2) sum_n (2x^2)^n x / (2n+1)!!, all terms positive
    term = x.copy()
    total = x.copy()
    two_x2 = 2.0 * x * x
    n = 0
    while True:
        n += 1
        term = term * two_x2 / (2 * n + 1)
        total += term
        if (term <= 1e-17 * total).all():
            break
    return 2.0 / _SQRT_PI * np.exp(-x * x) * total


def _erfc_cf_ratio(x):
    # erfc(x) = exp(-x^2)/sqrt(pi) * r(x) with
    # r = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), evaluated bottom-up
    tail = np.zeros_like(x)
    for k in range(_CF_DEPTH, 0, -1):
        tail = (0.5 * k) / (x + tail)
    return 1.0 / (x + tail)


def _erf_abs(ax):
    out = np.empty_like(ax)
    small = ax < _SERIES_CUT
    if small.any():
        out[small] = _erf_series(ax[small])
    big = ~small
    if big.any():
        xb = ax[big]
        out[big] = 1.0 - np.exp(-xb * xb) / _SQRT_PI * _erfc_cf_ratio(xb)
    return out


def _as_float_array(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("erf family needs finite input")
    return arr


def erf(x):
    """Gauss error function, odd by construction, |error| < 1e-10."""
    arr = _as_float_array(x)
    flat = arr.reshape(-1)
    out = np.copysign(_erf_abs(np.abs(flat)), flat).reshape(arr.shape)
    return float(out) if np.ndim(x) == 0 else out


def erfc(x):
    """Complementary error function with full relative accuracy in the right tail."""
    arr = _as_float_array(x)
    flat = arr.reshape(-1)
    ax = np.abs(flat)
    pos = np.empty_like(ax)
    small = ax < _SERIES_CUT
    if small.any():
        pos[small] = 1.0 - _erf_series(ax[small])
    big = ~small
    if big.any():
        xb = ax[big]
        pos[big] = np.exp(-xb * xb) / _SQRT_PI * _erfc_cf_ratio(xb)
    out = np.where(flat >= 0, pos, 2.0 - pos).reshape(arr.shape)
    return float(out) if np.ndim(x) == 0 else out


def log_erfc(x):
    """log(erfc(x)) without underflow for large positive x."""
    arr = _as_float_array(x)
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    big = flat >= _SERIES_CUT
    if big.any():
        xb = flat[big]
        out[big] = -xb * xb + np.log(_erfc_cf_ratio(xb) / _SQRT_PI)
    rest = ~big
    if rest.any():
        out[rest] = np.log(erfc(flat[rest]))
    out = out.reshape(arr.shape)
    return float(out) if np.ndim(x) == 0 else out


def norm_cdf(z):
    return 0.5 * (1.0 + erf(z / _SQRT2))


def norm_sf(z):
    return 0.5 * erfc(np.asarray(z) / _SQRT2)


def norm_logpdf(z):
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * z * z - _LOG_SQRT_2PI


def log_norm_sf(z):
    """Differentiable log of the standard normal survival function."""
    z = constant(z)
    zv = z.value
    out = log_erfc(zv / _SQRT2) - math.log(2.0)

    def back(g):
        return (-g * np.exp(norm_logpdf(zv) - out),)

    return record_op(out, (z,), back, "log_norm_sf")


# ---------------------------------------------------------------- init / optimizer

def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Adam with decoupled weight decay.

    Weight decay shrinks each parameter by ``lr * weight_decay`` before the
    bias-corrected moment update. Parameters whose ``grad`` is None are
    skipped for that step.
    """

    def __init__(self, params, lr=2e-4, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("parameter identifiers must be unique")
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        if all(p.grad is None for p in self.params):
            raise OptimizerStateError("optimizer step called before any backward pass")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            value = p.value * (1.0 - self.lr * self.weight_decay)
            p.value = value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
