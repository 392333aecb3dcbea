"""Minimal reverse-mode differentiation over numpy arrays.

Every op takes and returns :class:`Tensor`. A node stores its parents and a
closure mapping the upstream gradient to one gradient per parent; calling
``backward()`` on a scalar walks the graph in reverse topological order.
Arrays passed where a Tensor is expected are wrapped as constants.

There is no broadcasting beyond the explicit ``add_row`` and the bias of
``affine``; operand shapes must match exactly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True
LOG_2PI = math.log(2.0 * math.pi)


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def item(self) -> float:
        return float(self.value)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar", shape=self.shape)
            grad = np.ones_like(self.value)
        order = _topological(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node.parents:
                node.grad = None if node is not self else node.grad

    __add__ = lambda a, b: add(a, b)
    __sub__ = lambda a, b: sub(a, b)
    __mul__ = lambda a, b: mul(a, b)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: scale(a, -1.0)


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _node(value, parents, op, backward):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}", op=op)
    out = Tensor(value)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, *tensors):
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"{op}: operand shapes differ", shapes=[list(t.shape) for t in tensors])


# ------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.value + b.value, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _node(a.value - b.value, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _node(a.value * b.value, (a, b), "mul", lambda g: (g * b.value, g * a.value))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), "scale", lambda g: (g * c,))


def add_row(x, row) -> Tensor:
    """x (N, H) plus a length-H row added to every row."""
    x, row = as_tensor(x), as_tensor(row)
    if x.value.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError("add_row: expected (N, H) and (H,)", x=list(x.shape), row=list(row.shape))
    return _node(x.value + row.value, (x, row), "add_row", lambda g: (g, g.sum(axis=0)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0).astype(x.dtype), (x,), "relu",
                 lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    return _node(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return _node(y, (x,), "exp", lambda g: (g * y,))


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: incompatible shapes", a=list(a.shape), b=list(b.shape))
    return _node(a.value @ b.value, (a, b), "matmul",
                 lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose expects a matrix", shape=list(a.shape))
    return _node(a.value.T, (a,), "transpose", lambda g: (g.T,))


def affine(x, W, b) -> Tensor:
    """x (N, D) -> x W^T + b with W (H, D), b (H,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if (x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[1]
            or b.shape != (W.shape[0],)):
        raise ShapeError("affine: incompatible shapes",
                         x=list(x.shape), W=list(W.shape), b=list(b.shape))
    return _node(x.value @ W.value.T + b.value, (x, W, b), "affine",
                 lambda g: (g @ W.value, g.T @ x.value, g.sum(axis=0)))


# ------------------------------------------------------------ structure

def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}", shapes=[list(t.shape) for t in tensors]) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(value, tensors, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x, key) -> Tensor:
    """Basic (non-advanced) indexing, e.g. ``slice_(x, (slice(None), slice(0, 4)))``."""
    x = as_tensor(x)
    value = x.value[key]

    def backward(g):
        full = np.zeros_like(x.value)
        full[key] = g
        return (full,)

    return _node(value, (x,), "slice", backward)


def gather_rows(x, index) -> Tensor:
    """Rows of x picked by an integer index array; repeated rows accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.value.ndim != 2 or index.ndim != 1:
        raise ShapeError("gather_rows expects a matrix and a 1-D index", shape=list(x.shape))
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("gather_rows index out of range", rows=x.shape[0])

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.value[index], (x,), "gather_rows", backward)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    value = x.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(np.asarray(value), (x,), "sum", backward)


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum_(x), 1.0 / x.value.size)


# ------------------------------------------------------------ losses

def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross entropy of integer labels under row-wise softmax of (N, C) logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy: logits (N, C) and labels (N,) required",
                         logits=list(logits.shape), labels=list(labels.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("label out of range", classes=logits.shape[1])
    logp = log_softmax_values(logits.value)
    rows = np.arange(len(labels))
    total = -logp[rows, labels].sum()
    norm = len(labels) if reduction == "mean" else 1.0

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / norm),)

    return _node(np.asarray(total / norm, dtype=logits.dtype), (logits,), "softmax_cross_entropy",
                 backward)


def mse(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("mse", pred, target)
    diff = pred.value - target.value
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return (d, -d)

    return _node(np.asarray((diff * diff).sum() / n, dtype=pred.dtype), (pred, target), "mse",
                 backward)


def gaussian_nll(x, mean_, logvar) -> Tensor:
    """Summed negative log density of x under N(mean, exp(logvar)), elementwise diagonal."""
    x, mean_, logvar = as_tensor(x), as_tensor(mean_), as_tensor(logvar)
    _same_shape("gaussian_nll", x, mean_, logvar)
    inv_var = np.exp(-logvar.value)
    diff = x.value - mean_.value
    value = 0.5 * (LOG_2PI + logvar.value + diff * diff * inv_var).sum()

    def backward(g):
        dm = -g * diff * inv_var
        return (-dm, dm, 0.5 * g * (1.0 - diff * diff * inv_var))

    return _node(np.asarray(value, dtype=x.dtype), (x, mean_, logvar), "gaussian_nll", backward)


def kl_diag_gaussians(mu_q, logvar_q, mu_p, logvar_p, reduce: bool = True) -> Tensor:
    """KL(N(mu_q, exp(logvar_q)) || N(mu_p, exp(logvar_p))), summed unless ``reduce`` is False."""
    mu_q, logvar_q = as_tensor(mu_q), as_tensor(logvar_q)
    mu_p, logvar_p = as_tensor(mu_p), as_tensor(logvar_p)
    _same_shape("kl_diag_gaussians", mu_q, logvar_q, mu_p, logvar_p)
    var_q = np.exp(logvar_q.value)
    inv_var_p = np.exp(-logvar_p.value)
    diff = mu_q.value - mu_p.value
    elem = 0.5 * (logvar_p.value - logvar_q.value + (var_q + diff * diff) * inv_var_p - 1.0)
    value = elem.sum() if reduce else elem

    def backward(g):
        dmu = g * diff * inv_var_p
        return (dmu, 0.5 * g * (var_q * inv_var_p - 1.0), -dmu,
                0.5 * g * (1.0 - (var_q + diff * diff) * inv_var_p))

    return _node(np.asarray(value, dtype=mu_q.dtype), (mu_q, logvar_q, mu_p, logvar_p),
                 "kl_diag_gaussians", backward)


# ------------------------------------------------------------ recurrent cell

def lstm_cell(x, h_prev, c_prev, W, b):
    """One LSTM step. W is (4H, D + H) with gate blocks [input, forget, output, candidate]."""
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    hidden = h_prev.shape[-1]
    if as_tensor(W).shape[0] != 4 * hidden or c_prev.shape != h_prev.shape:
        raise ShapeError("lstm_cell: parameter and state sizes disagree",
                         W=list(as_tensor(W).shape), h=list(h_prev.shape), c=list(c_prev.shape))
    gates = affine(concat([x, h_prev], axis=1), W, b)
    i = sigmoid(slice_(gates, (slice(None), slice(0, hidden))))
    f = sigmoid(slice_(gates, (slice(None), slice(hidden, 2 * hidden))))
    o = sigmoid(slice_(gates, (slice(None), slice(2 * hidden, 3 * hidden))))
    cand = tanh(slice_(gates, (slice(None), slice(3 * hidden, 4 * hidden))))
    c = add(mul(f, c_prev), mul(i, cand))
    h = mul(o, tanh(c))
    return h, c


def lstm_params(rng: np.random.Generator, input_dim: int, hidden: int, dtype=np.float32,
                prefix: str = "lstm"):
    W = glorot_uniform(rng, 4 * hidden, input_dim + hidden, dtype)
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden:2 * hidden] = 1.0
    return {f"{prefix}.W": W, f"{prefix}.b": b}


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float32):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in)).astype(dtype)


# ------------------------------------------------------------ optimisers

@dataclass
class OptimizerState:
    kind: str = "sgd"
    step_size: float = 0.025
    clip_norm: float | None = 5.0
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "step_size": self.step_size, "clip_norm": self.clip_norm,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float | None):
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient; step refused", norm=norm)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm, norm
    factor = max_norm / norm
    eps = max(np.finfo(g.dtype).eps if np.issubdtype(g.dtype, np.floating) else 0.0
              for g in grads.values())
    while True:
        clipped = {k: (g * factor).astype(g.dtype) for k, g in grads.items()}
        new = global_norm(clipped)
        if new <= max_norm:
            return clipped, norm, new
        # low-precision rounding can land just above the bound
        factor *= 1.0 - 4 * eps


def _collect(params: dict, grads: dict | None):
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    missing = [k for k, g in grads.items() if g is None]
    if missing:
        raise NumericError("gradients not populated", params=missing)
    return grads


def sgd_step(params: dict, grads: dict | None, state: OptimizerState) -> None:
    """p <- p - step_size * clip(g)."""
    grads, norm, clipped_norm = clip_by_global_norm(_collect(params, grads), state.clip_norm)
    state.step += 1
    for k, p in params.items():
        p.value = (p.value - state.step_size * grads[k]).astype(p.value.dtype)
    state.history.append({"step": state.step, "step_size": state.step_size,
                          "grad_norm": norm, "clipped_norm": clipped_norm})


def adam_step(params: dict, grads: dict | None, state: OptimizerState) -> None:
    """Bias-corrected Adam after global-norm clipping."""
    grads, norm, clipped_norm = clip_by_global_norm(_collect(params, grads), state.clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value = (p.value - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype)
    state.history.append({"step": t, "step_size": state.step_size,
                          "grad_norm": norm, "clipped_norm": clipped_norm})


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# ------------------------------------------------------------ gradient check

def gradcheck(fn, params: dict, h: float = 1e-5, floor: float = 1e-3,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central finite differences.

    ``fn`` rebuilds the graph from ``params`` (float64 Tensors) and returns a
    scalar Tensor. Relative error is |a - n| / max(|a|, |n|, floor).
    ``max_entries`` samples that many coordinates per parameter.
    """
    zero_grads(params)
    fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    worst = 0.0
    for k, p in params.items():
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    zero_grads(params)
    return worst
