"""
ProxyTokens: Reverse-mode automatic differentiation over dense matrices

A small tape-based engine that provides exactly the primitives the encoders,
the fusion head and the losses are built from. Every tensor is a 2-D float64
matrix; every op checks its output for NaN/Inf and names itself when it
fails.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from src.errors import NonFiniteError, ShapeError

logger = logging.getLogger("ProxyTokens.Autodiff")

_sequence = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)"""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@dataclass(eq=False)
class TapeNode:
    """One recorded op: its kind, its inputs and the closure over saved activations"""

    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int


class Tensor:
    """Row-major float64 matrix with an optional gradient accumulator"""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=""):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError(f"Tensor expects at most 2 dimensions, got {array.ndim}")
        _check_finite(name or "tensor", array)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @classmethod
    def zeros(cls, rows, cols, requires_grad=False, name=""):
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad, name=name)

    @classmethod
    def ones(cls, rows, cols, name=""):
        return cls(np.ones((rows, cols)), name=name)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return detach(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, params=None, retain_graph=False):
        backward(self, params=params, retain_graph=retain_graph)

    @property
    def T(self):
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"


def _check_finite(op, data):
    if data.size and not np.isfinite(data).all():
        logger.error(f"Non-finite output in op '{op}' (shape {data.shape})")
        raise NonFiniteError(op)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op, data, inputs, backward_fn):
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = op
    out._node = None
    out.requires_grad = False
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, tuple(inputs), backward_fn, next(_sequence))
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------- #
# Linear algebra and elementwise ops
# --------------------------------------------------------------------------- #
def matmul(a, b):
    """Matrix product; backward dA = dC·Bᵀ, dB = Aᵀ·dC"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g):
        return g @ b_data.T, a_data.T @ g

    return _result("matmul", a_data @ b_data, (a, b), _backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a, factor):
    """Multiply by a Python scalar (the only broadcast the engine supports)"""
    factor = float(factor)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def gelu(a):
    """Exact-erf GELU: x·Φ(x)"""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)

    def _backward(g):
        return (g * (cdf + x * pdf),)

    return _result("gelu", x * cdf, (a,), _backward)


def relu(a):
    x = a.data
    positive = x > 0
    return _result("relu", np.where(positive, x, 0.0), (a,), lambda g: (g * positive,))


def elementwise(kind, *operands, factor=None):
    """Dispatch by name over the elementwise family {add, sub, mul, scale, gelu, relu}"""
    if kind == "add":
        return add(*operands)
    if kind == "sub":
        return sub(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "scale":
        return scale(operands[0], factor)
    if kind == "gelu":
        return gelu(operands[0])
    if kind == "relu":
        return relu(operands[0])
    raise ValueError(f"Unknown elementwise op: {kind}")


def transpose(a):
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def dropout(a, p, rng):
    """Inverted dropout with a mask drawn from ``rng``"""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def detach(a):
    """Constant copy of ``a``: values flow forward, gradients stop here"""
    return Tensor(a.data, name=f"{a.name}.detached" if a.name else "detached")


# --------------------------------------------------------------------------- #
# Row/column plumbing
# --------------------------------------------------------------------------- #
def gather_rows(a, index):
    """Rows of ``a`` at ``index`` (repeats allowed); backward scatter-adds"""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def _backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _result("gather_rows", a.data[index], (a,), _backward)


def slice_cols(a, start, stop):
    shape = a.shape

    def _backward(g):
        grad = np.zeros(shape)
        grad[:, start:stop] = g
        return (grad,)

    return _result("slice_cols", a.data[:, start:stop].copy(), (a,), _backward)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_rows: nothing to concatenate")
    widths = {t.cols for t in tensors}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(widths)}")
    bounds = np.cumsum([0] + [t.rows for t in tensors])

    def _backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result("concat_rows", np.vstack([t.data for t in tensors]), tensors, _backward)


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_cols: nothing to concatenate")
    heights = {t.rows for t in tensors}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(heights)}")
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result("concat_cols", np.hstack([t.data for t in tensors]), tensors, _backward)


def add_row(a, row):
    """Add a 1×cols row to every row of ``a`` as ones·row, keeping broadcasting out of the engine"""
    return add(a, matmul(Tensor.ones(a.rows, 1), row))


# --------------------------------------------------------------------------- #
# Normalizers and reductions
# --------------------------------------------------------------------------- #
def softmax_rows(a):
    """Row-wise softmax with max-subtraction"""
    if a.rows < 1 or a.cols < 1:
        raise ShapeError(f"softmax_rows: empty input {a.shape}")
    probs = special.softmax(a.data, axis=1)

    def _backward(g):
        inner = np.sum(g * probs, axis=1, keepdims=True)
        return (probs * (g - inner),)

    return _result("softmax_rows", probs, (a,), _backward)


def sequence_attention(q, k, v, seq_len, bias=None, scale=1.0):
    """
    Scaled dot-product attention run separately inside each packed sequence

    ``q``, ``k`` and ``v`` stack B sequences of ``seq_len`` rows each; a row
    only attends to rows of its own sequence. Work and memory grow with
    B·n² rather than (B·n)².

    Args:
        q, k (Tensor): (B·n)×d_k
        v (Tensor): (B·n)×d_v
        seq_len (int): rows per sequence
        bias (np.ndarray, optional): n×n additive score pattern shared by
            every sequence
        scale (float): score multiplier, usually 1/sqrt(d_k)

    Returns:
        tuple: ((B·n)×d_v Tensor, B×n×n attention probabilities)
    """
    if q.shape != k.shape or q.rows != v.rows:
        raise ShapeError(f"sequence_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if seq_len < 1 or q.rows % seq_len:
        raise ShapeError(f"sequence_attention: {q.rows} rows do not split into sequences of {seq_len}")
    n_seq = q.rows // seq_len
    q3 = q.data.reshape(n_seq, seq_len, q.cols)
    k3 = k.data.reshape(n_seq, seq_len, k.cols)
    v3 = v.data.reshape(n_seq, seq_len, v.cols)
    scores = np.matmul(q3, k3.transpose(0, 2, 1)) * scale
    if bias is not None:
        if bias.shape != (seq_len, seq_len):
            raise ShapeError(f"sequence_attention: bias {bias.shape} vs sequence length {seq_len}")
        scores = scores + bias
    probs = special.softmax(scores, axis=2)
    out = np.matmul(probs, v3).reshape(q.rows, v.cols)

    def _backward(g):
        g3 = g.reshape(n_seq, seq_len, v.cols)
        grad_p = np.matmul(g3, v3.transpose(0, 2, 1))
        grad_s = probs * (grad_p - np.sum(grad_p * probs, axis=2, keepdims=True)) * scale
        return (
            np.matmul(grad_s, k3).reshape(q.shape),
            np.matmul(grad_s.transpose(0, 2, 1), q3).reshape(k.shape),
            np.matmul(probs.transpose(0, 2, 1), g3).reshape(v.shape),
        )

    return _result("sequence_attention", out, (q, k, v), _backward), probs


def layer_norm_rows(a, gain, bias, eps=1e-6):
    """Per-row zero mean / unit variance, then gain and bias (both 1×cols)"""
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise ShapeError(f"layer_norm_rows: gain/bias must be 1x{a.cols}, got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm_rows: eps must be positive")
    x = a.data
    centered = x - x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std
    gain_data = gain.data
    width = a.cols

    def _backward(g):
        d_normed = g * gain_data
        d_x = (inv_std / width) * (
            width * d_normed
            - d_normed.sum(axis=1, keepdims=True)
            - normed * (d_normed * normed).sum(axis=1, keepdims=True)
        )
        return d_x, (g * normed).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _result("layer_norm_rows", normed * gain_data + bias.data, (a, gain, bias), _backward)


def sum_all(a):
    shape = a.shape
    return _result("sum_all", np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a):
    if a.data.size == 0:
        raise ShapeError("mean_all: empty input")
    return scale(sum_all(a), 1.0 / a.data.size)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy over rows; ``targets`` holds class indices"""
    targets = np.asarray(targets, dtype=np.int64)
    batch, n_classes = logits.shape
    if batch == 0:
        raise ShapeError("cross_entropy: empty batch")
    if targets.shape != (batch,):
        raise ShapeError(f"cross_entropy: expected {batch} targets, got {targets.shape}")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise IndexError(f"cross_entropy: target index out of range for {n_classes} classes")
    lse = special.logsumexp(logits.data, axis=1)
    picked = logits.data[np.arange(batch), targets]
    loss = np.mean(lse - picked)

    def _backward(g):
        grad = special.softmax(logits.data, axis=1)
        grad[np.arange(batch), targets] -= 1.0
        return (grad * (g[0, 0] / batch),)

    return _result("cross_entropy", np.array([[loss]]), (logits,), _backward)


def bce_with_logits(logits, targets):
    """Mean sigmoid binary cross-entropy over every (row, label) slot"""
    targets = np.asarray(targets, dtype=np.float64)
    if logits.data.size == 0:
        raise ShapeError("bce_with_logits: empty batch")
    if targets.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {targets.shape} vs logits {logits.shape}")
    x = logits.data
    per_slot = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def _backward(g):
        return ((special.expit(x) - targets) * (g[0, 0] / count),)

    return _result("bce_with_logits", np.array([[per_slot.mean()]]), (logits,), _backward)


# --------------------------------------------------------------------------- #
# Backward pass and gradient checking
# --------------------------------------------------------------------------- #
def backward(loss, params=None, retain_graph=False):
    """
    Populate ``grad`` on every leaf reachable from ``loss``

    Args:
        loss (Tensor): 1x1 tensor produced on the tape
        params (iterable, optional): tensors that must end with a gradient
            array even when disconnected from the loss (they get zeros)
        retain_graph (bool): keep tape nodes for a second backward pass
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    if params is not None:
        for param in params:
            if param.grad is None:
                param.zero_grad()
    if loss._node is None:
        if not loss.requires_grad:
            raise ValueError("backward: loss is not connected to any tensor requiring grad")
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones((1, 1))
        return

    visited = set()
    ordered: List[Tensor] = []
    stack = [loss]
    while stack:
        tensor = stack.pop()
        if id(tensor) in visited or tensor._node is None:
            continue
        visited.add(id(tensor))
        ordered.append(tensor)
        stack.extend(tensor._node.inputs)
    ordered.sort(key=lambda t: t._node.seq, reverse=True)

    pending = {id(loss): np.ones((1, 1))}
    for tensor in ordered:
        node = tensor._node
        upstream = pending.pop(id(tensor), None)
        if upstream is None:
            continue
        for inp, grad in zip(node.inputs, node.backward_fn(upstream)):
            if grad is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = grad.copy() if inp.grad is None else inp.grad + grad
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + grad
            else:
                pending[id(inp)] = grad
        if not retain_graph:
            tensor._node = None


def finite_difference_check(f, params, eps=1e-5):
    """
    Compare analytic gradients with central differences

    Args:
        f (callable): builds the scalar loss from the current parameter values
            (called with ``params``); must be deterministic
        params (list[Tensor]): leaves to check
        eps (float): perturbation in [1e-7, 1e-4]

    Returns:
        float: max over coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)

    def _evaluate():
        with no_grad():
            value = f(params)
        return value.item() if isinstance(value, Tensor) else float(value)

    first, second = _evaluate(), _evaluate()
    if first != second:
        raise ValueError(f"finite_difference_check: f is not deterministic ({first!r} != {second!r})")

    for param in params:
        param.grad = None
    backward(f(params), params=params)
    analytic = [param.grad.copy() for param in params]

    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = _evaluate()
            flat[i] = original - eps
            lower = _evaluate()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * eps)
            error = abs(grad_flat[i] - numeric) / max(1.0, abs(numeric))
            if error > worst:
                worst = error
                logger.debug(f"gradcheck: new worst {error:.3e} at {param.name or 'param'}[{i}]")
    return worst
