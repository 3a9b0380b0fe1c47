"""Dense tensors with tape-based reverse-mode differentiation.

All arithmetic runs in float64; float32 exists only as an opt-in storage
format for files. The tape is implicit: every tensor produced by an op keeps
references to its parents plus a monotonically increasing sequence number,
and ``Tensor.backward`` replays the reachable ops in exact reverse execution
order. Gradients are always accumulated (added into), never overwritten;
zeroing is the caller's job. No op mutates its inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionError,
    UsageError,
    ValidationError,
    VerificationError,
)

_SEQ = itertools.count()

# Verification hook: when set to (op_name, scale), backward replay multiplies
# the incoming gradient of every node produced by that op by `scale`, i.e. the
# op's backward rule is deliberately wrong. Used by the gradcheck gate to
# prove it catches bad gradients. Never set this in production code.
_CORRUPTION: tuple[str, float] | None = None


def set_gradient_corruption(op_name: str, scale: float) -> None:
    global _CORRUPTION
    _CORRUPTION = (op_name, float(scale))


def clear_gradient_corruption() -> None:
    global _CORRUPTION
    _CORRUPTION = None


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        # Shares the buffer; treat the result as read-only.
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate gradients of everything this scalar was computed from."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.shape}")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes or not node.requires_grad:
                continue
            nodes[id(node)] = node
            stack.extend(node._parents)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            if node._backward is None or node.grad is None:
                continue
            grad = node.grad
            if _CORRUPTION is not None and node._op == _CORRUPTION[0]:
                grad = grad * _CORRUPTION[1]
            node._backward(grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, Tensor(1.0 / other))
        return mul(self, pow_const(as_tensor(other), -1.0))

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axes=None) -> "Tensor":
        return reduce(self, axes, "sum")

    def mean(self, axes=None) -> "Tensor":
        return reduce(self, axes, "mean")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"


def as_tensor(x) -> Tensor:
    """Lift arrays/scalars to constant (non-differentiable) tensors."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if t.grad is None:
        # copy: incoming buffers may be shared with other backward closures
        t.grad = np.array(grad, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def make_op(data: np.ndarray, parents: tuple["Tensor", ...], op: str,
            backward: Callable[[np.ndarray], None]) -> "Tensor":
    """Construct a differentiable node with a hand-written backward rule.

    `backward` receives the output gradient and must route input gradients
    through `accumulate_grad`. Used by layers that fuse several primitive
    ops for speed; each such fusion is covered by the finite-difference gate.
    """
    return _result(np.asarray(data, dtype=np.float64), parents, op, backward)


def accumulate_grad(t: "Tensor", grad: np.ndarray) -> None:
    """Add `grad` into t.grad (allocating on first use); no-op unless t requires grad."""
    _accumulate(t, grad)


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(data, (a, b), "mul", backward)


def pow_const(x: Tensor, exponent: float) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise UsageError("pow_const supports scalar exponents only")
    x = as_tensor(x)
    data = x.data ** exponent

    def backward(g):
        _accumulate(x, g * exponent * x.data ** (exponent - 1))

    return _result(data, (x,), "pow", backward)


def elu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # expm1(min(x,0)) + max(x,0) equals elu(x) exactly on both branches
    data = np.expm1(np.minimum(x.data, 0.0))
    data += np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * np.exp(np.minimum(x.data, 0.0)))

    return _result(data, (x,), "elu", backward)


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        _accumulate(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _result(data, (x,), "silu", backward)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - data * data))

    return _result(data, (x,), "tanh", backward)


def sin(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.sin(x.data)

    def backward(g):
        _accumulate(x, g * np.cos(x.data))

    return _result(data, (x,), "sin", backward)


def cos(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.cos(x.data)

    def backward(g):
        _accumulate(x, g * -np.sin(x.data))

    return _result(data, (x,), "cos", backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * 2.0 * x.data)

    return _result(x.data * x.data, (x,), "square", backward)


def absolute(x: Tensor) -> Tensor:
    # Subgradient 0 at the kink.
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), "abs", backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    # Gradient passes only where the input is strictly above the floor.
    x = as_tensor(x)
    data = np.maximum(x.data, floor)

    def backward(g):
        _accumulate(x, g * (x.data > floor))

    return _result(data, (x,), "clamp_min", backward)


_ELEMENTWISE = {
    "elu": elu,
    "silu": silu,
    "tanh": tanh,
    "sin": sin,
    "square": square,
    "add": add,
    "mul": mul,
}


def elementwise(kind: str, *inputs: Tensor) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind not in _ELEMENTWISE:
        raise ValidationError(f"unknown elementwise kind {kind!r}; expected one of {sorted(_ELEMENTWISE)}")
    return _ELEMENTWISE[kind](*inputs)


# -- structural ops -------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _result(data, (x,), "reshape", backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for ndim {x.ndim}")
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), "transpose", backward)


def pad_left(x: Tensor, amount: int) -> Tensor:
    """Zero-pad the last axis on the left by `amount` elements."""
    x = as_tensor(x)
    if amount < 0:
        raise ValidationError("pad amount must be nonnegative")
    if amount == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(amount, 0)]
    data = np.pad(x.data, widths)

    def backward(g):
        _accumulate(x, g[..., amount:])

    return _result(data, (x,), "pad_left", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[ax] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _result(data, tuple(tensors), "concat", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-broadcast semantics (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _result(data, (a, b), "matmul", backward)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid (unpadded) 1-D cross-correlation.

    x: (N, ch_in, T) or (ch_in, T); kernels: (ch_out, ch_in, k); bias: (ch_out,).
    Output time length is T - k + 1; padding is the caller's job.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.ndim != 3 or bias.ndim != 1:
        raise DimensionError("conv1d expects input (N, ch_in, T), kernels (ch_out, ch_in, k), bias (ch_out,)")
    n, ch_in, t = xd.shape
    ch_out, k_in, k = kernels.shape
    if k_in != ch_in or bias.shape[0] != ch_out:
        raise DimensionError(f"conv1d: channel mismatch, input {ch_in} vs kernels {k_in}/{ch_out}")
    if k > t:
        raise DimensionError(f"conv1d: kernel size {k} exceeds input length {t}")
    t_out = t - k + 1
    # im2col so every contraction here is a single BLAS call
    cols = sliding_window_view(xd, k, axis=-1).transpose(0, 2, 1, 3).reshape(n * t_out, ch_in * k)
    w2 = kernels.data.reshape(ch_out, ch_in * k)
    out = (cols @ w2.T).reshape(n, t_out, ch_out).transpose(0, 2, 1) + bias.data[None, :, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(n * t_out, ch_out)
        _accumulate(bias, g2.sum(axis=0))
        _accumulate(kernels, (g2.T @ cols).reshape(ch_out, ch_in, k))
        if x.requires_grad:
            # full correlation of the padded output gradient with flipped kernels
            gp = np.zeros((n, ch_out, t + k - 1))
            gp[:, :, k - 1:k - 1 + t_out] = gd
            gcols = sliding_window_view(gp, k, axis=-1).transpose(0, 2, 1, 3).reshape(n * t, ch_out * k)
            wf = kernels.data[:, :, ::-1].transpose(0, 2, 1).reshape(ch_out * k, ch_in)
            dx = (gcols @ wf).reshape(n, t, ch_in).transpose(0, 2, 1)
            _accumulate(x, dx[0] if squeeze else dx)

    return _result(out, (x, kernels, bias), "conv1d", backward)


def reduce(x: Tensor, axes, kind: str) -> Tensor:
    """Sum or mean over the given axes; axes=None means all, [] is identity."""
    if kind not in ("sum", "mean"):
        raise ValidationError(f"unknown reduce kind {kind!r}")
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
    axes = [int(a) for a in (axes if isinstance(axes, (list, tuple)) else [axes])]
    if not axes:
        return x
    norm = []
    for a in axes:
        a = a + x.ndim if a < 0 else a
        if a < 0 or a >= x.ndim:
            raise DimensionError(f"reduce: axis {a} out of range for ndim {x.ndim}")
        norm.append(a)
    if len(set(norm)) != len(norm):
        raise DimensionError(f"reduce: duplicate axes in {axes}")
    ax = tuple(sorted(norm))
    count = int(np.prod([x.data.shape[a] for a in ax]))
    data = x.data.sum(axis=ax)
    if kind == "mean":
        data = data / count
    keep_shape = tuple(1 if i in ax else s for i, s in enumerate(x.data.shape))

    def backward(g):
        expanded = np.broadcast_to(g.reshape(keep_shape), x.data.shape)
        _accumulate(x, expanded / count if kind == "mean" else expanded.copy())

    return _result(data, (x,), f"reduce_{kind}", backward)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    return reduce(x, axes, "sum")


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, axes, "mean")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, max-stabilized.

    logits: (B, M); labels: int array (B,) with values in [0, M).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (B, M) logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, m = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValidationError(f"labels must lie in [0, {m})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    data = -log_probs[np.arange(b), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(b), labels] -= 1.0
        _accumulate(logits, float(g) * grad / b)

    return _result(np.asarray(data), (logits,), "softmax_cross_entropy", backward)


# -- verification ----------------------------------------------------------


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic function of `params` (a Tensor or a sequence
    of Tensors, each requiring grad) returning a scalar Tensor. Relative
    error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Perturbations are applied in place and restored, so `f` may either take
    the tensors as arguments or close over them.
    """
    tensors = [params] if isinstance(params, Tensor) else list(params)
    for p in tensors:
        if not p.requires_grad:
            raise UsageError("finite_diff_check requires params with requires_grad=True")
        p.zero_grad()
    out = f(*tensors)
    if out.data.size != 1:
        raise UsageError("finite_diff_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise VerificationError("function produced a non-finite value")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in tensors]

    worst = 0.0
    for p, ana in zip(tensors, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*tensors).data)
            flat[i] = orig - eps
            f_minus = float(f(*tensors).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise VerificationError("function produced a non-finite value during perturbation")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
