"""Small dense-tensor engine with tape-based reverse-mode autodiff.

Everything is float64. Operations executed inside an active :class:`Tape`
are recorded together with their backward rule; :func:`backward` replays the
tape in reverse to fill ``.grad`` on leaf tensors. Outside a tape, operations
run eagerly and record nothing, which is what inference uses.

Most operations accept an optional leading batch axis so a whole mini-batch
flows through one call.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "RankError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "sub",
    "matmul",
    "outer_product",
    "elementwise_mul",
    "sigmoid",
    "relu",
    "conv2d",
    "linear",
    "softmax_cross_entropy",
    "reshape",
    "permute",
    "concat",
    "sum",
    "mean",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(DimensionError):
    """Operand has the wrong number of axes."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return elementwise_mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on tensors that require gradients are
    appended while the tape is active. Tapes are thread-confined.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every leaf on ``tape``.

    Leaf gradients accumulate into whatever is already stored, so callers
    zero them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if tape.produced(t):
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, d in enumerate(shape):
        if d == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _finish(a.data - b.data, (a, b), bw, "sub")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; ``b`` may broadcast against ``a`` (e.g. a map with a
    trailing singleton axis against a ``...x3`` coordinate tensor)."""
    _broadcast_shape(a, b, "elementwise_mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(a.data * b.data, (a, b), bw, "elementwise_mul")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (x,), bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _finish(np.maximum(x.data, 0.0), (x,), bw, "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes broadcast as in ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish(out, (a, b), bw, "matmul")


def outer_product(u: Tensor, v: Tensor) -> Tensor:
    """``out[..., i, j] = u[..., i] * v[..., j]``.

    Rank-1 inputs give a ``p x q`` matrix; rank-2 inputs are treated as a batch
    of vectors sharing the leading axis.
    """
    if u.ndim not in (1, 2) or v.ndim != u.ndim:
        raise RankError(f"outer_product needs two vectors (or two vector batches), got {u.shape} and {v.shape}")
    if u.ndim == 2 and u.shape[0] != v.shape[0]:
        raise DimensionError(f"outer_product: batch sizes differ for {u.shape} and {v.shape}")
    out = u.data[..., :, None] * v.data[..., None, :]

    def bw(g):
        return (g * v.data[..., None, :]).sum(axis=-1), (g * u.data[..., :, None]).sum(axis=-2)

    return _finish(out, (u, v), bw, "outer_product")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` for ``x`` of shape ``(d_in,)`` or ``(batch, d_in)``."""
    if W.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2):
        raise RankError(f"linear: bad ranks x={x.shape}, W={W.shape}, b={b.shape}")
    d_out, d_in = W.shape
    if x.shape[-1] != d_in or b.shape[0] != d_out:
        raise DimensionError(f"linear: x={x.shape}, W={W.shape}, b={b.shape} do not match")
    out = x.data @ W.data.T + b.data

    def bw(g):
        gx = g @ W.data
        gW = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    return _finish(out, (x, W, b), bw, "linear")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``C_in x H x W`` or ``B x C_in x H x W``; ``kernels`` is
    ``C_out x C_in x kh x kw``. No bias; add one with :func:`add`.
    """
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise RankError(f"conv2d: expected (B,)C,H,W input and 4-D kernels, got {x.shape} and {kernels.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ContractError(f"conv2d: invalid stride {stride} or padding {padding}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels but kernels {kernels.shape} expect {Ck}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}"
        )
    Ho = conv_output_size(H, kh, sh, ph)
    Wo = conv_output_size(W, kw, sw, pw)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    # B x C x Ho x Wo x kh x kw windows, laid out channel-major as
    # (C*kh*kw) x (B*Ho*Wo) columns
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
    kmat = kernels.data.reshape(O, C * kh * kw)
    out = np.ascontiguousarray((kmat @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))
    if not batched:
        out = out[0]

    def bw(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        gk = (gmat @ cols.T).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, ph : ph + H, pw : pw + W].transpose(1, 0, 2, 3))
            if not batched:
                gx = gx[0]
        return gx, gk

    return _finish(out, (x, kernels), bw, "conv2d")


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``.

    ``logits`` is ``(K,)`` with an int label, or ``(B, K)`` with ``B`` labels.
    """
    if logits.ndim not in (1, 2):
        raise RankError(f"softmax_cross_entropy: logits must be (K,) or (B, K), got {logits.shape}")
    z = logits.data if logits.ndim == 2 else logits.data[None]
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for {z.shape[0]} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.floor(labels)):
            raise ContractError("labels must be integers")
        labels = labels.astype(np.int64)
    K = z.shape[1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise IndexError(f"label out of range for {K} classes: {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, labels]
    out = np.array(losses.mean())

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        p *= g / z.shape[0]
        return (p if logits.ndim == 2 else p[0],)

    return _finish(out, (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# reindexing and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _finish(out, (x,), bw, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _finish(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw, "permute")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} invalid for rank {ndim}")
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1 :] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1 :]:
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish(np.array(x.data.sum()), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n),)

    return _finish(np.array(x.data.mean()), (x,), bw, "mean")


# ---------------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between the taped gradient of ``f`` and central
    differences, ``|a - n| / max(1, |n|)`` over the checked coordinates."""
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got output shape {y.shape}")
    backward(y, tape)
    analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(base.size)

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        saved = flat[i]
        flat[i] = saved + eps
        hi = f(Tensor(base)).item()
        flat[i] = saved - eps
        lo = f(Tensor(base)).item()
        flat[i] = saved
        numeric = (hi - lo) / (2 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
