"""Dense float tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, and every
primitive op optionally records a node on the active Tape. Appending in
execution order keeps the tape topologically sorted, so the backward pass
is a single reverse sweep. There is no graph rewriting, no broadcasting
cleverness beyond numpy's own, and no higher-order differentiation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Default dtype for newly created tensors. float32 keeps training fast;
# gradient checks build their models in float64 explicitly.
_default_dtype = np.float32

# When set, every primitive forward validates its output for NaN/Inf.
debug_nan = False

_SUPPORTED = (np.float32, np.float64)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Node order is execution order, which is a valid topological order by
    construction: every input tensor exists before the op that consumes it.
    ``backward`` walks the list in exact reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def record(self, node: "_Node") -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> None:
        """Accumulate dLoss/dx into ``.grad`` of every leaf tensor.

        Intermediate gradients live in a per-call map, so calling backward
        again (same tape or a fresh one) adds exactly one more dLoss/dleaf
        into each leaf; zero grads between optimizer steps.
        """
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

        def deposit(tensor: "Tensor", grad: np.ndarray) -> None:
            key = id(tensor)
            if key in produced:
                have = grads.get(key)
                if have is None:
                    # Closures hand back freshly allocated buffers (views are
                    # copied), so adopting them avoids a zeros+add pass.
                    grads[key] = grad if grad.base is None else grad.copy()
                else:
                    have += grad
            else:
                if tensor.grad is None:
                    grad = np.asarray(grad, dtype=tensor.data.dtype)
                    tensor.grad = grad if grad.base is None else grad.copy()
                else:
                    tensor.grad += grad

        for node in reversed(self.nodes):
            out_grad = grads.get(id(node.output))
            if out_grad is None:
                continue
            input_grads = node.backward(out_grad)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                deposit(tensor, grad)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: "Tensor",
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tape_stack: list[Tape] = []
_grad_enabled = True


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _grad_enabled and _tape_stack else None


class no_grad:
    """Context that suppresses tape recording (frozen-parameter forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float array, optionally tracked on a tape.

    Data is immutable by convention once created; only ``grad`` buffers
    mutate (via accumulation during backward and zeroing between steps).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.type not in _SUPPORTED:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tensor_slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# -- op machinery ------------------------------------------------------------


def _finish(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a forward result, recording a tape node when gradients are on."""
    if debug_nan and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    tape = active_tape()
    needs_grad = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out.node_id = tape.record(_Node(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    # Pass-through grads are returned as views so the tape copies rather
    # than adopts them (the same buffer may feed several inputs).
    if not isinstance(b, Tensor):
        out_data = a.data + np.asarray(b, dtype=a.dtype)
        return _finish("add", (a,), out_data, lambda g: (g.view(),))
    _check_same_dtype("add", a, b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        ga = g.view() if g.shape == a.shape else _unbroadcast(g, a.shape)
        gb = g.view() if g.shape == b.shape else _unbroadcast(g, b.shape)
        return ga, gb

    return _finish("add", (a, b), out_data, backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        out_data = a.data * np.asarray(scalar, dtype=a.dtype)
        return _finish("scalar_mul", (a,), out_data,
                       lambda g: (g * scalar,))
    _check_same_dtype("mul", a, b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish("mul", (a, b), out_data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("div", a, b)
    try:
        out_data = a.data / b.data
    except ValueError:
        raise ValueError(f"div: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _finish("div", (a, b), out_data, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul: expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _finish("matmul", (a, b), out_data, backward)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b for (N, in) inputs; one tape node per layer."""
    _check_same_dtype("affine", x, w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"affine: expects rank-2 x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"affine: inner dims disagree, {x.shape} @ {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        _check_same_dtype("affine", x, b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"affine: bias must be ({w.shape[1]},), got {b.shape}")
        out_data += b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("affine", inputs, out_data, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Flattened inner product of two same-shape tensors (scalar output)."""
    _check_same_dtype("dot", a, b)
    if a.shape != b.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    out_data = np.asarray(np.dot(a.data.reshape(-1), b.data.reshape(-1)),
                          dtype=a.dtype)

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _finish("dot", (a, b), out_data, backward)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out_data = a.data.reshape(shape)
    return _finish("reshape", (a,), out_data,
                   lambda g: (g.reshape(old),))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d: expects rank 2, got {a.shape}")
    return _finish("transpose2d", (a,), a.data.T, lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    for t in tensors[1:]:
        _check_same_dtype("concat", tensors[0], t)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", tensors, out_data, backward)


def tensor_slice(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _finish("slice", (a,), np.ascontiguousarray(out_data), backward)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by integer index (duplicates allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    out_data = a.data[indices]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _finish("take", (a,), out_data, backward)


# -- reductions --------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).astype(a.dtype, copy=False),)

    return _finish("sum", (a,), np.asarray(out_data, dtype=a.dtype), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    out_data = np.cumsum(a.data, axis=axis)

    def backward(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return _finish("cumsum", (a,), out_data, backward)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _finish("exp", (a,), out_data, lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)
    return _finish("log", (a,), out_data, lambda g: (g / a.data,))


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)
    return _finish("sin", (a,), out_data, lambda g: (g * np.cos(a.data),))


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)
    return _finish("abs", (a,), out_data,
                   lambda g: (g * np.sign(a.data),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: stable at both tails and a single vectorized pass.
    return 0.5 * np.tanh(0.5 * x) + 0.5


def softplus(a: Tensor) -> Tensor:
    out_data = _softplus(a.data)
    return _finish("softplus", (a,), out_data,
                   lambda g: (g * _sigmoid(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)
    return _finish("sigmoid", (a,), out_data,
                   lambda g: (g * out_data * (1.0 - out_data),))


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    out_data = np.where(a.data >= 0, a.data, alpha * a.data)

    def backward(g):
        return (np.where(a.data >= 0, g, alpha * g),)

    return _finish("leaky_relu", (a,), out_data, backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out_data = np.maximum(a.data, floor)

    def backward(g):
        return (np.where(a.data > floor, g, 0.0).astype(a.dtype, copy=False),)

    return _finish("clamp_min", (a,), out_data, backward)


# -- losses ------------------------------------------------------------------


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences (the L1 losses used for color/mask)."""
    _check_same_dtype("l1", a, b)
    if a.shape != b.shape:
        raise ValueError(f"l1: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out_data = np.asarray(np.abs(diff).sum(), dtype=a.dtype)
    sign = np.sign(diff)

    def backward(g):
        ga = g * sign if a.requires_grad else None
        gb = -g * sign if b.requires_grad else None
        return ga, gb

    return _finish("l1", (a, b), out_data, backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of softmax(logits) against integer targets.

    Stable log-sum-exp; returns a vector of length N for logits of shape
    (N, C). The caller reduces (mean/sum) as appropriate.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be (N, C), "
                         f"got {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (logits.shape[0],):
        raise ValueError("softmax_cross_entropy: one target index per row")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(z.shape[0])
    out_data = lse - z[rows, targets]

    def backward(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[rows, targets] -= 1.0
        return (soft * g[:, None],)

    return _finish("softmax_cross_entropy", (logits,), out_data, backward)


# -- convolution & friends ---------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho, Wo, C*kh*kw) patch matrix."""
    b, c, h, w = x.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    windows = windows.transpose(0, 2, 3, 1, 4, 5)
    ho, wo = windows.shape[1], windows.shape[2]
    return np.ascontiguousarray(windows).reshape(b, ho, wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over (B, C, H, W) with kernels (Cout, Cin, kh, kw)."""
    _check_same_dtype("conv2d", x, weight)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4 (B,C,H,W), got {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4, got {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ValueError(
            f"conv2d: input channels {x.shape[1]} != kernel channels {cin}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{xp.shape[2]}x{xp.shape[3]}")
    cols = _im2col(xp, kh, kw, stride)
    b, ho, wo, _ = cols.shape
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols.reshape(-1, cin * kh * kw) @ wmat.T
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        _check_same_dtype("conv2d", x, bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias must be ({cout},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]

    def backward(g):
        # g: (B, Cout, Ho, Wo)
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gmat.T @ cols.reshape(-1, cin * kh * kw)).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # Scatter grad into a dilated buffer, then full-correlate with
            # the flipped kernel; equivalent to col2im without add.at.
            hp, wp = xp.shape[2], xp.shape[3]
            gd = np.zeros((b, cout, hp - kh + 1, wp - kw + 1), dtype=g.dtype)
            gd[:, :, ::stride, ::stride] = g
            gpad = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gcols = _im2col(gpad, kh, kw, 1)
            gxp = gcols.reshape(-1, cout * kh * kw) @ \
                wflip.reshape(cin, cout * kh * kw).T
            gxp = gxp.reshape(b, hp, wp, cin).transpose(0, 3, 1, 2)
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding]
            else:
                gx = gxp
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("conv2d", inputs, out, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2: input must be rank 4, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: H and W must be even, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gblk = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gblk, arg[..., None], g[..., None], axis=-1)
        gblk = gblk.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gblk.reshape(b, c, h, w),)

    return _finish("maxpool2x2", (x,), np.ascontiguousarray(out_data), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"upsample_nearest2x: input must be rank 4, got {x.shape}")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _finish("upsample_nearest2x", (x,), out_data, backward)
