"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays.  Operations that see at least one
gradient-requiring input record a backward closure; calling
``Tensor.backward()`` on a scalar result walks the recorded graph in
reverse topological order and accumulates gradients into ``.grad``.

The operation set is deliberately small: elementwise add/mul, matmul,
relu, reshape, 2-D convolution and max pooling (NCHW), inverted
dropout, softmax cross-entropy and sum.  That is enough to train the
convolutional classifiers used elsewhere in this package and to take
gradients with respect to inputs for attack construction.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A float64 array plus an optional backward graph node.

    Args:
        data: array-like, converted to a float64 ndarray.
        requires_grad: when true, gradients accumulate into ``grad``
            during backpropagation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection -------------------------------------------------

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Return a new leaf tensor sharing this tensor's data."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Backpropagate from a scalar through the recorded graph.

        Gradients accumulate (+=) into every reachable tensor with
        ``requires_grad`` set.  Raises ``ShapeError`` when called on a
        non-scalar tensor.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar tensor, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(target: Tensor, grad: np.ndarray) -> None:
    # Leaf tensors without requires_grad still receive grads when they sit
    # on a path between two grad-requiring nodes; that is harmless but we
    # skip the work when nothing downstream asked for it.
    if not (target.requires_grad or target._parents):
        return
    if target.grad is None:
        target.grad = np.zeros_like(target.data)
    target.grad += grad


def _make_node(data: np.ndarray, parents: Sequence[Tensor],
               backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and linear ops -----------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _make_node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _make_node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product of a (M, K) and a (K, N) tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    return _make_node(data, (a, b), backward)


def relu(x) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    x = _as_tensor(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(grad: np.ndarray) -> None:
        _accumulate(x, grad * mask)

    return _make_node(data, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward(grad: np.ndarray) -> None:
        _accumulate(x, grad.reshape(x.shape))

    return _make_node(data, (x,), backward)


def tsum(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    data = np.asarray(x.data.sum())

    def backward(grad: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(grad, x.shape).astype(np.float64))

    return _make_node(data, (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each element with probability ``rate``.

    Survivors are scaled by 1/(1-rate) so that activation expectations
    match inference, where dropout is skipped entirely.
    """
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale

    def backward(grad: np.ndarray) -> None:
        _accumulate(x, grad * keep * scale)

    return _make_node(data, (x,), backward)


# -- image ops (NCHW) ----------------------------------------------------------


def _conv_out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"window (kernel={kernel}, stride={stride}, padding={padding}) "
            f"does not fit input extent {size}"
        )
    return out


def _im2col(x: np.ndarray, kernel: int, stride: int,
            padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold (B, C, H, W) into patch columns (B, C, K*K, OH*OW)."""
    batch, channels, height, width = x.shape
    out_h = _conv_out_dim(height, kernel, stride, padding)
    out_w = _conv_out_dim(width, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((batch, channels, kernel, kernel, out_h, out_w), dtype=x.dtype)
    for i in range(kernel):
        i_max = i + stride * out_h
        for j in range(kernel):
            j_max = j + stride * out_w
            cols[:, :, i, j] = x[:, :, i:i_max:stride, j:j_max:stride]
    return cols.reshape(batch, channels, kernel * kernel, out_h * out_w), out_h, out_w


def _col2im(cols: np.ndarray, input_shape: tuple[int, ...], kernel: int,
            stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Fold patch columns (B, C, K*K, OH*OW) back by summing overlaps."""
    batch, channels, height, width = input_shape
    padded = np.zeros(
        (batch, channels, height + 2 * padding, width + 2 * padding),
        dtype=cols.dtype,
    )
    cols = cols.reshape(batch, channels, kernel, kernel, out_h, out_w)
    for i in range(kernel):
        i_max = i + stride * out_h
        for j in range(kernel):
            j_max = j + stride * out_w
            padded[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j]
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OIHW kernels.

    Args:
        x: input tensor of shape (B, C, H, W).
        weight: kernel tensor of shape (O, C, K, K).
        bias: optional per-output-channel tensor of shape (O,).
        stride: window step, shared by both spatial axes.
        padding: zero padding added to each spatial border.

    Returns:
        Tensor of shape (B, O, OH, OW).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}"
        )
    out_ch, in_ch, kernel, kernel_w = weight.shape
    if kernel != kernel_w:
        raise ShapeError(f"conv2d kernels must be square, got {weight.shape}")
    if x.shape[1] != in_ch:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels but kernel expects {in_ch}"
        )
    batch = x.shape[0]
    cols, out_h, out_w = _im2col(x.data, kernel, stride, padding)
    cols = cols.reshape(batch, in_ch * kernel * kernel, out_h * out_w)
    w_mat = weight.data.reshape(out_ch, in_ch * kernel * kernel)
    data = np.matmul(w_mat, cols).reshape(batch, out_ch, out_h, out_w)
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (out_ch,):
            raise ShapeError(
                f"conv2d bias must have shape ({out_ch},), got {bias.shape}"
            )
        data = data + bias.data[:, None, None]
        parents.append(bias)

    def backward(grad: np.ndarray) -> None:
        g_mat = grad.reshape(batch, out_ch, out_h * out_w)
        if bias is not None:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)))
        _accumulate(
            weight,
            np.matmul(g_mat, cols.transpose(0, 2, 1))
            .sum(axis=0)
            .reshape(weight.shape),
        )
        d_cols = np.matmul(w_mat.T, g_mat)
        _accumulate(
            x, _col2im(d_cols, x.shape, kernel, stride, padding, out_h, out_w)
        )

    return _make_node(data, parents, backward)


def maxpool2d(x, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling over non-padded (B, C, H, W) windows.

    ``stride`` defaults to ``kernel``.  Gradient flows to the first
    maximal element of each window (argmax tie-break).
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    if stride is None:
        stride = kernel
    cols, out_h, out_w = _im2col(x.data, kernel, stride, padding=0)
    batch, channels = x.shape[0], x.shape[1]
    argmax = cols.argmax(axis=2)
    data = np.take_along_axis(cols, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    data = data.reshape(batch, channels, out_h, out_w)

    def backward(grad: np.ndarray) -> None:
        d_cols = np.zeros_like(cols)
        g_flat = grad.reshape(batch, channels, 1, out_h * out_w)
        np.put_along_axis(d_cols, argmax[:, :, None, :], g_flat, axis=2)
        d_cols = d_cols.reshape(batch, channels * kernel * kernel, out_h * out_w)
        _accumulate(x, _col2im(d_cols, x.shape, kernel, stride, 0, out_h, out_w))

    return _make_node(data, (x,), backward)


# -- loss ----------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (plain numpy)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy between (B, K) logits and integer labels.

    Args:
        logits: tensor of shape (B, K).
        labels: integer array of shape (B,) with values in [0, K).

    Returns:
        Scalar tensor holding the mean negative log-likelihood.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    num_classes = logits.shape[1]
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise ShapeError(
            f"label {labels[bad[0]]} of sample {bad[0]} lies outside "
            f"[0, {num_classes})"
        )
    batch = logits.shape[0]
    log_probs = log_softmax(logits.data)
    data = np.asarray(-log_probs[np.arange(batch), labels].mean())

    def backward(grad: np.ndarray) -> None:
        d_logits = np.exp(log_probs)
        d_logits[np.arange(batch), labels] -= 1.0
        _accumulate(logits, d_logits * (float(grad) / batch))

    return _make_node(data, (logits,), backward)
