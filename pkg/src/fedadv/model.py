"""Feed-forward convolutional classifiers on top of the autograd engine.

A model is a pair (architecture, weights).  Architectures are immutable
layer lists with a fixed input shape; weights are plain lists of numpy
arrays with elementwise arithmetic helpers so that federated averaging,
update clipping and noise addition stay simple and explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import autograd
from .autograd import ShapeError, Tensor


# -- layer specs ---------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class MaxPool2D:
    kernel: int
    stride: Optional[int] = None


LayerSpec = Union[Conv2D, Dense, ReLU, Dropout, Flatten, MaxPool2D]


def infer_shapes(layers: Sequence[LayerSpec],
                 input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Propagate a per-sample input shape through the layer list.

    Args:
        layers: ordered layer specs.
        input_shape: per-sample shape, (C, H, W) for image input.

    Returns:
        Output shape after each layer (same length as ``layers``).

    Raises:
        ShapeError: when adjacent layers are incompatible, with the
            offending layer index in the message.
    """
    shape = tuple(input_shape)
    shapes: list[tuple[int, ...]] = []
    for idx, layer in enumerate(layers):
        try:
            if isinstance(layer, Conv2D):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(
                        f"expected ({layer.in_channels}, H, W) input, got {shape}"
                    )
                out_h = autograd._conv_out_dim(
                    shape[1], layer.kernel, layer.stride, layer.padding)
                out_w = autograd._conv_out_dim(
                    shape[2], layer.kernel, layer.stride, layer.padding)
                shape = (layer.out_channels, out_h, out_w)
            elif isinstance(layer, MaxPool2D):
                if len(shape) != 3:
                    raise ShapeError(f"expected (C, H, W) input, got {shape}")
                stride = layer.stride if layer.stride is not None else layer.kernel
                out_h = autograd._conv_out_dim(shape[1], layer.kernel, stride, 0)
                out_w = autograd._conv_out_dim(shape[2], layer.kernel, stride, 0)
                shape = (shape[0], out_h, out_w)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ShapeError(
                        f"expected ({layer.in_features},) input, got {shape}"
                    )
                shape = (layer.out_features,)
            elif isinstance(layer, (ReLU, Dropout)):
                if isinstance(layer, Dropout) and not 0.0 <= layer.rate < 1.0:
                    raise ShapeError(
                        f"dropout rate must lie in [0, 1), got {layer.rate}"
                    )
            else:
                raise ShapeError(f"unknown layer spec {layer!r}")
        except ShapeError as exc:
            raise ShapeError(f"layer {idx} ({type(layer).__name__}): {exc}") from None
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class ModelArchitecture:
    """An ordered layer list with its expected per-sample input shape.

    ``input_norm``, when set, is a fixed per-channel affine transform
    (x - mean) / std applied before the first layer.  Keeping the
    transform inside the model lets training see normalized activations
    while attacks and datasets keep working in raw pixel space.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    input_norm: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        infer_shapes(self.layers, self.input_shape)
        if self.input_norm is not None:
            mean, std = self.input_norm
            mean, std = tuple(float(m) for m in mean), tuple(float(s) for s in std)
            channels = self.input_shape[0]
            if len(mean) != channels or len(std) != channels:
                raise ShapeError(
                    f"input_norm must carry {channels} per-channel values"
                )
            if any(s == 0.0 for s in std):
                raise ValueError("input_norm std must be nonzero")
            object.__setattr__(self, "input_norm", (mean, std))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return infer_shapes(self.layers, self.input_shape)[-1]

    @property
    def num_classes(self) -> int:
        out = self.output_shape
        if len(out) != 1:
            raise ShapeError(f"architecture output {out} is not a logit vector")
        return out[0]


# -- weights -------------------------------------------------------------------


@dataclass
class ModelWeights:
    """Flat list of parameter arrays, in layer order.

    Conv2D contributes (kernel, bias); Dense contributes (weight, bias)
    with weight stored as (in_features, out_features).  Arithmetic
    helpers return new instances and never mutate operands.
    """

    arrays: list[np.ndarray]

    def __post_init__(self):
        self.arrays = [np.asarray(a, dtype=np.float64) for a in self.arrays]

    def copy(self) -> "ModelWeights":
        return ModelWeights([a.copy() for a in self.arrays])

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights([np.zeros_like(a) for a in self.arrays])

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays])

    def unflatten(self, vector: np.ndarray) -> "ModelWeights":
        """Rebuild a weight structure like this one from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64)
        total = sum(a.size for a in self.arrays)
        if vector.shape != (total,):
            raise ShapeError(
                f"expected a flat vector of {total} elements, got {vector.shape}"
            )
        arrays, offset = [], 0
        for a in self.arrays:
            arrays.append(vector[offset:offset + a.size].reshape(a.shape))
            offset += a.size
        return ModelWeights(arrays)

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float((a * a).sum()) for a in self.arrays)))

    def _check_compatible(self, other: "ModelWeights") -> None:
        if len(self.arrays) != len(other.arrays) or any(
            a.shape != b.shape for a, b in zip(self.arrays, other.arrays)
        ):
            raise ShapeError("weight structures differ")

    def __add__(self, other: "ModelWeights") -> "ModelWeights":
        self._check_compatible(other)
        return ModelWeights([a + b for a, b in zip(self.arrays, other.arrays)])

    def __sub__(self, other: "ModelWeights") -> "ModelWeights":
        self._check_compatible(other)
        return ModelWeights([a - b for a, b in zip(self.arrays, other.arrays)])

    def scale(self, factor: float) -> "ModelWeights":
        return ModelWeights([a * factor for a in self.arrays])

    def allclose(self, other: "ModelWeights", atol: float = 0.0,
                 rtol: float = 0.0) -> bool:
        self._check_compatible(other)
        return all(
            np.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.arrays, other.arrays)
        )


def init_weights(arch: ModelArchitecture, seed: int) -> ModelWeights:
    """Fan-in-scaled uniform initialization, deterministic per seed.

    Kernels and dense weights draw from U(-b, b) with b = sqrt(6/fan_in);
    biases start at zero.
    """
    rng = np.random.default_rng(seed)
    arrays: list[np.ndarray] = []
    for layer in arch.layers:
        if isinstance(layer, Conv2D):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = math.sqrt(6.0 / fan_in)
            shape = (layer.out_channels, layer.in_channels,
                     layer.kernel, layer.kernel)
            arrays.append(rng.uniform(-bound, bound, shape))
            arrays.append(np.zeros(layer.out_channels))
        elif isinstance(layer, Dense):
            bound = math.sqrt(6.0 / layer.in_features)
            arrays.append(
                rng.uniform(-bound, bound, (layer.in_features, layer.out_features))
            )
            arrays.append(np.zeros(layer.out_features))
    return ModelWeights(arrays)


# -- forward / gradients ---------------------------------------------------------


def _forward_graph(arch: ModelArchitecture, params: Sequence[Tensor], x: Tensor,
                   training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if x.ndim != len(arch.input_shape) + 1 or x.shape[1:] != arch.input_shape:
        raise ShapeError(
            f"batch shape {x.shape} does not match input shape "
            f"(B, {', '.join(map(str, arch.input_shape))})"
        )
    out = x
    if arch.input_norm is not None:
        mean, std = arch.input_norm
        mean_arr = np.asarray(mean).reshape(1, -1, *([1] * (len(arch.input_shape) - 1)))
        std_arr = np.asarray(std).reshape(mean_arr.shape)
        out = autograd.add(out, -mean_arr)
        out = autograd.mul(out, 1.0 / std_arr)
    cursor = 0
    for layer in arch.layers:
        if isinstance(layer, Conv2D):
            out = autograd.conv2d(out, params[cursor], params[cursor + 1],
                                  stride=layer.stride, padding=layer.padding)
            cursor += 2
        elif isinstance(layer, Dense):
            out = autograd.add(autograd.matmul(out, params[cursor]),
                               params[cursor + 1])
            cursor += 2
        elif isinstance(layer, ReLU):
            out = autograd.relu(out)
        elif isinstance(layer, MaxPool2D):
            out = autograd.maxpool2d(out, layer.kernel, layer.stride)
        elif isinstance(layer, Flatten):
            out = autograd.reshape(out, (out.shape[0], -1))
        elif isinstance(layer, Dropout):
            if training and layer.rate > 0.0:
                if rng is None:
                    raise ValueError("training with dropout requires an rng")
                out = autograd.dropout(out, layer.rate, rng)
        else:
            raise ShapeError(f"unknown layer spec {layer!r}")
    return out


def _param_tensors(arch: ModelArchitecture, weights: ModelWeights,
                   requires_grad: bool) -> list[Tensor]:
    expected = sum(2 for l in arch.layers if isinstance(l, (Conv2D, Dense)))
    if len(weights.arrays) != expected:
        raise ShapeError(
            f"architecture expects {expected} parameter arrays, "
            f"got {len(weights.arrays)}"
        )
    return [Tensor(a, requires_grad=requires_grad) for a in weights.arrays]


def forward(arch: ModelArchitecture, weights: ModelWeights, batch,
            training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run a batch through the model and return the logits tensor.

    Inference mode (``training=False``) skips dropout entirely, so the
    result is independent of dropout rates and needs no rng.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    params = _param_tensors(arch, weights, requires_grad=False)
    return _forward_graph(arch, params, x, training, rng)


def loss_and_param_gradients(
    arch: ModelArchitecture, weights: ModelWeights, batch, labels,
    training: bool = True, rng: Optional[np.random.Generator] = None,
) -> tuple[float, ModelWeights]:
    """Mean cross-entropy over a batch plus gradients for every parameter.

    Returns:
        (loss value, gradients) where the gradient structure mirrors
        ``weights`` array for array.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    params = _param_tensors(arch, weights, requires_grad=True)
    logits = _forward_graph(arch, params, x, training, rng)
    loss = autograd.cross_entropy(logits, labels)
    loss.backward()
    grads = ModelWeights([
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ])
    return loss.item(), grads


def input_gradient(arch: ModelArchitecture, weights: ModelWeights,
                   x, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy loss with respect to the input.

    Accepts a single sample shaped like ``arch.input_shape`` (with a
    scalar label) or a batch with a label vector; the returned array
    matches the input's shape.  Dropout is disabled: attack gradients
    are taken against the deployed inference behaviour.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.shape == arch.input_shape
    if single:
        arr = arr[None]
        labels = np.asarray([labels])
    x_t = Tensor(arr, requires_grad=True)
    params = _param_tensors(arch, weights, requires_grad=False)
    logits = _forward_graph(arch, params, x_t, training=False, rng=None)
    loss = autograd.cross_entropy(logits, labels)
    loss.backward()
    grad = x_t.grad if x_t.grad is not None else np.zeros_like(arr)
    return grad[0] if single else grad


def sgd_step(weights: ModelWeights, grads: ModelWeights,
             learning_rate: float) -> ModelWeights:
    """One vanilla SGD update, returning new weights."""
    weights._check_compatible(grads)
    return ModelWeights([
        w - learning_rate * g for w, g in zip(weights.arrays, grads.arrays)
    ])


def predict_labels(arch: ModelArchitecture, weights: ModelWeights, images,
                   batch_size: int = 256) -> np.ndarray:
    """Argmax class labels for an image batch, evaluated in inference mode."""
    arr = np.asarray(images, dtype=np.float64)
    out = np.empty(arr.shape[0], dtype=np.int64)
    for start in range(0, arr.shape[0], batch_size):
        chunk = arr[start:start + batch_size]
        logits = forward(arch, weights, chunk, training=False)
        out[start:start + chunk.shape[0]] = logits.data.argmax(axis=1)
    return out


# -- weight serialization --------------------------------------------------------

_WEIGHTS_MAGIC = b"FADW"
_WEIGHTS_VERSION = 1


def save_weights(weights: ModelWeights, path) -> None:
    """Write weights to a little-endian binary sidecar file.

    Layout: magic "FADW", u32 version, u32 array count, then per array
    a u32 ndim, u32 dims, and float64 data in C order.
    """
    import struct

    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", _WEIGHTS_VERSION, len(weights.arrays)))
        for arr in weights.arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> ModelWeights:
    """Read a file written by :func:`save_weights`."""
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _WEIGHTS_MAGIC:
        raise ValueError(f"bad weights magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    offset = 12
    arrays: list[np.ndarray] = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        arrays.append(arr.reshape(shape).astype(np.float64))
    if offset != len(raw):
        raise ValueError("trailing bytes in weights file")
    return ModelWeights(arrays)


# -- presets -------------------------------------------------------------------

PRESETS = ("desk-cnn", "paper-cnn")


def build_architecture(
    preset: str,
    input_shape: tuple[int, int, int],
    num_classes: int,
    input_norm: Optional[tuple[Sequence[float], Sequence[float]]] = None,
) -> ModelArchitecture:
    """Construct one of the named CNN presets for a given input geometry.

    ``desk-cnn`` is a two-conv-block classifier small enough for
    laptop-speed federated experiments.  ``paper-cnn`` is a deeper
    six-conv / five-dense stack with dropout 0.25 between dense layers.
    """
    channels, height, width = input_shape
    if input_norm is not None:
        mean, std = input_norm
        input_norm = (tuple(float(m) for m in mean), tuple(float(s) for s in std))
    if preset == "desk-cnn":
        if height % 4 or width % 4:
            raise ShapeError("desk-cnn needs input extents divisible by 4")
        flat = 16 * (height // 4) * (width // 4)
        layers: tuple[LayerSpec, ...] = (
            Conv2D(channels, 8, kernel=3, stride=1, padding=1),
            ReLU(),
            MaxPool2D(2),
            Conv2D(8, 16, kernel=3, stride=1, padding=1),
            ReLU(),
            MaxPool2D(2),
            Flatten(),
            Dense(flat, 32),
            ReLU(),
            Dropout(0.25),
            Dense(32, num_classes),
        )
    elif preset == "paper-cnn":
        h, w = height, width
        blocks: list[LayerSpec] = []
        in_ch = channels
        for out_ch in (16, 32, 64):
            blocks += [
                Conv2D(in_ch, out_ch, kernel=3, stride=1, padding=1),
                ReLU(),
                Conv2D(out_ch, out_ch, kernel=3, stride=1, padding=1),
                ReLU(),
                MaxPool2D(2),
            ]
            in_ch = out_ch
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeError("paper-cnn needs input extents of at least 8")
        flat = in_ch * h * w
        blocks.append(Flatten())
        dims = [flat, 256, 128, 64, 32]
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            blocks += [Dense(d_in, d_out), ReLU(), Dropout(0.25)]
        blocks.append(Dense(dims[-1], num_classes))
        layers = tuple(blocks)
    else:
        raise ValueError(f"unknown preset {preset!r}, expected one of {PRESETS}")
    return ModelArchitecture(layers, input_shape, input_norm)
