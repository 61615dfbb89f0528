"""A small, hand-differentiated CNN stack (NCHW) with per-layer parameter access.

Only what the experiments need: conv2d, batch-norm, ReLU, flatten, dense and a
softmax cross-entropy loss. Every trainable tensor is a ParamTensor whose
component matrix is the P x N view that the gradient transforms operate on.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import STREAM_INIT, make_rng

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "Flatten",
    "LayerActivation",
    "LayerSpec",
    "Model",
    "ModelSpec",
    "ParamTensor",
    "ReLU",
    "basic_cnn",
    "build_model",
    "init_params",
    "load_params",
    "model_spec",
    "save_params",
    "softmax_cross_entropy",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(eq=False)
class ParamTensor:
    """A trainable tensor and the rule that views it as a component matrix.

    Conv weights (out, in, kh, kw) have one component per output filter, so the
    component matrix is (in*kh*kw) x out. Dense weights are stored (in, out) and
    are already in component form. Rank-1 tensors have no component matrix.
    """

    name: str
    data: np.ndarray
    is_dense: bool = False
    grad: Optional[np.ndarray] = None

    @property
    def eligible(self) -> bool:
        return self.data.ndim >= 2

    @property
    def reshape_rule(self) -> Optional[tuple[int, int]]:
        if not self.eligible:
            return None
        if self.is_dense:
            return self.data.shape[0], int(np.prod(self.data.shape[1:]))
        n = self.data.shape[0]
        return self.data.size // n, n

    def to_components(self, arr: np.ndarray) -> np.ndarray:
        if self.is_dense:
            return arr.reshape(arr.shape[0], -1)
        return arr.reshape(arr.shape[0], -1).T

    def from_components(self, mat: np.ndarray) -> np.ndarray:
        if self.is_dense:
            return mat.reshape(self.data.shape)
        return np.ascontiguousarray(mat.T).reshape(self.data.shape)

    def zero_grad(self) -> None:
        self.grad = None


@dataclass
class LayerActivation:
    """Per-component outputs of one layer, shape (batch, components, *spatial)."""

    layer: int
    name: str
    values: np.ndarray

    @property
    def components(self) -> int:
        return self.values.shape[1]


class Layer:
    name = "layer"
    params: list[ParamTensor] = []

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape


class Conv2d(Layer):
    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, padding=0, dtype=np.float32):
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = ParamTensor(f"{name}.weight", np.zeros((out_channels, in_channels, kernel, kernel), dtype))
        self.bias = ParamTensor(f"{name}.bias", np.zeros(out_channels, dtype))
        self.params = [self.weight, self.bias]

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.name}: input {h}x{w} too small for kernel {k}")
        return self.out_channels, ho, wo

    def forward(self, x, train):
        b, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias.data
        self._cache = (x.shape, cols, ho, wo)
        return np.ascontiguousarray(out.reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, dout):
        (b, c, h, w), cols, ho, wo = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        self.weight.grad = (dmat.T @ cols).reshape(self.weight.data.shape)
        self.bias.grad = dmat.sum(axis=0)
        dcols = (dmat @ wmat).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class BatchNorm2d(Layer):
    def __init__(self, name, channels, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=np.float32):
        self.name = name
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = ParamTensor(f"{name}.weight", np.ones(channels, dtype))
        self.bias = ParamTensor(f"{name}.bias", np.zeros(channels, dtype))
        self.params = [self.weight, self.bias]
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, train):
        shape = (1, -1, 1, 1)
        if train:
            n = x.size // x.shape[1]
            mean = x.mean(axis=(0, 2, 3))
            centred = x - mean.reshape(shape)
            var = (centred * centred).mean(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centred * inv_std.reshape(shape)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            unbiased = var * (n / max(n - 1, 1))
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            self._cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shape)) * inv_std.reshape(shape)
        return xhat * self.weight.data.reshape(shape) + self.bias.data.reshape(shape)

    def backward(self, dout):
        xhat, inv_std = self._cache
        shape = (1, -1, 1, 1)
        n = dout.size // dout.shape[1]
        self.weight.grad = (dout * xhat).sum(axis=(0, 2, 3))
        self.bias.grad = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.weight.data.reshape(shape)
        sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        return (inv_std.reshape(shape) / n) * (n * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name
        self.params = []

    def forward(self, x, train):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dout):
        return np.where(self._mask, dout, dout.dtype.type(0))


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self.params = []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, name, in_features, out_features, dtype=np.float32):
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.weight = ParamTensor(f"{name}.weight", np.zeros((in_features, out_features), dtype), is_dense=True)
        self.bias = ParamTensor(f"{name}.bias", np.zeros(out_features, dtype), is_dense=True)
        self.params = [self.weight, self.bias]

    @property
    def fan_in(self) -> int:
        return self.in_features

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ValueError(f"{self.name}: expected input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, train):
        self._x = x
        return x @ self.weight.data + self.bias.data

    def backward(self, dout):
        self.weight.grad = self._x.T @ dout
        self.bias.grad = dout.sum(axis=0)
        return dout @ self.weight.data.T


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[np.arange(b), labels].astype(np.float64).mean())
    dlogits = exp / total
    dlogits[np.arange(b), labels] -= 1
    return loss, dlogits / logits.dtype.type(b)


# ---------------------------------------------------------------- model specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | bn | relu | flatten | dense
    size: int = 0  # output channels / units
    kernel: int = 3
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def param_count(self) -> int:
        total = 0
        shape = self.input_shape
        for spec in self.layers:
            if spec.kind == "conv":
                total += spec.size * shape[0] * spec.kernel**2 + spec.size
                h = (shape[1] + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (shape[2] + 2 * spec.padding - spec.kernel) // spec.stride + 1
                shape = (spec.size, h, w)
            elif spec.kind == "bn":
                total += 2 * shape[0]
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "dense":
                total += shape[0] * spec.size + spec.size
                shape = (spec.size,)
        return total


def basic_cnn(classes: int = 10, width: int = 32, input_shape=(3, 32, 32)) -> ModelSpec:
    """Three stride-2 3x3 conv/BN/ReLU blocks and a dense classifier (24,714 parameters at defaults)."""
    layers = []
    for _ in range(3):
        layers += [LayerSpec("conv", width, 3, 2, 1), LayerSpec("bn"), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", classes)]
    return ModelSpec("basic_cnn", tuple(input_shape), tuple(layers))


def small_cnn(classes: int = 10, width: int = 8, input_shape=(3, 16, 16)) -> ModelSpec:
    layers = (
        LayerSpec("conv", width, 3, 2, 1),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("conv", width, 3, 2, 1),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", classes),
    )
    return ModelSpec("small_cnn", tuple(input_shape), layers)


def linear_probe(classes: int = 10, input_shape=(3, 32, 32)) -> ModelSpec:
    return ModelSpec("linear", tuple(input_shape), (LayerSpec("flatten"), LayerSpec("dense", classes)))


MODELS = {"basic_cnn": basic_cnn, "small_cnn": small_cnn, "linear": linear_probe}


def model_spec(name: str, classes: int = 10, input_shape=None) -> ModelSpec:
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODELS)}")
    kwargs = {"classes": classes}
    if input_shape is not None:
        kwargs["input_shape"] = tuple(input_shape)
    return MODELS[name](**kwargs)


class Model:
    """Sequential stack; records ReLU outputs as the per-layer representations."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = []
        shape = tuple(spec.input_shape)
        counts: dict[str, int] = {}
        for ls in spec.layers:
            idx = counts[ls.kind] = counts.get(ls.kind, 0) + 1
            name = f"{ls.kind}{idx}"
            if ls.kind == "conv":
                layer = Conv2d(name, shape[0], ls.size, ls.kernel, ls.stride, ls.padding, dtype=self.dtype)
            elif ls.kind == "bn":
                layer = BatchNorm2d(name, shape[0], dtype=self.dtype)
            elif ls.kind == "relu":
                layer = ReLU(name)
            elif ls.kind == "flatten":
                layer = Flatten(name)
            elif ls.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"{name}: dense layer needs a flat input, got {shape}")
                layer = Dense(name, shape[0], ls.size, dtype=self.dtype)
            else:
                raise ValueError(f"unknown layer kind {ls.kind!r}")
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.output_shape = shape
        self.activations: list[LayerActivation] = []

    @property
    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params)

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {self.spec.input_shape}")
        self.activations = []
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train)
            if isinstance(layer, ReLU):
                self.activations.append(LayerActivation(i, layer.name, x))
        return x

    def backward(self, dlogits: np.ndarray) -> None:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)

    def loss_and_grad(self, x, labels) -> tuple[float, np.ndarray]:
        """Training-mode forward, loss, and backward; fills `grad` on every parameter."""
        logits = self.forward(x, train=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, logits


def init_params(model: Model, seed: int) -> Model:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit BN scale; fully set by `seed`."""
    rng = make_rng(seed, STREAM_INIT)
    for layer in model.layers:
        if isinstance(layer, (Conv2d, Dense)):
            bound = math.sqrt(1.0 / layer.fan_in)
            w = layer.weight.data
            layer.weight.data = rng.uniform(-bound, bound, size=w.shape).astype(w.dtype)
            layer.bias.data = np.zeros_like(layer.bias.data)
        elif isinstance(layer, BatchNorm2d):
            layer.weight.data = np.ones_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)
            layer.running_mean = np.zeros_like(layer.running_mean)
            layer.running_var = np.ones_like(layer.running_var)
    return model


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    return init_params(Model(spec, dtype=dtype), seed)


# ---------------------------------------------------------------- parameter files

PARAM_MAGIC = b"OGPT"
PARAM_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_params(model: Model, path) -> None:
    """Little-endian dump: magic, version, tensor table (name, dtype, shape), then payloads in order."""
    params = model.params
    head = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        head.append(struct.pack("<H", len(name)) + name)
        head.append(struct.pack("<BB", _CODES[p.data.dtype], p.data.ndim))
        head.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        for p in params:
            fh.write(p.data.astype(_DTYPES[_CODES[p.data.dtype]], copy=False).tobytes(order="C"))


def load_params(model: Model, path) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != PARAM_MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    off = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        table.append((name, _DTYPES[code], shape))
    by_name = {p.name: p for p in model.params}
    if [t[0] for t in table] != list(by_name):
        raise ValueError("parameter file does not match model layout")
    for name, dtype, shape in table:
        size = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        p = by_name[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return model
