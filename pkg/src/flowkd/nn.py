"""Layers, layer graphs and the CNN-1 / MLP model families."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad


class Layer:
    kind = "layer"

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: Tensor, train: bool) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None, rng=None):
        if kernel_size not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, train):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / in_features), (in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x, train):
        return x @ self.weight + self.bias


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        return T.relu(x)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        dtype = T.get_default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def forward(self, x, train):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            train=train, momentum=self.momentum, eps=self.eps)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // 2, w // 2)

    def forward(self, x, train):
        return T.max_pool2d(x)


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, train):
        return T.global_avg_pool(x)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train):
        return T.flatten(x)


_LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, Dense, ReLU, BatchNorm, MaxPool2d, GlobalAvgPool, Flatten)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    cls = _LAYER_TYPES[spec.pop("kind")]
    return cls(**spec)


class LayerGraph:
    """An ordered stack of layers with designated transfer points.

    ``transfer_points`` are indices into ``layers``; the output of each is
    exported (flattened to ``N x d``) as a representation for distillation.
    An optional classification ``head`` sits after the last transfer point
    and is not itself a transfer point.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[Layer],
                 transfer_points: Sequence[int], head: Dense | None = None, arch: str = "custom"):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.transfer_points = [int(t) for t in transfer_points]
        self.head = head
        self.arch = arch
        tp = self.transfer_points
        if any(b <= a for a, b in zip(tp, tp[1:])):
            raise ValueError("transfer points must be strictly increasing")
        if tp and not (0 <= tp[0] and tp[-1] < len(self.layers)):
            raise ValueError("transfer point out of range")
        self._shapes = [self.input_shape]
        for layer in self.layers:
            self._shapes.append(layer.output_shape(self._shapes[-1]))
        if head is not None and self.representation_dim(len(tp) - 1) != head.in_features:
            raise ValueError("head input does not match the final representation")
        ids = [id(p) for p in self.parameters().values()]
        if len(ids) != len(set(ids)):
            raise ValueError("a parameter is registered more than once")

    # -- registry ----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"layers.{i}.{name}"] = p
        if self.head is not None:
            for name, p in self.head.params().items():
                out[f"head.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"layers.{i}.{name}"] = b
        return out

    def n_params(self, include_head: bool = False) -> int:
        return sum(p.size for name, p in self.parameters().items()
                   if include_head or not name.startswith("head."))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def copy(self) -> "LayerGraph":
        return copy.deepcopy(self)

    @property
    def n_transfer_points(self) -> int:
        return len(self.transfer_points)

    def representation_dim(self, point: int) -> int:
        return int(np.prod(self._shapes[self.transfer_points[point] + 1]))

    # -- evaluation --------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match {self.input_shape}")

    def forward(self, x, upto: int | None = None, train: bool = False) -> Tensor:
        """Activation after layer ``upto`` (inclusive); the whole stack by default."""
        x = T.as_tensor(x)
        self._check_input(x)
        stop = len(self.layers) - 1 if upto is None else upto
        for layer in self.layers[: stop + 1]:
            x = layer.forward(x, train)
        return x

    def run(self, x, train: bool = False) -> tuple[list[Tensor], Tensor | None]:
        """Flattened transfer-point representations and head logits (or None)."""
        x = T.as_tensor(x)
        self._check_input(x)
        reps = []
        wanted = set(self.transfer_points)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train)
            if i in wanted:
                reps.append(T.flatten(x) if x.ndim > 2 else x)
        logits = self.head.forward(reps[-1], train) if self.head is not None else None
        return reps, logits

    def representations(self, x: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
        """Eval-mode representations at every transfer point, as numpy arrays."""
        chunks: list[list[np.ndarray]] = [[] for _ in self.transfer_points]
        with no_grad():
            for start in range(0, len(x), batch_size):
                reps, _ = self.run(x[start:start + batch_size], train=False)
                for store, r in zip(chunks, reps):
                    store.append(r.data)
        return [np.concatenate(c, axis=0) for c in chunks]

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        if self.head is None:
            raise ValueError("model has no classification head")
        out = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.run(x[start:start + batch_size], train=False)[1].data)
        return np.concatenate(out, axis=0)

    # -- description -------------------------------------------------------
    def describe(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
            "transfer_points": self.transfer_points,
            "head": None if self.head is None else self.head.spec(),
        }

    @classmethod
    def from_description(cls, desc: dict) -> "LayerGraph":
        layers = [layer_from_spec(s) for s in desc["layers"]]
        head = layer_from_spec(desc["head"]) if desc.get("head") else None
        return cls(desc["input_shape"], layers, desc["transfer_points"], head=head, arch=desc.get("arch", "custom"))


# -- model families ----------------------------------------------------------

WIDTH_MULTIPLIER = {"l": 0.5, "": 1.0, "a": 2.0, "h": 4.0}
CNN1_WIDTHS = (8, 16, 32, 64)
MLP_WIDTHS = (64, 32, 16)


def _parse_arch(arch: str) -> tuple[str, float]:
    family, _, suffix = arch.lower().partition("-")
    if family not in ("cnn1", "mlp") or suffix not in WIDTH_MULTIPLIER:
        raise ValueError(f"unknown architecture '{arch}'")
    return family, WIDTH_MULTIPLIER[suffix]


def build_model(arch: str, input_shape: Sequence[int], n_classes: int | None = None,
                rng: np.random.Generator | None = None) -> LayerGraph:
    """Build a model of the CNN-1 or MLP family.

    ``arch`` is ``cnn1``/``mlp`` optionally suffixed ``-l`` (half width),
    ``-a`` (double width, auxiliary) or ``-h`` (quadruple width).  CNN-1 is
    three conv-bn-relu blocks (pooled, pooled, global-average-pooled) and a
    64-unit linear embedding, with one transfer point per block.
    """
    family, mult = _parse_arch(arch)
    rng = rng if rng is not None else np.random.default_rng(0)
    input_shape = tuple(int(s) for s in input_shape)
    layers: list[Layer] = []
    points: list[int] = []
    if family == "cnn1":
        if len(input_shape) != 3:
            raise ValueError("cnn1 models expect C x H x W inputs")
        c1, c2, c3, emb = (max(1, int(round(w * mult))) for w in CNN1_WIDTHS)
        cin = input_shape[0]
        for cout, pool in ((c1, MaxPool2d), (c2, MaxPool2d), (c3, GlobalAvgPool)):
            layers += [Conv2d(cin, cout, 3, rng=rng), BatchNorm(cout), ReLU(), pool()]
            points.append(len(layers) - 1)
            cin = cout
        layers.append(Dense(c3, emb, rng=rng))
        points.append(len(layers) - 1)
    else:
        if len(input_shape) != 1:
            raise ValueError("mlp models expect flat vector inputs")
        widths = [max(1, int(round(w * mult))) for w in MLP_WIDTHS]
        fin = input_shape[0]
        for j, width in enumerate(widths):
            layers.append(Dense(fin, width, rng=rng))
            if j < len(widths) - 1:
                layers.append(ReLU())
            points.append(len(layers) - 1)
            fin = width
    head = None
    if n_classes:
        head = Dense(layers[points[-1]].output_shape(_shape_before(layers, points[-1], input_shape))[0],
                     n_classes, rng=rng)
    return LayerGraph(input_shape, layers, points, head=head, arch=arch)


def _shape_before(layers: Sequence[Layer], index: int, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = input_shape
    for layer in layers[:index]:
        shape = layer.output_shape(shape)
    return shape
