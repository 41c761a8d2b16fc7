"""Four-layer convolutional backbone and head, in plain numpy.

Layout is NHWC. Convolution weights have shape ``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._errors import FedscopeError

WEIGHTS_FORMAT_VERSION = 1
TOTAL_STRIDE = 8


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel: int
    c_in: int
    c_out: int
    stride: int
    pad: int
    relu: bool


def architecture(n_classes: int = 5) -> tuple[LayerSpec, ...]:
    return (
        LayerSpec("L1", 3, 3, 8, 2, 1, True),
        LayerSpec("L2", 3, 8, 16, 2, 1, True),
        LayerSpec("L3", 3, 16, 32, 2, 1, True),
        LayerSpec("L4", 1, 32, 5 + n_classes, 1, 0, False),
    )


@dataclass
class Layer:
    name: str
    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "Layer":
        return Layer(self.name, self.weight.copy(), self.bias.copy())


class ModelParams:
    """Ordered named layers; the unit that gets trained, averaged and frozen."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, key) -> Layer:
        if isinstance(key, str):
            for layer in self.layers:
                if layer.name == key:
                    return layer
            raise KeyError(key)
        return self.layers[key]

    def __repr__(self) -> str:
        shapes = ", ".join(f"{l.name}{l.weight.shape}" for l in self.layers)
        return f"ModelParams({shapes})"

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].bias.shape[0] - 5

    def copy(self) -> "ModelParams":
        return ModelParams([l.copy() for l in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([Layer(l.name, np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers])

    def arrays(self) -> Iterator[np.ndarray]:
        for l in self.layers:
            yield l.weight
            yield l.bias

    def shape_signature(self) -> tuple:
        return tuple((l.name, l.weight.shape, l.bias.shape) for l in self.layers)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality."""
        if self.shape_signature() != other.shape_signature():
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def digest(self) -> str:
        h = hashlib.sha256()
        for l in self.layers:
            h.update(l.name.encode())
            for a in (l.weight, l.bias):
                h.update(str(a.shape).encode())
                h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(seed: int = 0, n_classes: int = 5) -> ModelParams:
    """He-scaled uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in architecture(n_classes):
        fan_in = spec.kernel * spec.kernel * spec.c_in
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(spec.kernel, spec.kernel, spec.c_in, spec.c_out))
        layers.append(Layer(spec.name, w, np.zeros(spec.c_out)))
    # small head: start near "no object"
    head = layers[-1]
    head.weight *= 0.1
    head.bias[4] = -4.0
    return ModelParams(layers)


# -- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, tuple[int, int]]:
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    sn, sh, sw, sc = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return cols.reshape(n * ho * wo, k * k * c), (ho, wo)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int, out_hw: tuple[int, int]) -> np.ndarray:
    n, h, w, c = x_shape
    ho, wo = out_hw
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    # fixed (i, j) order keeps accumulation deterministic
    for i in range(k):
        for j in range(k):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad, :]
    return dx


def check_input_shape(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise FedscopeError("bad-input-shape", f"expected (N, H, W, 3) or (H, W, 3), got {x.shape}")
    if x.shape[1] % TOTAL_STRIDE or x.shape[2] % TOTAL_STRIDE or x.shape[1] == 0 or x.shape[2] == 0:
        raise FedscopeError("bad-input-shape", f"H and W must be positive multiples of {TOTAL_STRIDE}, got {x.shape[1:3]}")
    return x


def forward_cached(p: ModelParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass returning raw head output ``(N, S, S, 5+K)`` and a backprop cache."""
    x = check_input_shape(x)
    specs = architecture(p.n_classes)
    cache = []
    a = x
    for spec, layer in zip(specs, p):
        if layer.weight.shape != (spec.kernel, spec.kernel, spec.c_in, spec.c_out):
            raise FedscopeError("bad-params", f"{layer.name} has shape {layer.weight.shape}")
        cols, (ho, wo) = _im2col(a, spec.kernel, spec.stride, spec.pad)
        z = cols @ layer.weight.reshape(-1, spec.c_out) + layer.bias
        z = z.reshape(a.shape[0], ho, wo, spec.c_out)
        out = np.maximum(z, 0.0) if spec.relu else z
        cache.append((spec, a.shape, cols, (ho, wo), z))
        a = out
    return a, cache


def forward(p: ModelParams, x: np.ndarray) -> np.ndarray:
    """Raw head output; a single ``(H, W, 3)`` image gives ``(S, S, 5+K)``."""
    single = np.asarray(x).ndim == 3
    out, _ = forward_cached(p, x)
    return out[0] if single else out


def backward_cached(p: ModelParams, cache: list, dout: np.ndarray, trainable: Sequence[bool] | None = None) -> ModelParams:
    """Reverse-mode gradient of a scalar loss given ``dL/d(head output)``.

    Layers marked not trainable get zero gradients; backprop stops below the
    lowest trainable layer.
    """
    n_layers = len(p)
    if trainable is None:
        trainable = [True] * n_layers
    grads = p.zeros_like()
    lowest = min((i for i, t in enumerate(trainable) if t), default=n_layers)
    g = dout
    for i in range(n_layers - 1, lowest - 1, -1):
        spec, x_shape, cols, out_hw, z = cache[i]
        layer = p[i]
        if spec.relu:
            g = g * (z > 0.0)
        g2 = g.reshape(-1, spec.c_out)
        if trainable[i]:
            grads[i].weight[...] = (cols.T @ g2).reshape(layer.weight.shape)
            grads[i].bias[...] = g2.sum(axis=0)
        if i > lowest:
            dcols = g2 @ layer.weight.reshape(-1, spec.c_out).T
            g = _col2im(dcols, x_shape, spec.kernel, spec.stride, spec.pad, out_hw)
    return grads


# -- weights file --------------------------------------------------------------


def save_weights(path, models: ModelParams | Sequence[ModelParams]) -> None:
    """Write one model, or several ensemble members, to an ``.npz`` file.

    Keys are ``m<i>/<layer>.weight`` / ``.bias``; arrays are stored row-major
    float64, so loading is bit-exact.
    """
    if isinstance(models, ModelParams):
        models = [models]
    arrays = {"format_version": np.array(WEIGHTS_FORMAT_VERSION), "n_members": np.array(len(models))}
    for m, model in enumerate(models):
        arrays[f"m{m}/layer_order"] = np.array(model.names)
        for layer in model:
            arrays[f"m{m}/{layer.name}.weight"] = np.ascontiguousarray(layer.weight, dtype=np.float64)
            arrays[f"m{m}/{layer.name}.bias"] = np.ascontiguousarray(layer.bias, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path) -> list[ModelParams]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != WEIGHTS_FORMAT_VERSION:
            raise FedscopeError("bad-weights-version", f"{version} (expected {WEIGHTS_FORMAT_VERSION})")
        models = []
        for m in range(int(data["n_members"])):
            names = [str(n) for n in data[f"m{m}/layer_order"]]
            models.append(
                ModelParams([Layer(n, data[f"m{m}/{n}.weight"].copy(), data[f"m{m}/{n}.bias"].copy()) for n in names])
            )
    return models
