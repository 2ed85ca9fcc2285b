"""A small numpy convolutional classifier whose penultimate dense layer is
used as a feature extractor.

Layers operate on batches shaped ``(N, C, H, W)`` until the first dense
layer, which flattens. The network is trained as an ordinary softmax
classifier; afterwards :func:`extract_features` returns the post-ReLU
activations of the feature layer for any input, including people the
network never saw.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyGalleryError, LabelError, LayerShapeError

log = logging.getLogger(__name__)

INIT_SCALE = 0.1


def conv_output_size(W: int, K: int, P: int, S: int) -> int:
    """Output side length ``1 + (W - K + 2P) / S`` of a convolution.

    Raises LayerShapeError when the stride does not tile the padded input
    exactly or the kernel is larger than the padded input.
    """
    if W < 1 or K < 1 or S < 1 or P < 0:
        raise LayerShapeError(f"invalid conv geometry W={W} K={K} P={P} S={S}")
    span = W - K + 2 * P
    if span < 0:
        raise LayerShapeError(f"kernel {K} larger than padded input {W + 2 * P}")
    if span % S:
        raise LayerShapeError(f"stride {S} does not divide W - K + 2P = {span}")
    return 1 + span // S


def relu(t):
    return np.maximum(np.asarray(t, dtype=np.float64), 0.0)


def maxpool(t, window: int) -> np.ndarray:
    """Max over non-overlapping ``window`` x ``window`` blocks of a 2-D array."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise LayerShapeError("maxpool expects a 2-D array")
    return MaxPool2D(window).forward(t[None, None])[0][0, 0]


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class Conv2D:
    kind = "conv"

    def __init__(self, channels_in, channels_out, kernel_size, stride=1, padding=0):
        self.channels_in = channels_in
        self.channels_out = channels_out
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.W = np.zeros((channels_out, channels_in, kernel_size, kernel_size))
        self.b = np.zeros(channels_out)

    def params(self):
        return {"W": self.W, "b": self.b}

    def init(self, rng):
        self.W[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, self.W.shape)
        self.b[...] = 0.0

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.channels_in:
            raise LayerShapeError(f"conv expects {self.channels_in} channels, got {c}")
        k, p, s = self.kernel_size, self.padding, self.stride
        return (self.channels_out, conv_output_size(h, k, p, s), conv_output_size(w, k, p, s))

    def _windows(self, x):
        p, s, k = self.padding, self.stride, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        return xp, sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x):
        self.output_shape(x.shape[1:])
        xp, win = self._windows(x)
        out = np.einsum("nchwij,ocij->nohw", win, self.W, optimize=True) + self.b[None, :, None, None]
        return out, (x.shape, xp.shape, win)

    def backward(self, dout, cache):
        x_shape, xp_shape, win = cache
        grads = {"W": np.einsum("nchwij,nohw->ocij", win, dout, optimize=True),
                 "b": dout.sum(axis=(0, 2, 3))}
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = dout.shape[2:]
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                    "nohw,oc->nchw", dout, self.W[:, :, i, j])
        dx = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else dxp
        return dx, grads


class ReLU:
    kind = "relu"

    def params(self):
        return {}

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask):
        return dout * mask, {}


class MaxPool2D:
    kind = "maxpool"

    def __init__(self, window):
        if window < 1:
            raise LayerShapeError("pool window must be positive")
        self.window = window

    def params(self):
        return {}

    def output_shape(self, shape):
        c, h, w = shape
        if h % self.window or w % self.window:
            raise LayerShapeError(f"pool window {self.window} does not divide {h}x{w}")
        return (c, h // self.window, w // self.window)

    def forward(self, x):
        n, c, h, w = x.shape
        self.output_shape((c, h, w))
        k = self.window
        blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // k, w // k, k * k)
        return blocks.max(axis=-1), (x.shape, blocks.argmax(axis=-1))

    def backward(self, dout, cache):
        (n, c, h, w), arg = cache
        k = self.window
        blocks = np.zeros((n, c, h // k, w // k, k * k))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        dx = blocks.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(n, c, h, w), {}


class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out):
        self.n_in = n_in
        self.n_out = n_out
        self.W = np.zeros((n_out, n_in))
        self.b = np.zeros(n_out)

    def params(self):
        return {"W": self.W, "b": self.b}

    def init(self, rng):
        self.W[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, self.W.shape)
        self.b[...] = 0.0

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.n_in:
            raise LayerShapeError(f"dense expects {self.n_in} inputs, got shape {shape}")
        return (self.n_out,)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise LayerShapeError(f"dense expects {self.n_in} inputs, got {flat.shape[1]}")
        return flat @ self.W.T + self.b, (x.shape, flat)

    def backward(self, dout, cache):
        shape, flat = cache
        grads = {"W": dout.T @ flat, "b": dout.sum(axis=0)}
        return (dout @ self.W).reshape(shape), grads


class Softmax:
    kind = "softmax"

    def params(self):
        return {}

    def output_shape(self, shape):
        if len(shape) != 1:
            raise LayerShapeError("softmax expects a flat vector")
        return shape

    def forward(self, x):
        return softmax(x), None


class Network:
    """Ordered layers ending in a softmax head.

    ``feature_layer_index`` points at the dense layer whose ReLU output is
    the feature vector; it must be followed by a ReLU and then only the
    classifier head (one dense layer and the softmax).
    """

    def __init__(self, layers, input_shape, feature_layer_index=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.feature_layer_index = feature_layer_index
        self.shapes = self._check()

    def _check(self):
        if not self.layers or self.layers[-1].kind != "softmax":
            raise LayerShapeError("network must end with a softmax layer")
        if any(layer.kind == "softmax" for layer in self.layers[:-1]):
            raise LayerShapeError("softmax may only appear as the last layer")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        f = self.feature_layer_index
        if f is not None:
            kinds = [layer.kind for layer in self.layers[f:]]
            if kinds != ["dense", "relu", "dense", "softmax"]:
                raise LayerShapeError(
                    f"feature layer must be dense -> relu -> dense -> softmax, got {kinds}")
        return shapes

    @property
    def feature_dimension(self):
        if self.feature_layer_index is None:
            return None
        return self.layers[self.feature_layer_index].n_out

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    def params(self):
        return [layer.params() for layer in self.layers]

    def init(self, seed):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng)
        return self

    def copy(self):
        return copy.deepcopy(self)

    def _batch(self, images):
        return self._as_batch(images)[0]

    def _as_batch(self, images):
        """Coerce one image or a batch to ``(N, *input_shape)``; flag singles."""
        x = np.asarray(images, dtype=np.float64)
        shape = self.input_shape
        if x.shape == shape:
            return x[None], True
        grey = len(shape) == 3 and shape[0] == 1
        if grey and x.shape == shape[1:]:
            return x[None, None], True
        if grey and x.ndim == 3 and x.shape[1:] == shape[1:]:
            return x[:, None], False
        if x.shape[1:] != shape:
            raise LayerShapeError(f"input shape {x.shape} does not match {shape}")
        return x, False

    def forward(self, images):
        """Run a batch; returns ``(logits, activations)``.

        ``activations[i]`` is the output of layer ``i``; logits are the input
        to the final softmax.
        """
        activations, _ = self._run(images)
        return activations[-2], activations

    def _run(self, images):
        x = self._batch(images)
        activations, caches = [], []
        for layer in self.layers:
            x, cache = layer.forward(x)
            activations.append(x)
            caches.append(cache)
        return activations, caches

    def predict(self, images):
        logits, _ = self.forward(images)
        return logits.argmax(axis=1)

    def loss(self, images, labels):
        logits, _ = self.forward(images)
        labels = np.asarray(labels)
        return float(-log_softmax(logits)[np.arange(labels.size), labels].mean())

    def gradients(self, images, labels):
        """Mean cross-entropy and its gradient for every parameter."""
        activations, caches = self._run(images)
        logits = activations[-2]
        labels = np.asarray(labels)
        n = labels.size
        logp = log_softmax(logits)
        loss = float(-logp[np.arange(n), labels].mean())
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        d /= n
        grads = [{} for _ in self.layers]
        for i in range(len(self.layers) - 2, -1, -1):
            d, grads[i] = self.layers[i].backward(d, caches[i])
        return loss, grads


def extract_features(net: Network, images) -> np.ndarray:
    """Post-ReLU activations of the feature layer.

    A single image returns a 1-D vector; a batch returns one row per image.
    """
    if net.feature_layer_index is None:
        raise LayerShapeError("network has no feature layer")
    x, single = net._as_batch(images)
    _, activations = net.forward(x)
    feats = activations[net.feature_layer_index + 1]
    return feats[0].copy() if single else feats.copy()


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def train(net: Network, images, labels, cfg: TrainingConfig = TrainingConfig()):
    """Mini-batch SGD on softmax cross-entropy.

    Returns a trained copy of ``net`` and the full-dataset loss before
    training and after each epoch (``epochs + 1`` entries).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyGalleryError("training set is empty")
    x = net._batch(images)
    if x.shape[0] != labels.size:
        raise LabelError(f"{x.shape[0]} images but {labels.size} labels")
    k = net.num_classes
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must be integers in [0, {k})")
    if np.unique(labels).size < 2:
        raise LabelError("training needs at least two classes")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    history = [net.loss(x, labels)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(labels.size)
        for start in range(0, labels.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, grads = net.gradients(x[batch], labels[batch])
            for params, g in zip(net.params(), grads):
                for name, w in params.items():
                    w -= cfg.learning_rate * g[name]
        history.append(net.loss(x, labels))
        log.debug("epoch %d loss %.6f", epoch + 1, history[-1])
    return net, history


def accuracy(net: Network, images, labels) -> float:
    return float((net.predict(images) == np.asarray(labels)).mean())


def default_network(num_classes: int, image_side: int = 32, feature_dim: int = 256,
                    channels=(4, 8), seed: int | None = 0) -> Network:
    """Two conv/ReLU/maxpool stages, a dense feature layer and a softmax head."""
    c1, c2 = channels
    pooled = image_side // 4
    layers = [
        Conv2D(1, c1, 3, padding=1), ReLU(), MaxPool2D(2),
        Conv2D(c1, c2, 3, padding=1), ReLU(), MaxPool2D(2),
        Dense(c2 * pooled * pooled, feature_dim), ReLU(),
        Dense(feature_dim, num_classes), Softmax(),
    ]
    net = Network(layers, (1, image_side, image_side), feature_layer_index=6)
    return net.init(seed) if seed is not None else net
