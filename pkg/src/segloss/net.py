"""A miniature segmentation network: stacked 3x3 same-padding convolutions.

Channel plan 3 -> 16 -> 16 -> C with rectifier activations except the final
linear layer.  No downsampling, so output spatial dims always equal the
input's and the loss under test is isolated from any resampling machinery.
Forward and backward are explicit (im2col + matmul) and float64 throughout
so the gradcheck suite can verify them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid3


@dataclass(eq=False)
class ConvLayer:
    weights: np.ndarray  # (k, k, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    relu: bool

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError(f"conv weights must be (k, k, c_in, c_out), got {self.weights.shape}")
        if self.weights.shape[0] % 2 == 0:
            raise ValueError("kernel size must be odd for same-padding")
        if self.bias.shape != (self.weights.shape[3],):
            raise ValueError("bias length must equal output channels")


class TinyNet:
    def __init__(self, layers: list[ConvLayer]):
        if not layers:
            raise ValueError("TinyNet needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if prev.weights.shape[3] != cur.weights.shape[2]:
                raise ValueError("layer channel plan mismatch")
        self.layers = layers

    @classmethod
    def create(
        cls,
        in_channels: int,
        classes: int,
        hidden: tuple[int, ...] = (16, 16),
        kernel: int = 3,
        seed: int = 0,
    ) -> "TinyNet":
        """He-initialized stack; all hidden layers rectified, final linear."""
        rng = np.random.default_rng(seed)
        plan = (in_channels, *hidden, classes)
        layers = []
        for idx in range(len(plan) - 1):
            c_in, c_out = plan[idx], plan[idx + 1]
            std = np.sqrt(2.0 / (kernel * kernel * c_in))
            weights = rng.normal(0.0, std, (kernel, kernel, c_in, c_out))
            layers.append(
                ConvLayer(weights, np.zeros(c_out), relu=idx < len(plan) - 2)
            )
        return cls(layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].weights.shape[3]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list: w0, b0, w1, b1, ...  Arrays are live views."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    h, w, c = x.shape
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((h, w, k * k * c))
    for n, (di, dj) in enumerate((di, dj) for di in range(k) for dj in range(k)):
        cols[:, :, n * c : (n + 1) * c] = xp[di : di + h, dj : dj + w]
    return cols.reshape(h * w, k * k * c)


def _col2im(dcols: np.ndarray, h: int, w: int, c: int, k: int) -> np.ndarray:
    pad = k // 2
    acc = np.zeros((h + 2 * pad, w + 2 * pad, c))
    dcols = dcols.reshape(h, w, k * k * c)
    for n, (di, dj) in enumerate((di, dj) for di in range(k) for dj in range(k)):
        acc[di : di + h, dj : dj + w] += dcols[:, :, n * c : (n + 1) * c]
    return acc[pad : pad + h, pad : pad + w]


@dataclass(eq=False)
class _LayerCache:
    cols: np.ndarray
    pre: np.ndarray
    in_shape: tuple[int, int, int]


@dataclass(eq=False)
class NetCache:
    layers: list[_LayerCache]
    net: TinyNet


def net_forward(net: TinyNet, image: Grid3) -> Grid3:
    out, _ = _forward(net, image, keep=False)
    return out


def net_forward_cached(net: TinyNet, image: Grid3) -> tuple[Grid3, NetCache]:
    """Forward pass retaining the per-layer state net_backward consumes."""
    return _forward(net, image, keep=True)


def _forward(net: TinyNet, image: Grid3, keep: bool):
    if image.channels != net.in_channels:
        raise ValueError(
            f"image has {image.channels} channels, net expects {net.in_channels}"
        )
    x = image.data
    h, w = x.shape[:2]
    caches = []
    for layer in net.layers:
        k = layer.weights.shape[0]
        c_out = layer.weights.shape[3]
        cols = _im2col(x, k)
        pre = (cols @ layer.weights.reshape(-1, c_out) + layer.bias).reshape(
            h, w, c_out
        )
        if keep:
            caches.append(_LayerCache(cols, pre, x.shape))
        x = np.maximum(pre, 0.0) if layer.relu else pre
    out = Grid3(x)
    return (out, NetCache(caches, net)) if keep else (out, None)


def net_backward(
    net: TinyNet, cache: NetCache, grad_out: Grid3
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact gradients of the cached forward pass.

    Returns (parameter gradients aligned with net.parameters(), gradient
    w.r.t. the input image).
    """
    if cache is None or cache.net is not net or len(cache.layers) != len(net.layers):
        raise ValueError("cache does not belong to this net (run net_forward_cached)")
    g = grad_out.data
    if g.shape != cache.layers[-1].pre.shape:
        raise ValueError(
            f"grad_out shape {g.shape} does not match net output "
            f"{cache.layers[-1].pre.shape}"
        )
    param_grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        lc = cache.layers[idx]
        k = layer.weights.shape[0]
        c_out = layer.weights.shape[3]
        if layer.relu:
            g = g * (lc.pre > 0.0)
        g_mat = g.reshape(-1, c_out)
        param_grads[2 * idx] = (lc.cols.T @ g_mat).reshape(layer.weights.shape)
        param_grads[2 * idx + 1] = g_mat.sum(axis=0)
        dcols = g_mat @ layer.weights.reshape(-1, c_out).T
        h, w, c_in = lc.in_shape
        g = _col2im(dcols, h, w, c_in, k)
    return param_grads, g
