"""Minimal NHWC layer stack with explicit forward/backward passes.

Tensors follow the (batch, height, width, channels) convention. During
``forward`` each layer caches exactly what its ``backward`` needs;
``backward`` takes the gradient w.r.t. the layer output, fills
``self.grads`` for its parameters, and returns the gradient w.r.t. the
layer input. There is no autograd: the chain rule is spelled out per
layer and verified against finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class Layer:
    """Base layer: named, with trainable ``params`` and persistent ``state``."""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Conv2D(Layer):
    """k x k convolution, stride 1, zero 'same' padding."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        init: str = "he",
    ):
        super().__init__(name)
        if kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        rng = rng or np.random.default_rng(0)
        fan_in = kernel * kernel * in_channels
        shape = (kernel, kernel, in_channels, out_channels)
        if init == "he":
            w = he_normal(rng, shape, fan_in, dtype)
        elif init == "glorot":
            w = glorot_uniform(rng, shape, fan_in, kernel * kernel * out_channels, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params = {"w": w, "b": np.zeros(out_channels, dtype=dtype)}

    def forward(self, x, training=False):
        b, h, w, c = x.shape
        if c != self.in_channels:
            raise ValueError(
                f"{self.name}: expected {self.in_channels} input channels, got {c}"
            )
        k = self.kernel
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        self._xp = xp
        self._x_shape = x.shape
        wgt = self.params["w"]
        y = np.zeros((b * h * w, self.out_channels), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                xs = xp[:, di : di + h, dj : dj + w, :].reshape(-1, c)
                y += xs @ wgt[di, dj]
        y += self.params["b"]
        return y.reshape(b, h, w, self.out_channels)

    def backward(self, grad):
        b, h, w, c = self._x_shape
        k = self.kernel
        p = k // 2
        gf = grad.reshape(-1, self.out_channels)
        wgt = self.params["w"]
        dw = np.empty_like(wgt)
        dxp = np.zeros_like(self._xp)
        for di in range(k):
            for dj in range(k):
                xs = self._xp[:, di : di + h, dj : dj + w, :].reshape(-1, c)
                dw[di, dj] = xs.T @ gf
                dxp[:, di : di + h, dj : dj + w, :] += (gf @ wgt[di, dj].T).reshape(b, h, w, c)
        self.grads = {"w": dw, "b": gf.sum(axis=0)}
        if p == 0:
            return dxp
        return np.ascontiguousarray(dxp[:, p : p + h, p : p + w, :])


class BatchNorm(Layer):
    """Per-channel batch normalisation with running statistics.

    Training mode normalizes with batch statistics and updates the running
    averages; inference mode uses the running averages. ``backward`` works
    in both modes (inference-mode gradients are needed for activation-map
    extraction on a frozen model).
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.99, eps: float = 1e-3, dtype=np.float32):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
        }
        self.state = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x, training=False):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.state["running_mean"] = (
                m * self.state["running_mean"] + (1.0 - m) * mean
            ).astype(x.dtype)
            self.state["running_var"] = (
                m * self.state["running_var"] + (1.0 - m) * var
            ).astype(x.dtype)
        else:
            mean = self.state["running_mean"]
            var = self.state["running_var"]
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * invstd
        self._xhat = xhat
        self._invstd = invstd
        self._train_mode = training
        self._n = int(np.prod([x.shape[a] for a in axes]))
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        axes = tuple(range(grad.ndim - 1))
        xhat = self._xhat
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        gamma = self.params["gamma"]
        if not self._train_mode:
            return grad * gamma * self._invstd
        n = self._n
        return (gamma * self._invstd / n) * (n * grad - dbeta - xhat * dgamma)


class ReLU(Layer):
    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._mask


class Sigmoid(Layer):
    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x, training=False):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        y = self._out
        return grad * y * (1.0 - y)


class MaxPool2(Layer):
    """2x2 max pooling with stride 2. Input spatial dims must be even."""

    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x, training=False):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"{self.name}: spatial dims must be even, got {(h, w)}")
        xr = (
            x.reshape(b, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, h // 2, w // 2, c, 4)
        )
        self._idx = xr.argmax(axis=-1)
        self._x_shape = x.shape
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        b, h, w, c = self._x_shape
        flat = np.zeros((b, h // 2, w // 2, c, 4), dtype=grad.dtype)
        np.put_along_axis(flat, self._idx[..., None], grad[..., None], axis=-1)
        return (
            flat.reshape(b, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, h, w, c)
        )


class UpsampleNearest2(Layer):
    """Nearest-neighbor x2 upsampling."""

    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x, training=False):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        b, h2, w2, c = grad.shape
        return grad.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


class GlobalAvgPool(Layer):
    """Spatial mean per channel: (B, H, W, C) -> (B, C)."""

    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x, training=False):
        self._spatial = x.shape[1] * x.shape[2]
        self._x_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        b, h, w, c = self._x_shape
        g = grad[:, None, None, :] / self._spatial
        return np.broadcast_to(g, (b, h, w, c)).astype(grad.dtype, copy=True)


class Dense(Layer):
    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.params = {
            "w": glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        self.grads = {"w": self._x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.params["w"].T


class Softmax(Layer):
    """Row-wise softmax over the last axis."""

    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x, training=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        self._out = y
        return y

    def backward(self, grad):
        y = self._out
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


class Sequential:
    """Ordered layer container with whole-stack forward/backward."""

    def __init__(self, layers: list[Layer]):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def forward_collect(self, x, training=False) -> list[np.ndarray]:
        """Forward pass returning every layer's output, in order."""
        outs = []
        for layer in self.layers:
            x = layer.forward(x, training=training)
            outs.append(x)
        return outs

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def backward_to(self, grad, index: int):
        """Backpropagate to the output of ``self.layers[index]``.

        Requires a prior forward pass through the trailing layers.
        """
        for layer in reversed(self.layers[index + 1 :]):
            grad = layer.backward(grad)
        return grad

    def index_of(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"no layer named {name!r}")

    def trainable(self):
        for layer in self.layers:
            for key in layer.params:
                yield f"{layer.name}.{key}", layer, key

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for key, val in layer.params.items():
                out[f"{layer.name}.{key}"] = val.copy()
            for key, val in layer.state.items():
                out[f"{layer.name}.{key}"] = val.copy()
        return out

    def load_state_dict(self, entries: dict[str, np.ndarray]) -> None:
        """Assign parameters and buffers, strict on names and shapes."""
        expected = {}
        for layer in self.layers:
            for key in layer.params:
                expected[f"{layer.name}.{key}"] = (layer.params, key)
            for key in layer.state:
                expected[f"{layer.name}.{key}"] = (layer.state, key)
        missing = sorted(set(expected) - set(entries))
        unexpected = sorted(set(entries) - set(expected))
        if missing or unexpected:
            raise ValueError(
                f"state mismatch: missing {missing or 'none'}, unexpected {unexpected or 'none'}"
            )
        for name, arr in entries.items():
            container, key = expected[name]
            if container[key].shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: have {container[key].shape}, got {arr.shape}"
                )
            container[key] = np.array(arr, copy=True)
