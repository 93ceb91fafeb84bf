"""Stateful layers: parameters, gradient buffers and the forward cache.

A layer's ``forward`` remembers what its ``backward`` needs, so a layer
can only backpropagate through its most recent forward call.  Gradients
land in ``layer.grads`` under the same keys as ``layer.params``.
"""
from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ConfigError, StateError
from .grelu import (GReluGrads, GReluParams, _positions, grelu_backward_input,
                    grelu_forward, grelu_param_grads)


class Layer:
    kind = "layer"
    decay_exempt = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def backward(self, out_grad):
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that still belongs in a checkpoint."""
        return {}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        return self._cache

    def __repr__(self):
        shapes = ", ".join(f"{k}={tuple(v.shape)}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: int = 1, bias: bool = True, rng=None):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self.params["weight"] = rng.uniform(
            -bound, bound, (out_channels, in_channels, kernel_size, kernel_size))
        if bias:
            self.params["bias"] = np.zeros(out_channels)
        self.padding = padding

    @property
    def out_channels(self) -> int:
        return self.params["weight"].shape[0]

    def forward(self, x, train=True):
        out, cols = K.conv2d_forward(x, self.params["weight"], self.params.get("bias"),
                                     self.padding, return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, out_grad):
        x, cols = self._need_cache()
        res = K.conv2d_backward(x, self.params["weight"], out_grad, self.padding, cols=cols,
                                with_bias="bias" in self.params)
        self.grads = res.param_grads
        return res.input_grad


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = K.BN_EPS, momentum: float = K.BN_MOMENTUM):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=True):
        out, self._cache = K.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], self.running_mean, self.running_var,
            "train" if train else "eval", self.eps, self.momentum)
        return out

    def backward(self, out_grad):
        res = K.batchnorm_backward(self._need_cache(), out_grad)
        self.grads = res.param_grads
        return res.input_grad


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, out_grad):
        return np.where(self._need_cache(), out_grad, 0.0)


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def forward(self, x, train=True):
        out, self._cache = K.maxpool2x2_forward(x)
        return out

    def backward(self, out_grad):
        return K.maxpool2x2_backward(self._need_cache(), out_grad)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        bound = np.sqrt(6.0 / (in_features + out_features)) if in_features + out_features else 0.0
        self.params["weight"] = rng.uniform(-bound, bound, (in_features, out_features))
        if bias:
            self.params["bias"] = np.zeros(out_features)

    def forward(self, x, train=True):
        self._cache = x
        return K.fc_forward(x, self.params["weight"], self.params.get("bias"))

    def backward(self, out_grad):
        res = K.fc_backward(self._need_cache(), self.params["weight"], out_grad,
                            with_bias="bias" in self.params)
        self.grads = res.param_grads
        return res.input_grad


class GReLU(Layer):
    """GReLU activation layer.

    Channel-shared by default: one :class:`GReluParams` serves every channel
    and position.  With ``per_channel=True`` each channel gets its own set.
    While ``frozen`` the layer skips parameter-gradient accumulation.
    """

    kind = "grelu"
    decay_exempt = True

    def __init__(self, params: GReluParams | None = None, channels: int = 1,
                 per_channel: bool = False, endpoint_mask=None, slope_mask=None):
        super().__init__()
        base = GReluParams.default() if params is None else params
        self.per_channel = per_channel
        self.sets = [base.copy() for _ in range(channels if per_channel else 1)]
        size = base.endpoints.size
        self.endpoint_mask = np.ones(size) if endpoint_mask is None else np.asarray(endpoint_mask, float)
        self.slope_mask = np.ones(size) if slope_mask is None else np.asarray(slope_mask, float)
        self.frozen = False
        self._sync_params()

    def _sync_params(self):
        # params expose the same arrays the GReluParams objects own
        if self.per_channel:
            self.params = {f"ch{c}.{k}": getattr(p, k) for c, p in enumerate(self.sets)
                           for k in ("endpoints", "slopes")}
        else:
            self.params = {"endpoints": self.sets[0].endpoints, "slopes": self.sets[0].slopes}

    @property
    def n(self) -> int:
        return self.sets[0].n

    def param_count(self) -> int:
        return sum(p.size for p in self.sets)

    def forward(self, x, train=True):
        if not self.per_channel:
            pos = _positions(x, self.sets[0])
            self._cache = (x, pos)
            return grelu_forward(x, self.sets[0], pos)
        self._check_channels(x)
        self._cache = (x, None)
        return np.stack([grelu_forward(x[:, c], p) for c, p in enumerate(self.sets)], axis=1)

    def _check_channels(self, x):
        if x.shape[1] != len(self.sets):
            raise ConfigError(f"per-channel GReLU has {len(self.sets)} sets, input has "
                              f"{x.shape[1]} channels")

    def backward(self, out_grad):
        x, pos = self._need_cache()
        if not self.per_channel:
            self.grads = {}
            if not self.frozen:
                g = grelu_param_grads(x, self.sets[0], out_grad, pos)
                self.grads = {"endpoints": g.d_endpoints, "slopes": g.d_slopes}
            return grelu_backward_input(x, self.sets[0], out_grad, pos)
        self._check_channels(x)
        self.grads = {}
        dx = np.empty_like(out_grad)
        for c, p in enumerate(self.sets):
            if not self.frozen:
                g = grelu_param_grads(x[:, c], p, out_grad[:, c])
                self.grads[f"ch{c}.endpoints"] = g.d_endpoints
                self.grads[f"ch{c}.slopes"] = g.d_slopes
            dx[:, c] = grelu_backward_input(x[:, c], p, out_grad[:, c])
        return dx

    def grad_sets(self) -> list[GReluGrads]:
        """Accumulated gradients as one :class:`GReluGrads` per parameter set."""
        if self.per_channel:
            return [GReluGrads(self.grads[f"ch{c}.endpoints"], self.grads[f"ch{c}.slopes"])
                    for c in range(len(self.sets))]
        return [GReluGrads(self.grads["endpoints"], self.grads["slopes"])]
