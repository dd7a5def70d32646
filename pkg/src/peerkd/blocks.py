"""Composable network blocks: feature extractors, heads, discriminators,
transfer layers.

Architectures come from a small block-spec language, tokens separated by
``-``:

    conv:C:K:S   convolution to C channels, K x K kernel, stride S, padding K//2
    bn           batch normalization
    relu         ReLU
    pool:N       N x N average pooling (stride N)

``tiny-a`` and ``tiny-b`` are named presets; tiny-b is twice as wide, so a
mixed pair exercises the channel-conversion path.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PRESETS = {
    "tiny-a": "conv:16:3:1-bn-relu-pool:2-conv:64:3:1-bn-relu-pool:2-conv:32:3:1-bn-relu",
    "tiny-b": "conv:32:3:1-bn-relu-pool:2-conv:128:3:1-bn-relu-pool:2-conv:64:3:1-bn-relu",
}

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _conv_init(rng, c_out, c_in, kh, kw, dtype):
    fan_in = c_in * kh * kw
    std = np.sqrt(2.0 / fan_in)
    w = (rng.standard_normal((c_out, c_in, kh, kw)) * std).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


def _linear_init(rng, f_out, f_in, dtype):
    std = np.sqrt(2.0 / f_in)
    w = (rng.standard_normal((f_out, f_in)) * std).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(f_out, dtype=dtype), requires_grad=True)


class _Conv:
    def __init__(self, rng, c_in, c_out, k, stride, dtype):
        self.weight, self.bias = _conv_init(rng, c_out, c_in, k, k, dtype)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x, training):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def buffers(self, prefix):
        return {}


class _BatchNorm:
    def __init__(self, channels, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, momentum=BN_MOMENTUM, eps=BN_EPS)

    def params(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def buffers(self, prefix):
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}


class _Activation:
    def __init__(self, kind, slope=0.0):
        self.kind = kind
        self.slope = slope

    def __call__(self, x, training):
        return T.pointwise_activation(self.kind, x, self.slope)

    def params(self, prefix):
        return {}

    def buffers(self, prefix):
        return {}


class _Pool:
    def __init__(self, k):
        self.k = k

    def __call__(self, x, training):
        return T.avg_pool2d(x, self.k)

    def params(self, prefix):
        return {}

    def buffers(self, prefix):
        return {}


def _parse_block_spec(spec: str, in_channels: int):
    """Yield (layer-factory args) and track the running channel count."""
    layers = []
    channels = in_channels
    saw_conv = False
    for token in spec.split("-"):
        parts = token.split(":")
        kind = parts[0]
        if kind not in ("conv", "bn", "relu", "pool"):
            raise ConfigError(f"unknown block token {token!r}")
        try:
            if kind == "conv":
                _, c, k, s = parts
                layers.append(("conv", channels, int(c), int(k), int(s)))
                channels = int(c)
                saw_conv = True
            elif kind == "bn":
                layers.append(("bn", channels))
            elif kind == "relu":
                layers.append(("relu",))
            else:
                layers.append(("pool", int(parts[1])))
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"malformed block token {token!r}") from exc
    if not saw_conv:
        raise ConfigError("block spec contains no convolution")
    return layers, channels


class Network:
    """Feature extractor plus classifier head.

    ``forward`` returns the last-stage feature map and the logits from a
    single pass; ``forward_count`` tallies extractor invocations so tests can
    verify how often each training scheme re-runs inference.
    """

    def __init__(self, arch_id, extractor, feature_channels, head_weight, head_bias,
                 num_classes):
        self.arch_id = arch_id
        self.extractor = extractor
        self.feature_channels = feature_channels
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.num_classes = num_classes
        self.training = True
        self.forward_count = 0

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x: Tensor):
        self.forward_count += 1
        h = x
        for layer in self.extractor:
            h = layer(h, self.training)
        feature = h
        logit = T.linear(T.global_avg_pool(feature), self.head_weight, self.head_bias)
        return feature, logit

    def extract(self, x: Tensor) -> Tensor:
        """Feature map only (does not count as a scored forward)."""
        h = x
        for layer in self.extractor:
            h = layer(h, self.training)
        return h

    def params(self):
        out = {}
        for i, layer in enumerate(self.extractor):
            out.update(layer.params(f"ext{i}"))
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def extractor_params(self):
        out = {}
        for i, layer in enumerate(self.extractor):
            out.update(layer.params(f"ext{i}"))
        return out

    def head_params(self):
        return {"head.weight": self.head_weight, "head.bias": self.head_bias}

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.extractor):
            out.update(layer.buffers(f"ext{i}"))
        return out


def build_network(arch_spec: str, num_classes: int, seed: int,
                  in_channels: int = 1, dtype=np.float32) -> Network:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    spec = PRESETS.get(arch_spec, arch_spec)
    layer_specs, feature_channels = _parse_block_spec(spec, in_channels)
    rng = np.random.default_rng(seed)
    extractor = []
    for ls in layer_specs:
        if ls[0] == "conv":
            _, c_in, c_out, k, s = ls
            extractor.append(_Conv(rng, c_in, c_out, k, s, dtype))
        elif ls[0] == "bn":
            extractor.append(_BatchNorm(ls[1], dtype))
        elif ls[0] == "relu":
            extractor.append(_Activation("relu"))
        else:
            extractor.append(_Pool(ls[1]))
    head_w, head_b = _linear_init(rng, num_classes, feature_channels, dtype)
    return Network(arch_spec, extractor, feature_channels, head_w, head_b, num_classes)


def forward_network(net: Network, x: Tensor):
    """One pass through ``net``: (last-conv feature map, logits)."""
    return net.forward(x)


class Discriminator:
    """Feature-map scorer: Conv(s2) -> BN -> LeakyReLU -> Conv(s2) -> GAP -> Sigmoid.

    The second convolution maps to a single channel, so global average
    pooling yields one scalar per sample regardless of spatial extent.
    """

    def __init__(self, conv1, bn, conv2):
        self.conv1 = conv1
        self.bn = bn
        self.conv2 = conv2
        self.training = True

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, feature: Tensor) -> Tensor:
        if feature.ndim != 4:
            raise ShapeError("discriminator expects an NCHW feature map")
        if feature.shape[2] < 4 or feature.shape[3] < 4:
            raise ShapeError(
                f"discriminator needs spatial extent >= 4, got {feature.shape[2]}x{feature.shape[3]}"
            )
        h = self.conv1(feature, self.training)
        h = self.bn(h, self.training)
        h = T.leaky_relu(h, LEAKY_SLOPE)
        h = self.conv2(h, self.training)
        score = T.sigmoid(T.reshape(T.global_avg_pool(h), (feature.shape[0],)))
        return score

    def params(self):
        out = {}
        out.update(self.conv1.params("conv1"))
        out.update(self.bn.params("bn"))
        out.update(self.conv2.params("conv2"))
        return out

    def buffers(self):
        return self.bn.buffers("bn")


def build_discriminator(in_channels: int, base_width: int, seed: int,
                        dtype=np.float32) -> Discriminator:
    if in_channels < 1 or base_width < 1:
        raise ConfigError("in_channels and base_width must be positive")
    rng = np.random.default_rng(seed)
    conv1 = _Conv(rng, in_channels, base_width, 3, 2, dtype)
    bn = _BatchNorm(base_width, dtype)
    conv2 = _Conv(rng, base_width, 1, 3, 2, dtype)
    return Discriminator(conv1, bn, conv2)


class TransferLayer:
    """1x1 conv -> BN -> ReLU channel adapter; preserves spatial extent."""

    def __init__(self, conv, bn):
        self.conv = conv
        self.bn = bn
        self.training = True

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv(x, self.training)
        h = self.bn(h, self.training)
        return T.relu(h)

    def params(self):
        out = {}
        out.update(self.conv.params("conv"))
        out.update(self.bn.params("bn"))
        return out

    def buffers(self):
        return self.bn.buffers("bn")


class IdentityTransfer:
    """Stands in for a transfer layer when endpoint channel counts agree."""

    def train(self):
        return self

    def eval(self):
        return self

    def forward(self, x: Tensor) -> Tensor:
        return x

    def params(self):
        return {}

    def buffers(self):
        return {}


def build_transfer_layer(c_in: int, c_out: int, seed: int, dtype=np.float32):
    if c_in < 1 or c_out < 1:
        raise ConfigError("channel counts must be positive")
    if c_in == c_out:
        return IdentityTransfer()
    rng = np.random.default_rng(seed)
    conv = _Conv(rng, c_in, c_out, 1, 1, dtype)
    bn = _BatchNorm(c_out, dtype)
    return TransferLayer(conv, bn)
