"""Global-Connected Net: every block output feeds the classifier directly.

Each block's output ``B_i`` is reduced by global average pooling to a
vector ``p_i`` of width ``m_i`` (its channel count).  The vectors are
concatenated block 1 first into ``p`` of width ``m = sum m_i`` and mapped
to class scores by one weight matrix, ``c = p W (+ b)``.

On the way back, ``dL/dp = dL/dc W^T`` is split into per-block slices and
each block output receives two contributions: the GAP-backward of its own
slice (direct path) and whatever flows back from block ``i+1`` through the
inter-block pooling (cascaded path).  The last block only has the direct
path.  A conventional net is the same stack with a single tap on the last
block.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import DimensionError, StateError
from .grelu import GReluParams
from .layers import BatchNorm, Conv2d, GReLU, Layer, Linear, MaxPool2x2, ReLU

SMALLNET_WIDTHS = (16, 16, 32)
SMALLNET_BASELINE_WIDTHS = (16, 16, 36)
SMALLNET_POOLS = (True, True, False)


class Block:
    """conv -> batchnorm -> activation, optionally followed by a 2x2 max pool.

    The pool belongs to the link towards the next block: the block output
    ``B_i`` (and its GAP tap) is taken before pooling.
    """

    def __init__(self, layers: list[Layer], pool: bool = False, name: str = "block"):
        self.layers = list(layers)
        self.pool = MaxPool2x2() if pool else None
        self.name = name
        self.cached_output = None

    @property
    def tap_width(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Conv2d):
                return layer.out_channels
            if isinstance(layer, BatchNorm):
                return layer.params["gamma"].size
        raise DimensionError(f"{self.name} has no layer that fixes its channel count")

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        self.cached_output = x
        return x

    def backward(self, out_grad):
        for layer in reversed(self.layers):
            out_grad = layer.backward(out_grad)
        return out_grad

    def link_forward(self, b):
        return self.pool.forward(b) if self.pool is not None else b

    def link_backward(self, g):
        return self.pool.backward(g) if self.pool is not None else g


@dataclass
class ForwardCache:
    forward_id: int
    net_id: int
    block_shapes: list[tuple[int, ...]]
    taps: list[np.ndarray]
    features: np.ndarray


@dataclass
class BackwardResult:
    """Gradients produced by :func:`gcnet_backward`.

    Parameter gradients are also left in each layer's ``grads``.
    """

    block_grads: list[np.ndarray]
    feature_grad: np.ndarray
    input_grad: np.ndarray
    param_grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


class GCNet:
    """Chain of blocks with GAP taps concatenated into one linear classifier.

    ``taps`` lists the block indices that feed the classifier; by default
    all of them (global connection).
    """

    topology = "gc"

    def __init__(self, blocks: list[Block], classes: int, bias: bool = True, rng=None,
                 taps: list[int] | None = None, arch: dict | None = None):
        self.blocks = list(blocks)
        self.taps = list(range(len(self.blocks))) if taps is None else list(taps)
        self.classes = classes
        width = sum(self.blocks[i].tap_width for i in self.taps)
        self.classifier = Linear(width, classes, bias=bias, rng=rng)
        self.arch = dict(arch or {})
        self._forward_id = 0
        self._ids = itertools.count(1)

    @property
    def tap_widths(self) -> list[int]:
        return [self.blocks[i].tap_width for i in self.taps]

    def named_layers(self):
        for b in self.blocks:
            for j, layer in enumerate(b.layers):
                yield f"{b.name}.{j}.{layer.kind}", layer
        yield "classifier", self.classifier

    def grelu_layers(self) -> list[GReLU]:
        return [layer for _, layer in self.named_layers() if isinstance(layer, GReLU)]

    def set_frozen(self, frozen: bool):
        for layer in self.grelu_layers():
            layer.frozen = frozen

    def forward(self, x, train=True):
        return gcnet_forward(self, x, train)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        out = [gcnet_forward(self, x[i:i + batch_size], train=False)[0]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.classes))


class ConventionalNet(GCNet):
    """Same layer stack; only the last block feeds the classifier."""

    topology = "conventional"

    def __init__(self, blocks, classes, bias=True, rng=None, arch=None):
        super().__init__(blocks, classes, bias=bias, rng=rng, taps=[len(blocks) - 1], arch=arch)


def gcnet_forward(net: GCNet, x, train: bool = True):
    """Run the blocks, GAP-tap them, concatenate and classify.

    Returns ``(logits, cache)``.  The cache is only valid for the next
    :func:`gcnet_backward` on the same net.
    """
    if not net.blocks:
        raise DimensionError("network has no blocks")
    taps, shapes = {}, []
    h = x
    for i, block in enumerate(net.blocks):
        b = block.forward(h, train)
        shapes.append(b.shape)
        if i in net.taps:
            taps[i] = K.gap_forward(b)
        if i + 1 < len(net.blocks):
            h = block.link_forward(b)
    tap_list = [taps[i] for i in net.taps]
    features = np.concatenate(tap_list, axis=1)
    if features.shape[1] != net.classifier.params["weight"].shape[0]:
        raise DimensionError(f"feature width {features.shape[1]} != classifier rows "
                             f"{net.classifier.params['weight'].shape[0]}")
    logits = net.classifier.forward(features, train)
    net._forward_id = next(net._ids)
    return logits, ForwardCache(net._forward_id, id(net), shapes, tap_list, features)


def split_features(vec: np.ndarray, widths) -> list[np.ndarray]:
    """Split an N x m feature(-gradient) matrix into per-tap slices."""
    return np.split(vec, np.cumsum(widths)[:-1], axis=1)


def gcnet_backward(net: GCNet, cache: ForwardCache, logit_grad,
                   cascade_scale: float = 1.0) -> BackwardResult:
    """Backpropagate ``logit_grad`` through classifier, taps and blocks.

    The gradient reaching block ``i`` is ``direct_i + cascade_scale *
    cascaded_i``; ``cascade_scale`` other than 1 is only meaningful as a
    diagnostic for separating the two paths.
    """
    if cache.net_id != id(net) or cache.forward_id != net._forward_id:
        raise StateError("stale or foreign forward cache; run forward again before backward")
    feature_grad = net.classifier.backward(logit_grad)
    direct = dict(zip(net.taps, split_features(feature_grad, net.tap_widths)))
    block_grads = [None] * len(net.blocks)
    cascaded = None
    for i in range(len(net.blocks) - 1, -1, -1):
        shape = cache.block_shapes[i]
        g = np.zeros(shape)
        if i in direct:
            g = g + K.gap_backward(direct[i], shape[2:])
        if cascaded is not None:
            g = g + cascade_scale * cascaded
        block_grads[i] = g
        h_grad = net.blocks[i].backward(g)
        if i > 0:
            cascaded = net.blocks[i - 1].link_backward(h_grad)
    param_grads = {name: dict(layer.grads) for name, layer in net.named_layers()}
    return BackwardResult(block_grads, feature_grad, h_grad, param_grads)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _make_activation(kind: str, channels: int, grelu: GReluParams | None, per_channel: bool):
    if kind == "grelu":
        return GReLU(grelu, channels=channels, per_channel=per_channel)
    if kind == "relu":
        return ReLU()
    raise ValueError(f"unknown activation {kind!r}")


def build_from_arch(arch: dict, seed: int = 0) -> GCNet:
    """Construct a net from an architecture dictionary (also stored in checkpoints).

    Keys: ``in_channels``, ``widths``, ``pools``, ``activation``,
    ``topology``, ``classes``, ``bias``, and optionally ``conv_bias``,
    ``grelu_endpoints``/``grelu_slopes`` and ``per_channel``.
    """
    rng = np.random.default_rng(seed)
    grelu = None
    if arch.get("grelu_endpoints") is not None:
        grelu = GReluParams(arch["grelu_endpoints"], arch["grelu_slopes"])
    blocks = []
    c_in = arch["in_channels"]
    for i, (width, pool) in enumerate(zip(arch["widths"], arch["pools"])):
        layers = [Conv2d(c_in, width, 3, padding=1, bias=arch.get("conv_bias", False), rng=rng),
                  BatchNorm(width),
                  _make_activation(arch["activation"], width, grelu, arch.get("per_channel", False))]
        blocks.append(Block(layers, pool=pool, name=f"block{i + 1}"))
        c_in = width
    cls = ConventionalNet if arch["topology"] == "conventional" else GCNet
    return cls(blocks, arch["classes"], bias=arch.get("bias", True), rng=rng, arch=arch)


def smallnet_arch(activation: str = "grelu", topology: str = "gc", bias: bool = True,
                  per_channel: bool = False) -> dict:
    if topology not in ("gc", "conventional"):
        raise ValueError(f"unknown topology {topology!r}")
    widths = SMALLNET_WIDTHS
    if topology == "conventional" and activation == "relu":
        widths = SMALLNET_BASELINE_WIDTHS
    return {"name": f"smallnet-{topology}-{activation}", "in_channels": 1,
            "widths": list(widths), "pools": list(SMALLNET_POOLS), "activation": activation,
            "topology": topology, "classes": 10, "bias": bias, "conv_bias": False,
            "per_channel": per_channel}


def build_smallnet(activation: str = "grelu", topology: str = "gc", bias: bool = True,
                   seed: int = 0, per_channel: bool = False) -> GCNet:
    """Three 3x3 conv blocks with 2x2 max pooling after the first two.

    ``gc`` taps all blocks (16 + 16 + 32 = 64 features); ``conventional``
    taps only the last block, which has 36 maps in the ReLU baseline.
    """
    return build_from_arch(smallnet_arch(activation, topology, bias, per_channel), seed)


def toy_arch(widths=(3, 4), classes: int = 4, activation: str = "grelu", topology: str = "gc",
             bias: bool = True, in_channels: int = 1) -> dict:
    pools = [True] * (len(widths) - 1) + [False]
    return {"name": "toy", "in_channels": in_channels, "widths": list(widths), "pools": pools,
            "activation": activation, "topology": topology, "classes": classes, "bias": bias,
            "conv_bias": False, "per_channel": False}


def build_toy(widths=(3, 4), classes: int = 4, activation: str = "grelu", topology: str = "gc",
              bias: bool = True, seed: int = 0, in_channels: int = 1) -> GCNet:
    """Small chain for gradient checks and quick synthetic runs."""
    return build_from_arch(toy_arch(widths, classes, activation, topology, bias, in_channels), seed)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

@dataclass
class ParamReport:
    rows: list[tuple[str, str, int]]

    @property
    def total(self) -> int:
        return sum(r[2] for r in self.rows)

    def format(self) -> str:
        lines = [f"{'layer':<24}{'type':<12}{'params':>8}"]
        lines += [f"{name:<24}{kind:<12}{count:>8}" for name, kind, count in self.rows]
        lines.append(f"{'total':<36}{self.total:>8}")
        return "\n".join(lines)


def param_count(net) -> ParamReport:
    """Learnable scalar count per layer; accepts a net or an iterable of (name, layer)."""
    pairs = net.named_layers() if hasattr(net, "named_layers") else net
    return ParamReport([(name, layer.kind, layer.param_count()) for name, layer in pairs])
