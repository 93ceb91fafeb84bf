"""Central finite-difference oracle for every analytic backward pass."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import OracleError, SamplerError
from .gcnet import GCNet, gcnet_backward, gcnet_forward
from .kernels import softmax_xent
from .layers import GReLU, Layer, MaxPool2x2, ReLU

REL_FLOOR = 1e-8
DEFAULT_H = 1e-5
MARGIN = 1e-3


def rel_error(analytic, numeric):
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def fd_gradient(loss_fn, theta, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of ``loss_fn`` at ``theta``, one coordinate at a time.

    The step for coordinate ``j`` is ``h * max(1, |theta_j|)``.  ``theta``
    is perturbed in place and restored, so ``loss_fn`` may close over it.
    """
    theta = np.asarray(theta)
    flat = theta.reshape(-1)
    grad = np.empty(flat.size)
    for j in range(flat.size):
        orig = flat[j]
        step = h * max(1.0, abs(orig))
        flat[j] = orig + step
        up = loss_fn(theta)
        flat[j] = orig - step
        down = loss_fn(theta)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            coord = tuple(int(i) for i in np.unravel_index(j, theta.shape))
            raise OracleError(f"non-finite loss probing coordinate {coord}")
        grad[j] = (up - down) / (2 * step)
    return grad.reshape(theta.shape)


@dataclass
class ParamCheck:
    name: str
    max_rel: float
    mean_rel: float
    count: int


@dataclass
class GradReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel(self) -> float:
        return max((p.max_rel for p in self.params), default=0.0)

    def add(self, name: str, analytic, numeric):
        analytic = np.asarray(analytic, float)
        err = rel_error(analytic, numeric)
        self.params.append(ParamCheck(name, float(err.max(initial=0.0)),
                                      float(err.mean()) if err.size else 0.0, err.size))
        for idx in zip(*np.nonzero(err >= self.tolerance)):
            self.failures.append((name, tuple(int(i) for i in idx),
                                  float(analytic[idx]), float(np.asarray(numeric)[idx])))
        self.failures.sort(key=lambda f: (f[0], f[1]))

    def format(self) -> str:
        lines = [f"{'tensor':<32}{'coords':>8}{'max rel err':>14}{'mean rel err':>14}"]
        for p in self.params:
            lines.append(f"{p.name:<32}{p.count:>8}{p.max_rel:>14.3e}{p.mean_rel:>14.3e}")
        verdict = "PASS" if self.passed else f"FAIL ({len(self.failures)} coordinates)"
        lines.append(f"tolerance {self.tolerance:g}: {verdict}")
        for name, idx, a, n in self.failures[:10]:
            lines.append(f"  {name}{list(idx)}: analytic {a:.10g} numeric {n:.10g}")
        return "\n".join(lines)

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tensor", "coords", "max_rel_err", "mean_rel_err"])
            for p in self.params:
                w.writerow([p.name, p.count, f"{p.max_rel:.6e}", f"{p.mean_rel:.6e}"])


# ---------------------------------------------------------------------------
# kinks
# ---------------------------------------------------------------------------

def kink_distance(layer: Layer, x) -> float:
    """Distance of ``x`` from the nearest non-differentiable point of ``layer``."""
    if isinstance(layer, GReLU):
        if layer.per_channel:
            return min(float(np.min(np.abs(x[:, c, ..., None] - p.endpoints)))
                       for c, p in enumerate(layer.sets))
        return float(np.min(np.abs(np.asarray(x)[..., None] - layer.sets[0].endpoints)))
    if isinstance(layer, ReLU):
        return float(np.min(np.abs(x)))
    if isinstance(layer, MaxPool2x2):
        n, c, h, w = x.shape
        win = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                      .reshape(n, c, h // 2, w // 2, 4), axis=-1)
        return float(np.min(win[..., 3] - win[..., 2]))
    return np.inf


def network_kink_distance(net: GCNet, x) -> float:
    """Smallest kink distance over every activation and pooling input of ``net``."""
    dist = np.inf
    h = x
    for i, block in enumerate(net.blocks):
        for layer in block.layers:
            dist = min(dist, kink_distance(layer, h))
            h = layer.forward(h, train=True)
        if block.pool is not None and i + 1 < len(net.blocks):
            dist = min(dist, kink_distance(block.pool, h))
            h = block.pool.forward(h)
    return dist


def sample_valid(sampler, valid, rng, attempts: int = 1000):
    for _ in range(attempts):
        x = sampler(rng)
        if valid(x):
            return x
    raise SamplerError(f"no sample at least {MARGIN:g} away from kinks in {attempts} attempts")


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def check_layer(layer: Layer, input_sampler, tolerance: float = 1e-6, seed: int = 0,
                margin: float = MARGIN, attempts: int = 1000) -> GradReport:
    """Compare the layer's input and parameter gradients against :func:`fd_gradient`.

    The scalar loss is ``sum(forward(x) * R)`` for a fixed random ``R``.
    ``input_sampler(rng)`` proposes inputs; proposals closer than
    ``margin`` to a kink are rejected.
    """
    rng = np.random.default_rng(seed)
    x = sample_valid(input_sampler, lambda v: kink_distance(layer, v) > margin, rng, attempts)
    out = layer.forward(x, train=True)
    weights = rng.standard_normal(out.shape)

    def loss(_):
        return float(np.sum(layer.forward(x, train=True) * weights))

    input_grad = layer.backward(weights)
    analytic = {k: v.copy() for k, v in layer.grads.items()}
    report = GradReport(tolerance)
    report.add("input", input_grad, fd_gradient(loss, x))
    for key, p in layer.params.items():
        if key in analytic:
            report.add(key, analytic[key], fd_gradient(loss, p))
    return report


def check_network(net: GCNet, x, labels, tolerance: float = 1e-5,
                  include_input: bool = False) -> GradReport:
    """Whole-network check of every parameter tensor on the mean cross-entropy loss."""
    def loss(_):
        logits, _ = gcnet_forward(net, x, train=True)
        return softmax_xent(logits, labels)[0]

    logits, cache = gcnet_forward(net, x, train=True)
    _, g = softmax_xent(logits, labels)
    res = gcnet_backward(net, cache, g)
    report = GradReport(tolerance)
    for name, layer in net.named_layers():
        for key, p in layer.params.items():
            if key in res.param_grads[name]:
                report.add(f"{name}.{key}", res.param_grads[name][key], fd_gradient(loss, p))
    if include_input:
        report.add("input", res.input_grad, fd_gradient(loss, x))
    return report
