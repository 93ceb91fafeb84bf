"""Generalized multi-piecewise ReLU (GReLU).

The activation is the identity on a central interval ``[l_{-1}, l_1)`` and
continues piecewise-linearly on both sides through ``n`` learnable
breakpoints per side, each segment with its own learnable slope::

    y(x) = l_1 + sum_{i<s} k_i (l_{i+1} - l_i) + k_s (x - l_s)     x in [l_s, l_{s+1}), s >= 1
    y(x) = x                                                     x in [l_{-1}, l_1)
    y(x) = l_{-1} + sum_{j<s} k_{-j} (l_{-(j+1)} - l_{-j})
                  + k_{-s} (x - l_{-s})                          x in [l_{-(s+1)}, l_{-s}), s >= 1

with ``l_{n+1} = +inf`` and ``l_{-(n+1)} = -inf``.  Every interval is
half-open, so a breakpoint belongs to the segment on its right.

Parameters are stored negative-to-positive in two flat arrays of length
``2n``::

    endpoints = (l_{-n}, ..., l_{-1}, l_1, ..., l_n)
    slopes    = (k_{-n}, ..., k_{-1}, k_1, ..., k_n)

which is also the on-disk layout.  With this layout the segment id of an
input is ``searchsorted(endpoints, x, side="right") - n``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

EPS_GAP = 1e-6

# Endpoints/slopes of the worked example used as the default initialization.
DEFAULT_ENDPOINTS = (-0.6, -0.2, 0.2, 0.6)
DEFAULT_SLOPES = (0.01, 0.2, 1.5, 3.0)


@dataclass
class GReluParams:
    """The ``4n`` learnable scalars of one GReLU activation."""

    endpoints: np.ndarray
    slopes: np.ndarray

    def __post_init__(self):
        self.endpoints = np.array(self.endpoints, dtype=np.float64)
        self.slopes = np.array(self.slopes, dtype=np.float64)
        if self.endpoints.ndim != 1 or self.endpoints.size == 0 or self.endpoints.size % 2:
            raise ConfigError(f"need 2n endpoints, got shape {self.endpoints.shape}")
        if self.slopes.shape != self.endpoints.shape:
            raise ConfigError(
                f"slopes shape {self.slopes.shape} != endpoints shape {self.endpoints.shape}")
        if not np.all(np.isfinite(self.endpoints)) or not np.all(np.isfinite(self.slopes)):
            raise ConfigError("GReLU parameters must be finite")
        if np.any(np.diff(self.endpoints) <= 0):
            raise ConfigError(f"endpoints must be strictly increasing, got {self.endpoints}")

    @property
    def n(self) -> int:
        return self.endpoints.size // 2

    @property
    def size(self) -> int:
        return 4 * self.n

    @classmethod
    def from_sides(cls, endpoints_neg, endpoints_pos, slopes_neg, slopes_pos) -> "GReluParams":
        """Build from per-side sequences ordered outward from the center.

        ``endpoints_neg`` is ``(l_{-1}, ..., l_{-n})``, ``endpoints_pos`` is
        ``(l_1, ..., l_n)``, and likewise for the slopes.
        """
        return cls(np.concatenate([np.asarray(endpoints_neg, float)[::-1], endpoints_pos]),
                   np.concatenate([np.asarray(slopes_neg, float)[::-1], slopes_pos]))

    @classmethod
    def default(cls) -> "GReluParams":
        return cls(DEFAULT_ENDPOINTS, DEFAULT_SLOPES)

    @property
    def endpoints_pos(self) -> np.ndarray:
        return self.endpoints[self.n:]

    @property
    def endpoints_neg(self) -> np.ndarray:
        return self.endpoints[:self.n][::-1]

    @property
    def slopes_pos(self) -> np.ndarray:
        return self.slopes[self.n:]

    @property
    def slopes_neg(self) -> np.ndarray:
        return self.slopes[:self.n][::-1]

    def index(self, i: int) -> int:
        """Position of ``l_i`` / ``k_i`` (``i`` in ``±1..±n``) in the flat arrays."""
        n = self.n
        if i == 0 or abs(i) > n:
            raise IndexError(f"GReLU index must be in ±1..±{n}, got {i}")
        return n + i - 1 if i > 0 else n + i

    def l(self, i: int) -> float:
        return float(self.endpoints[self.index(i)])

    def k(self, i: int) -> float:
        return float(self.slopes[self.index(i)])

    def copy(self) -> "GReluParams":
        return GReluParams(self.endpoints.copy(), self.slopes.copy())

    def to_vector(self) -> np.ndarray:
        """Serialized layout: n, endpoints negative-to-positive, slopes negative-to-positive."""
        return np.concatenate([[float(self.n)], self.endpoints, self.slopes])

    @classmethod
    def from_vector(cls, vec) -> "GReluParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size < 1:
            raise ConfigError("empty GReLU parameter vector")
        n = int(vec[0])
        if n < 1 or vec[0] != n or vec.size != 1 + 4 * n:
            raise ConfigError(f"malformed GReLU parameter vector of length {vec.size}")
        return cls(vec[1:1 + 2 * n], vec[1 + 2 * n:])


@dataclass
class GReluGrads:
    """Accumulated loss gradients for one :class:`GReluParams`, same layout."""

    d_endpoints: np.ndarray
    d_slopes: np.ndarray

    @property
    def n(self) -> int:
        return self.d_endpoints.size // 2

    @property
    def d_endpoints_pos(self) -> np.ndarray:
        return self.d_endpoints[self.n:]

    @property
    def d_endpoints_neg(self) -> np.ndarray:
        return self.d_endpoints[:self.n][::-1]

    @property
    def d_slopes_pos(self) -> np.ndarray:
        return self.d_slopes[self.n:]

    @property
    def d_slopes_neg(self) -> np.ndarray:
        return self.d_slopes[:self.n][::-1]


# ---------------------------------------------------------------------------
# piece tables
# ---------------------------------------------------------------------------

def _tables(params: GReluParams):
    """Per-interval (slope, anchor, value-at-anchor), indexed by ``segment + n``.

    Positive segments anchor at their left breakpoint, negative ones at
    their right breakpoint, the center at 0 with value 0 and slope 1, so the
    center evaluates to ``0 + 1 * (x - 0) == x`` exactly.
    """
    n = params.n
    e, k = params.endpoints, params.slopes
    slope = np.empty(2 * n + 1)
    anchor = np.empty(2 * n + 1)
    value = np.empty(2 * n + 1)
    slope[n], anchor[n], value[n] = 1.0, 0.0, 0.0
    v = e[n]  # y(l_1) = l_1
    for s in range(1, n + 1):
        p = n + s
        slope[p], anchor[p], value[p] = k[p - 1], e[p - 1], v
        if s < n:
            v = v + k[p - 1] * (e[p] - e[p - 1])
    v = e[n - 1]  # y(l_{-1}) = l_{-1}
    for s in range(1, n + 1):
        p = n - s
        slope[p], anchor[p], value[p] = k[p], e[p], v
        if s < n:
            v = v + k[p] * (e[p - 1] - e[p])
    return slope, anchor, value


def _positions(x: np.ndarray, params: GReluParams) -> np.ndarray:
    """Interval index ``0..2n`` of every element (``segment + n``)."""
    e = params.endpoints
    if x.ndim == 0 or x.size < 64:
        return np.searchsorted(e, x, side="right")
    # a few vectorized comparisons beat a binary search per element
    p = (x >= e[0]).view(np.uint8).astype(np.intp)
    for v in e[1:]:
        p += x >= v
    return p


def segment_of(x, params: GReluParams):
    """Segment id in ``-n..n`` of ``x`` (scalar or array); 0 is the identity center."""
    seg = _positions(np.asarray(x, dtype=np.float64), params) - params.n
    return int(seg) if np.ndim(seg) == 0 else seg


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def grelu_forward(x, params: GReluParams, positions=None) -> np.ndarray:
    """Evaluate the activation elementwise.

    ``positions`` may carry precomputed interval indices (``segment + n``)
    to skip the segment lookup.
    """
    x = np.asarray(x, dtype=np.float64)
    slope, anchor, value = _tables(params)
    p = _positions(x, params) if positions is None else positions
    if x.ndim == 0:
        return value[p] + slope[p] * (x - anchor[p])
    intercept = value - slope * anchor
    return np.take(intercept, p) + np.take(slope, p) * x


def _check_pair(x, out_grad):
    x = np.asarray(x, dtype=np.float64)
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if x.shape != out_grad.shape:
        raise DimensionError(f"x shape {x.shape} != out_grad shape {out_grad.shape}")
    return x, out_grad


def grelu_backward_input(x, params: GReluParams, out_grad, positions=None) -> np.ndarray:
    """``out_grad * dy/dx``; the derivative is the slope of the segment holding ``x``."""
    x, out_grad = _check_pair(x, out_grad)
    slope, _, _ = _tables(params)
    p = _positions(x, params) if positions is None else positions
    return out_grad * np.take(slope, p)


def _segment_sums(x, params: GReluParams, out_grad, positions=None):
    """Per interval: sum of ``out_grad`` and sum of ``out_grad * (x - anchor)``."""
    x, out_grad = _check_pair(x, out_grad)
    _, anchor, _ = _tables(params)
    p = (_positions(x, params) if positions is None else positions).ravel()
    g = out_grad.ravel()
    m = 2 * params.n + 1
    g_sum = np.bincount(p, weights=g, minlength=m)
    gx_sum = np.bincount(p, weights=g * x.ravel(), minlength=m) - anchor * g_sum
    return g_sum, gx_sum


def _slope_grads(params, g_sum, gx_sum) -> np.ndarray:
    n, e = params.n, params.endpoints
    d = np.zeros(2 * n)
    for s in range(1, n + 1):
        p = n + s  # interval of segment s; k_s is at flat index p - 1
        beyond = g_sum[p + 1:].sum() if s < n else 0.0
        width = e[p] - e[p - 1] if s < n else 0.0
        d[p - 1] = width * beyond + gx_sum[p]
    for s in range(1, n + 1):
        p = n - s  # interval of segment -s; k_{-s} is at flat index p
        beyond = g_sum[:p].sum() if s < n else 0.0
        width = e[p - 1] - e[p] if s < n else 0.0
        d[p] = width * beyond + gx_sum[p]
    return d


def _endpoint_grads(params, g_sum) -> np.ndarray:
    n, k = params.n, params.slopes
    d = np.zeros(2 * n)
    for i in range(1, n + 1):
        p = n + i - 1  # flat index of l_i; interval of segment i is p + 1
        left_slope = 1.0 if i == 1 else k[p - 1]
        d[p] = (left_slope - k[p]) * g_sum[p + 1:].sum()
    for j in range(1, n + 1):
        p = n - j  # flat index of l_{-j}; interval of segment -j is p
        right_slope = 1.0 if j == 1 else k[p + 1]
        d[p] = (right_slope - k[p]) * g_sum[:p + 1].sum()
    return d


def grelu_grad_slopes(x, params: GReluParams, out_grad) -> np.ndarray:
    """dL/dk for every slope, summed over all positions (flat layout)."""
    g_sum, gx_sum = _segment_sums(x, params, out_grad)
    return _slope_grads(params, g_sum, gx_sum)


def grelu_grad_endpoints(x, params: GReluParams, out_grad) -> np.ndarray:
    """dL/dl for every endpoint, summed over all positions (flat layout)."""
    g_sum, _ = _segment_sums(x, params, out_grad)
    return _endpoint_grads(params, g_sum)


def grelu_param_grads(x, params: GReluParams, out_grad, positions=None) -> GReluGrads:
    g_sum, gx_sum = _segment_sums(x, params, out_grad, positions)
    return GReluGrads(_endpoint_grads(params, g_sum), _slope_grads(params, g_sum, gx_sum))


# ---------------------------------------------------------------------------
# update
# ---------------------------------------------------------------------------

def project_endpoints(endpoints: np.ndarray, gap: float = EPS_GAP) -> int:
    """Restore strict ordering in place, working from the center outward.

    Returns the number of endpoints moved.
    """
    n = endpoints.size // 2
    moved = 0
    if endpoints[n] < endpoints[n - 1] + gap:
        endpoints[n] = endpoints[n - 1] + gap
        moved += 1
    for p in range(n + 1, 2 * n):
        if endpoints[p] < endpoints[p - 1] + gap:
            endpoints[p] = endpoints[p - 1] + gap
            moved += 1
    for p in range(n - 2, -1, -1):
        if endpoints[p] > endpoints[p + 1] - gap:
            endpoints[p] = endpoints[p + 1] - gap
            moved += 1
    return moved


def grelu_apply_update(params: GReluParams, grads: GReluGrads, lr: float,
                       endpoint_mask=None, slope_mask=None) -> GReluParams:
    """Plain gradient step ``o <- o - lr * dL/do`` followed by ordering projection.

    Updates ``params`` in place and returns it.  The masks select which
    scalars are learnable (all of them by default).  No weight decay is
    ever applied here.
    """
    if not (np.all(np.isfinite(grads.d_endpoints)) and np.all(np.isfinite(grads.d_slopes))):
        raise ConfigError("GReLU gradients must be finite")
    d_e = grads.d_endpoints if endpoint_mask is None else grads.d_endpoints * endpoint_mask
    d_k = grads.d_slopes if slope_mask is None else grads.d_slopes * slope_mask
    params.endpoints -= lr * d_e
    params.slopes -= lr * d_k
    moved = project_endpoints(params.endpoints)
    if moved:
        logger.info("GReLU endpoint projection moved %d endpoint(s): %s", moved, params.endpoints)
    return params


# ---------------------------------------------------------------------------
# classic special cases
# ---------------------------------------------------------------------------

@dataclass
class Degenerate:
    """A GReLU configured as one of its classic special cases."""

    params: GReluParams
    endpoint_mask: np.ndarray = field(default_factory=lambda: np.zeros(2))
    slope_mask: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def learnable(self) -> bool:
        return bool(self.endpoint_mask.any() or self.slope_mask.any())


def make_degenerate(kind: str, slope: float = 0.0) -> Degenerate:
    """ReLU, Leaky ReLU or PReLU expressed as an ``n = 1`` GReLU.

    The two endpoints straddle zero at ``±EPS_GAP / 2``; the positive slope
    is 1 and the negative slope is 0 (``relu``) or ``slope``.  Only the
    PReLU negative slope is learnable.
    """
    half = EPS_GAP / 2
    if kind == "relu":
        slope = 0.0
    elif kind not in ("leaky_relu", "prelu"):
        raise ConfigError(f"unknown degenerate kind {kind!r}")
    params = GReluParams([-half, half], [slope, 1.0])
    slope_mask = np.array([1.0, 0.0]) if kind == "prelu" else np.zeros(2)
    return Degenerate(params, np.zeros(2), slope_mask)
