"""Feedforward networks with a low-rank output-sparsity predictor.

Weights follow the ``a_next = f(W a)`` convention: ``W`` is ``(m, n)`` with
``m`` outputs. A predicted layer carries ``U (m, r)`` and ``V (r, n)``; the
sign of ``U V a`` decides which output neurons are computed at all. Neurons
predicted inactive are bypassed, i.e. forced to zero.

Batched inputs are rows: ``x`` may be ``(n,)`` or ``(batch, n)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numerics import (
    QFormat,
    SaturationCounter,
    calibrate_format,
    quantize_array,
    requantize_array,
)


class Mode(str, enum.Enum):
    UV_ON = "uv_on"
    UV_OFF = "uv_off"


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple
    rank: int = 0
    predictor_layers: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "predictor_layers", frozenset(int(l) for l in self.predictor_layers))
        self.validate()

    @classmethod
    def with_predictors(cls, layer_sizes: Sequence[int], rank: int) -> NetworkSpec:
        """Every hidden layer gets a predictor of the given rank (none if rank is 0)."""
        n_layers = len(layer_sizes) - 1
        layers = frozenset(range(n_layers - 1)) if rank > 0 else frozenset()
        return cls(tuple(layer_sizes), rank, layers)

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layer_shape(self, l: int) -> tuple:
        return self.layer_sizes[l + 1], self.layer_sizes[l]

    def has_predictor(self, l: int) -> bool:
        return l in self.predictor_layers

    def validate(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("a network needs at least an input and an output size")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive: {self.layer_sizes}")
        if not self.predictor_layers:
            return
        if self.rank <= 0:
            raise ValueError("predictor layers require a positive rank")
        for l in self.predictor_layers:
            if not 0 <= l < self.num_layers:
                raise ValueError(f"predictor layer {l} out of range")
            if l == self.num_layers - 1:
                raise ValueError("the classification layer cannot carry a predictor")
            m, n = self.layer_shape(l)
            if self.rank >= min(m, n):
                raise ValueError(f"rank {self.rank} must be < min({m}, {n}) for layer {l}")

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "rank": self.rank,
            "predictor_layers": sorted(self.predictor_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(tuple(d["layer_sizes"]), int(d.get("rank", 0)),
                   frozenset(d.get("predictor_layers", ())))


@dataclass
class NetworkParams:
    spec: NetworkSpec
    W: List[np.ndarray]
    U: List[Optional[np.ndarray]]
    V: List[Optional[np.ndarray]]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        L = self.spec.num_layers
        if not (len(self.W) == len(self.U) == len(self.V) == L):
            raise ValueError(f"expected {L} layers of parameters")
        for l in range(L):
            m, n = self.spec.layer_shape(l)
            if self.W[l].shape != (m, n):
                raise ValueError(f"W[{l}] has shape {self.W[l].shape}, expected {(m, n)}")
            if self.spec.has_predictor(l):
                r = self.spec.rank
                if self.U[l] is None or self.U[l].shape != (m, r):
                    raise ValueError(f"U[{l}] must have shape {(m, r)}")
                if self.V[l] is None or self.V[l].shape != (r, n):
                    raise ValueError(f"V[{l}] must have shape {(r, n)}")
            elif self.U[l] is not None or self.V[l] is not None:
                raise ValueError(f"layer {l} carries U/V but is not a predictor layer")
            for name, arr in (("W", self.W[l]), ("U", self.U[l]), ("V", self.V[l])):
                if arr is not None and not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name}[{l}] has non-finite entries")

    def copy(self) -> NetworkParams:
        cp = lambda a: None if a is None else a.copy()
        return NetworkParams(self.spec, [w.copy() for w in self.W],
                             [cp(u) for u in self.U], [cp(v) for v in self.V])

    def without_predictors(self) -> NetworkParams:
        spec = NetworkSpec(self.spec.layer_sizes)
        L = spec.num_layers
        return NetworkParams(spec, [w.copy() for w in self.W], [None] * L, [None] * L)


@dataclass
class PredictorMask:
    """Bit ``j`` set means output neuron ``j`` is predicted active."""

    bits: np.ndarray

    @property
    def sparsity(self) -> float:
        return float(1.0 - np.mean(self.bits)) if self.bits.size else 0.0

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass
class ForwardCache:
    """Per-layer intermediates of one forward pass.

    ``inputs[l]`` is ``a^(l)``; ``pre[l]`` is ``W a``; ``a_ori[l]`` the
    ReLU output before gating; ``scores[l]`` the predictor scores ``U V a``
    and ``gates[l]`` the values multiplied onto ``a_ori`` (the 0/1 mask, or
    the clipped scores in relaxed mode). Batched caches carry a leading
    batch axis on every array.
    """

    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    a_ori: List[Optional[np.ndarray]] = field(default_factory=list)
    scores: List[Optional[np.ndarray]] = field(default_factory=list)
    gates: List[Optional[np.ndarray]] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    relaxed: bool = False

    def mask(self, l: int) -> Optional[np.ndarray]:
        if self.scores[l] is None:
            return None
        return self.scores[l] > 0

    def sparsity(self, l: int) -> Optional[float]:
        """Fraction of predicted-inactive neurons of layer ``l`` (mean over the batch)."""
        m = self.mask(l)
        if m is None:
            return None
        return float(1.0 - np.mean(m))

    def output(self, l: int) -> np.ndarray:
        """``a^(l+1)``, the activation leaving layer ``l``."""
        if l + 1 < len(self.inputs):
            return self.inputs[l + 1]
        return self.logits


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _check_input(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n0 = params.spec.layer_sizes[0]
    if x.shape[-1] != n0 or x.ndim not in (1, 2):
        raise ValueError(f"input has shape {x.shape}, expected (..., {n0})")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def predictor_scores(U: np.ndarray, V: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``U (V a)`` as two thin products, never forming ``U V``."""
    m, r = U.shape
    if V.shape[0] != r or a.shape[-1] != V.shape[1]:
        raise ValueError(f"shape mismatch: U {U.shape}, V {V.shape}, a {a.shape}")
    return (a @ V.T) @ U.T


def predict_mask(z: np.ndarray) -> PredictorMask:
    # zero scores predict inactive
    return PredictorMask(np.asarray(z) > 0)


def forward_dense(params: NetworkParams, x: np.ndarray) -> ForwardCache:
    x = _check_input(params, x)
    cache = ForwardCache()
    a = x
    L = params.spec.num_layers
    for l in range(L):
        cache.inputs.append(a)
        h = a @ params.W[l].T
        cache.pre.append(h)
        cache.scores.append(None)
        cache.gates.append(None)
        if l == L - 1:
            cache.a_ori.append(None)
            cache.logits = h
        else:
            a = relu(h)
            cache.a_ori.append(a)
    return cache


def forward_gated(params: NetworkParams, x: np.ndarray, relaxed: bool = False) -> ForwardCache:
    """Forward pass with predictor gating on every predicted layer.

    ``relaxed`` replaces the 0/1 step by ``clip(z, -1, 1)``, the piecewise
    linear surrogate whose exact derivative the straight-through estimator
    uses; it exists for gradient checking.
    """
    x = _check_input(params, x)
    cache = ForwardCache(relaxed=relaxed)
    a = x
    L = params.spec.num_layers
    for l in range(L):
        cache.inputs.append(a)
        h = a @ params.W[l].T
        cache.pre.append(h)
        if l == L - 1:
            cache.a_ori.append(None)
            cache.scores.append(None)
            cache.gates.append(None)
            cache.logits = h
            break
        a_ori = relu(h)
        cache.a_ori.append(a_ori)
        if params.spec.has_predictor(l):
            z = predictor_scores(params.U[l], params.V[l], a)
            p = np.clip(z, -1.0, 1.0) if relaxed else (z > 0).astype(np.float64)
            cache.scores.append(z)
            cache.gates.append(p)
            a = p * a_ori
        else:
            cache.scores.append(None)
            cache.gates.append(None)
            a = a_ori
    return cache


# -- fixed-point twin --------------------------------------------------------

@dataclass
class QuantizedLayer:
    """Integer codes of one layer plus the Q-formats they are expressed in.

    ``out_fmt`` is the format of the activation leaving the layer (or of the
    logits for the last layer); ``vres_fmt`` holds the requantized ``V a``
    values that the U computation consumes.
    """

    w: np.ndarray
    w_fmt: QFormat
    out_fmt: QFormat
    relu: bool
    u: Optional[np.ndarray] = None
    u_fmt: Optional[QFormat] = None
    v: Optional[np.ndarray] = None
    v_fmt: Optional[QFormat] = None
    vres_fmt: Optional[QFormat] = None

    @property
    def shape(self) -> tuple:
        return self.w.shape

    @property
    def has_predictor(self) -> bool:
        return self.u is not None

    @property
    def rank(self) -> int:
        return 0 if self.u is None else self.u.shape[1]


@dataclass
class QuantizedNetwork:
    in_fmt: QFormat
    layers: List[QuantizedLayer]

    @property
    def layer_sizes(self) -> tuple:
        return (self.layers[0].shape[1],) + tuple(l.shape[0] for l in self.layers)

    def quantize_input(self, x: np.ndarray, counter: Optional[SaturationCounter] = None) -> np.ndarray:
        return quantize_array(x, self.in_fmt, counter)


def quantize_network(params: NetworkParams, calib_x: np.ndarray,
                     act_fmts: Optional[Sequence[QFormat]] = None) -> QuantizedNetwork:
    """Per-tensor calibrated 16-bit twin of ``params``.

    Weight formats come from the weights themselves; activation and logit
    formats from float gated and dense passes over ``calib_x``, and the
    ``V a`` format from the gated pass.
    """
    calib_x = np.atleast_2d(_check_input(params, calib_x))
    cache = forward_gated(params, calib_x)
    # uv_off runs see unmasked activations, which can be larger
    dense = forward_dense(params, calib_x)
    L = params.spec.num_layers
    in_fmt = calibrate_format(calib_x)
    layers = []
    for l in range(L):
        out = np.concatenate([cache.output(l).ravel(), dense.output(l).ravel()])
        out_fmt = act_fmts[l] if act_fmts is not None else calibrate_format(out)
        w_fmt = calibrate_format(params.W[l])
        layer = QuantizedLayer(quantize_array(params.W[l], w_fmt), w_fmt, out_fmt, relu=l < L - 1)
        if params.spec.has_predictor(l):
            u_fmt = calibrate_format(params.U[l])
            v_fmt = calibrate_format(params.V[l])
            layer.u, layer.u_fmt = quantize_array(params.U[l], u_fmt), u_fmt
            layer.v, layer.v_fmt = quantize_array(params.V[l], v_fmt), v_fmt
            layer.vres_fmt = calibrate_format(cache.inputs[l] @ params.V[l].T)
        layers.append(layer)
    return QuantizedNetwork(in_fmt, layers)


@dataclass
class GoldenResult:
    """Bit-exact reference activations.

    ``activations[0]`` is the quantized input, ``activations[l+1]`` the codes
    leaving layer ``l``; ``masks[l]``/``v_results[l]`` are ``None`` where no
    predictor ran.
    """

    activations: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    v_results: List[Optional[np.ndarray]]
    saturations: int = 0

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


def golden_layer(layer: QuantizedLayer, a: np.ndarray, in_fmt: QFormat, mode: Mode,
                 counter: SaturationCounter):
    """One layer of the golden model: returns ``(out_codes, mask, v_codes)``."""
    mask = v_codes = None
    if mode == Mode.UV_ON and layer.has_predictor:
        v_acc = layer.v @ a
        v_codes = requantize_array(v_acc, layer.v_fmt.frac_bits + in_fmt.frac_bits,
                                   layer.vres_fmt, counter)
        mask = (layer.u @ v_codes) > 0
    acc = layer.w @ a
    if layer.relu:
        acc = np.maximum(acc, 0)
    if mask is not None:
        acc = np.where(mask, acc, 0)
    out = requantize_array(acc, layer.w_fmt.frac_bits + in_fmt.frac_bits, layer.out_fmt, counter)
    return out, mask, v_codes


def forward_fx_golden(qnet: QuantizedNetwork, x_codes: np.ndarray, mode: Mode | str) -> GoldenResult:
    """Deterministic fixed-point inference of a single input vector.

    Every dot product is an exact integer sum; each output neuron is rounded
    once. The predictor decision uses the sign of the exact ``U (V a)``
    accumulator.
    """
    mode = Mode(mode)
    a = np.asarray(x_codes, dtype=np.int64)
    if a.ndim != 1 or a.shape[0] != qnet.layer_sizes[0]:
        raise ValueError(f"input codes have shape {a.shape}, expected ({qnet.layer_sizes[0]},)")
    counter = SaturationCounter()
    fmt = qnet.in_fmt
    result = GoldenResult([a], [], [])
    for layer in qnet.layers:
        a, mask, v_codes = golden_layer(layer, a, fmt, mode, counter)
        fmt = layer.out_fmt
        result.activations.append(a)
        result.masks.append(mask)
        result.v_results.append(v_codes)
    result.saturations = counter.count
    return result
