"""Uniform affine fake quantization for linear layers.

Weights are quantized per output channel (one scale/zero-point per column),
input activations per tensor. Quantization is simulated: integer codes are
stored, but evaluation dequantizes back to float64 so the rest of the
pipeline stays in ordinary numpy arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import ShapeError, as_matrix

__all__ = [
    "QuantParams",
    "QuantizedLinear",
    "CostEstimate",
    "calibrate_minmax",
    "quantize",
    "dequantize",
    "fake_quant_linear",
    "fold_correction",
    "estimate_cost",
]

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point pair(s) for one quantized tensor.

    ``scale`` and ``zero_point`` are vectors: length 1 for per-tensor
    granularity, one entry per column for per-channel granularity.
    """

    bitwidth: int
    scale: np.ndarray
    zero_point: np.ndarray
    granularity: str

    def __post_init__(self):
        if self.bitwidth < 2 or self.bitwidth > 8:
            raise ValueError(f"unsupported bitwidth {self.bitwidth}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        scale = np.asarray(self.scale, dtype=np.float64)
        zero = np.asarray(self.zero_point, dtype=np.int64)
        if scale.ndim != 1 or zero.shape != scale.shape:
            raise ShapeError(
                f"scale/zero_point must be matching vectors, got "
                f"{scale.shape} and {zero.shape}"
            )
        if self.granularity == PER_TENSOR and scale.size != 1:
            raise ShapeError("per-tensor params must hold exactly one group")
        if not np.isfinite(scale).all() or (scale <= 0.0).any():
            raise ValueError("scales must be finite and positive")
        if (zero < 0).any() or (zero > self.qmax).any():
            raise ValueError("zero points must lie in the code range")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zero)

    @property
    def qmax(self) -> int:
        return (1 << self.bitwidth) - 1

    @property
    def n_groups(self) -> int:
        return self.scale.size


def calibrate_minmax(samples, bitwidth: int, granularity: str = PER_TENSOR) -> QuantParams:
    """Min-max calibration of scale and zero point.

    Per-tensor uses the global min/max of ``samples``; per-channel treats each
    column as its own group. The range is widened to include zero before the
    scale is derived, so the zero point never has to be clipped and every
    calibrated value stays representable. A flat group (max == min) degrades
    to scale 1, zero point 0.
    """
    samples = as_matrix(samples, "calibration samples")
    if granularity == PER_TENSOR:
        lo = np.array([samples.min()])
        hi = np.array([samples.max()])
    elif granularity == PER_CHANNEL:
        lo = samples.min(axis=0)
        hi = samples.max(axis=0)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    qmax = (1 << bitwidth) - 1
    span = hi - lo
    flat = span == 0.0

    scale = np.where(flat, 1.0, span / qmax)
    zero = np.where(flat, 0.0, np.round(-lo / scale))
    zero = np.clip(zero, 0, qmax).astype(np.int64)
    return QuantParams(bitwidth=bitwidth, scale=scale, zero_point=zero,
                       granularity=granularity)


def _broadcast_groups(x: np.ndarray, params: QuantParams):
    """Return (scale, zero) shaped to broadcast against ``x``."""
    if params.granularity == PER_TENSOR:
        return params.scale[0], float(params.zero_point[0])
    if x.ndim != 2 or x.shape[1] != params.n_groups:
        raise ShapeError(
            f"per-channel params for {params.n_groups} columns cannot apply "
            f"to array of shape {x.shape}"
        )
    return params.scale[None, :], params.zero_point[None, :].astype(np.float64)


def quantize(x, params: QuantParams) -> np.ndarray:
    """Map real values to integer codes: clip(round(x / s) + z, 0, 2^b - 1).

    Rounding is half-to-even, matching the behaviour of ``np.round``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot quantize non-finite values")
    scale, zero = _broadcast_groups(x, params)
    q = np.round(x / scale) + zero
    return np.clip(q, 0, params.qmax).astype(np.int64)


def dequantize(q, params: QuantParams) -> np.ndarray:
    """Map integer codes back to real values: (q - z) * s."""
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise TypeError("dequantize expects integer codes")
    if (q < 0).any() or (q > params.qmax).any():
        raise ValueError(
            f"codes outside [0, {params.qmax}] for bitwidth {params.bitwidth}"
        )
    scale, zero = _broadcast_groups(q.astype(np.float64), params)
    return (q.astype(np.float64) - zero) * scale


@dataclass(frozen=True)
class QuantizedLinear:
    """A linear layer evaluated through simulated integer quantization.

    ``weights`` holds integer codes when ``weight_params`` is set and the
    original float weights when it is None (bypass mode, used to run the
    exact full-precision layer through the same code path).
    """

    weights: np.ndarray
    weight_params: QuantParams | None
    act_params: QuantParams | None = None
    folded_bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-d, got {self.weights.shape}")
        if self.weight_params is not None:
            if self.weight_params.granularity != PER_CHANNEL:
                raise ValueError("weights are quantized per output channel")
            if self.weight_params.n_groups != self.weights.shape[1]:
                raise ShapeError(
                    f"{self.weight_params.n_groups} weight groups for "
                    f"{self.weights.shape[1]} output channels"
                )
        if self.folded_bias is not None and (
            self.folded_bias.ndim != 1
            or self.folded_bias.size != self.weights.shape[1]
        ):
            raise ShapeError("folded_bias must be a vector of output size")

    @property
    def bypass(self) -> bool:
        return self.weight_params is None

    @classmethod
    def from_float(cls, weights, weight_bits: int, act_params: QuantParams | None = None,
                   bias: np.ndarray | None = None) -> "QuantizedLinear":
        """Quantize float weights per output channel with min-max calibration."""
        weights = as_matrix(weights, "weights")
        wparams = calibrate_minmax(weights, weight_bits, PER_CHANNEL)
        codes = quantize(weights, wparams)
        return cls(weights=codes, weight_params=wparams, act_params=act_params,
                   folded_bias=None if bias is None else np.asarray(bias, dtype=np.float64))

    @classmethod
    def from_float_bypass(cls, weights, bias: np.ndarray | None = None) -> "QuantizedLinear":
        """Wrap float weights without quantizing anything."""
        weights = as_matrix(weights, "weights")
        return cls(weights=weights, weight_params=None, act_params=None,
                   folded_bias=None if bias is None else np.asarray(bias, dtype=np.float64))

    def dequantized_weights(self) -> np.ndarray:
        if self.bypass:
            return self.weights
        return dequantize(self.weights, self.weight_params)


def fake_quant_linear(x, layer: QuantizedLinear, act_params: QuantParams | None = None) -> np.ndarray:
    """Evaluate ``x @ W`` through the layer's quantizers.

    The input is quantize-dequantized with the activation params (the
    ``act_params`` argument overrides the layer's own, which lets a caller
    swap in range estimates calibrated for the current schedule group), the
    weights are dequantized from their integer codes, and the folded bias, if
    any, is added after the matmul. In bypass mode with no activation params
    this reduces to the exact float product.
    """
    x = as_matrix(x, "activations")
    if x.shape[1] != layer.weights.shape[0]:
        raise ShapeError(
            f"inner dimensions do not match: {x.shape} @ {layer.weights.shape}"
        )
    act = act_params if act_params is not None else layer.act_params
    if act is not None:
        if act.granularity != PER_TENSOR:
            raise ValueError("activations are quantized per tensor")
        x = dequantize(quantize(x, act), act)
    out = x @ layer.dequantized_weights()
    if layer.folded_bias is not None:
        out = out + layer.folded_bias[None, :]
    return out


def fold_correction(layer: QuantizedLinear, a: np.ndarray, b: np.ndarray) -> QuantizedLinear:
    """Fold a per-output-channel affine correction a*out + b into the layer.

    The correction rides on the per-channel weight scales (s'_k = a_k * s_k)
    and the bias, so the corrected layer costs nothing extra at inference.
    Any existing bias is scaled by ``a`` before ``b`` is added, which keeps
    fake_quant_linear(x, folded) == a * fake_quant_linear(x, layer) + b.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n_out = layer.weights.shape[1]
    if a.shape != (n_out,) or b.shape != (n_out,):
        raise ShapeError(
            f"correction must have one (a, b) pair per output channel "
            f"({n_out}), got {a.shape} and {b.shape}"
        )
    if layer.bypass:
        raise ValueError("cannot fold into a bypass layer: no per-channel scales")
    if (a <= 0.0).any():
        # A non-positive slope would flip or collapse the quantization grid.
        raise ValueError("correction slopes must be positive to fold into scales")
    params = layer.weight_params
    folded_params = replace(params, scale=params.scale * a)
    old_bias = layer.folded_bias
    new_bias = b if old_bias is None else a * old_bias + b
    return QuantizedLinear(weights=layer.weights, weight_params=folded_params,
                           act_params=layer.act_params, folded_bias=new_bias)


@dataclass(frozen=True)
class CostEstimate:
    """Multiply-accumulate count, Bops and weight-storage size of a run."""

    macs: int
    bops: int
    size_mb: float


def estimate_cost(mac_count: int, weight_bits: int, act_bits: int, param_count: int) -> CostEstimate:
    """Arithmetic cost model: Bops = MACs * b_w * b_x, size = params * b_w bits.

    All counts must be positive; a zero count almost always means a config
    bug upstream, so it is rejected rather than silently reported as free.
    """
    for name, value in (("mac_count", mac_count), ("weight_bits", weight_bits),
                        ("act_bits", act_bits), ("param_count", param_count)):
        if int(value) != value or value <= 0:
            raise ValueError(f"{name} must be a positive integer, got {value}")
    mac_count, param_count = int(mac_count), int(param_count)
    return CostEstimate(
        macs=mac_count,
        bops=mac_count * int(weight_bits) * int(act_bits),
        size_mb=param_count * int(weight_bits) / 8.0 / 2.0**20,
    )
