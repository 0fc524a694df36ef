"""Channel-wise affine error correction for cached, quantized layers.

The output error of a layer fed a stale cached input through quantized
weights decomposes exactly into a caching part and a quantization part:

    e_total = (o_ref - o_cached) + (o_cached - o_quant)

Instead of one affine fit from o_quant to o_ref (the direct correction),
the decoupled correction fits the two parts where they live: an input-side
fit pulls the cached activation toward the fresh one channel by channel,
then an output-side fit absorbs what quantization does to the corrected
input. Both fits are ordinary per-channel least squares, so they can be
calibrated from a handful of recorded step tuples and cost two vector
multiply-adds at inference (the output fit folds into the weight scales).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, as_matrix, channel_stats
from .quant import QuantizedLinear, fake_quant_linear

__all__ = [
    "StageOrderError",
    "ChannelAffine",
    "ErrorTriple",
    "StepCorrection",
    "CorrectionSet",
    "CorrectionComparison",
    "fit_channel_affine",
    "fit_direct",
    "fit_decoupled",
    "decompose_errors",
    "compare_corrections",
    "corrections_to_dict",
    "corrections_from_dict",
]


class StageOrderError(ValueError):
    """The quantized outputs were not recomputed from the corrected input."""


@dataclass(frozen=True)
class ChannelAffine:
    """One affine map per channel: column k of x becomes a[k] * x + b[k].

    ``degenerate`` flags channels whose fit source was constant; those fall
    back to a unit slope with a pure mean shift.
    """

    a: np.ndarray
    b: np.ndarray
    degenerate: np.ndarray

    def __post_init__(self):
        if not (self.a.ndim == 1 and self.a.shape == self.b.shape == self.degenerate.shape):
            raise ShapeError(
                f"per-channel vectors must match: a {self.a.shape}, "
                f"b {self.b.shape}, degenerate {self.degenerate.shape}"
            )
        if not (np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise ValueError("correction coefficients must be finite")

    @property
    def channels(self) -> int:
        return self.a.size

    @classmethod
    def identity(cls, channels: int) -> "ChannelAffine":
        return cls(a=np.ones(channels), b=np.zeros(channels),
                   degenerate=np.zeros(channels, dtype=bool))

    def apply(self, x) -> np.ndarray:
        x = as_matrix(x, "activations")
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"correction covers {self.channels} channels, input has {x.shape[1]}"
            )
        return self.a[None, :] * x + self.b[None, :]


def fit_channel_affine(source, target) -> ChannelAffine:
    """Per-channel ordinary least squares from source columns to target columns.

    a_k = Cov(source_k, target_k) / Var(source_k) and b_k makes the residual
    mean zero; population moments throughout. A constant source column leaves
    the slope unidentified, so it degrades to a = 1 with b matching the means.
    """
    s = as_matrix(source, "source")
    t = as_matrix(target, "target")
    if s.shape != t.shape:
        raise ShapeError(f"source/target shapes differ: {s.shape} vs {t.shape}")
    if s.shape[0] == 0:
        raise ShapeError("need at least one observation row")

    s_mean = s.mean(axis=0)
    t_mean = t.mean(axis=0)
    s_centered = s - s_mean[None, :]
    covariance = np.mean(s_centered * (t - t_mean[None, :]), axis=0)
    variance = np.mean(s_centered * s_centered, axis=0)
    degenerate = s.max(axis=0) == s.min(axis=0)

    a = np.ones(s.shape[1])
    np.divide(covariance, variance, out=a, where=~degenerate)
    b = t_mean - a * s_mean
    return ChannelAffine(a=a, b=b, degenerate=degenerate)


def fit_direct(o_quant, o_ref) -> ChannelAffine:
    """Single output-side correction: o_ref ~ a * o_quant + b per channel."""
    return fit_channel_affine(o_quant, o_ref)


def fit_decoupled(x_ref, x_cached, o_cached, quant_layer: QuantizedLinear,
                  ref_layer: QuantizedLinear,
                  o_quant: np.ndarray | None = None,
                  ) -> tuple[ChannelAffine, ChannelAffine]:
    """Two-stage correction: input fit first, output fit on its result.

    Stage 1 fits (a1, b1) from the cached input to the fresh input. Stage 2
    then pushes the corrected input through both the quantized layer and the
    full-precision one and fits (a2, b2) between those outputs, so the pair
    composes exactly the way it is applied at inference. Passing ``o_quant``
    asserts the stage ordering: it must match the quantized output of the
    *corrected* input, not of the raw cached one.

    ``ref_layer`` must be the bypass (full-precision) twin of ``quant_layer``;
    ``o_cached`` is cross-checked against it to catch mismatched recordings.
    """
    x_ref = as_matrix(x_ref, "x_ref")
    x_cached = as_matrix(x_cached, "x_cached")
    if not ref_layer.bypass:
        raise ValueError("ref_layer must hold the full-precision weights")

    expected_cached = fake_quant_linear(x_cached, ref_layer)
    o_cached = as_matrix(o_cached, "o_cached")
    if not _close(o_cached, expected_cached):
        raise ValueError(
            "o_cached does not equal the cached input pushed through the "
            "full-precision weights"
        )

    input_fit = fit_channel_affine(x_cached, x_ref)
    x_corrected = input_fit.apply(x_cached)
    o_quant_corrected = fake_quant_linear(x_corrected, quant_layer)
    if o_quant is not None and not _close(np.asarray(o_quant, dtype=np.float64),
                                          o_quant_corrected):
        raise StageOrderError(
            "stage-2 fit requires quantized outputs recomputed from the "
            "corrected input; got outputs of the uncorrected one"
        )
    o_target = fake_quant_linear(x_corrected, ref_layer)
    output_fit = fit_channel_affine(o_quant_corrected, o_target)
    return input_fit, output_fit


def _close(x: np.ndarray, y: np.ndarray, rel: float = 1e-9) -> bool:
    scale = max(float(np.max(np.abs(y))), 1e-300)
    return x.shape == y.shape and float(np.max(np.abs(x - y))) <= rel * scale


@dataclass(frozen=True)
class ErrorTriple:
    """Per-element output errors split by cause.

    ``e_total`` is assembled as ``e_cache + e_quant`` so the telescoping
    identity holds exactly, bit for bit; each part is the plain difference
    of the two outputs it separates.
    """

    e_total: np.ndarray
    e_cache: np.ndarray
    e_quant: np.ndarray

    def __post_init__(self):
        if not (self.e_total.shape == self.e_cache.shape == self.e_quant.shape):
            raise ShapeError("error components must share one shape")


def decompose_errors(o_ref, o_cached, o_quant) -> ErrorTriple:
    """Split o_ref - o_quant into caching and quantization contributions."""
    o_ref = as_matrix(o_ref, "o_ref")
    o_cached = as_matrix(o_cached, "o_cached")
    o_quant = as_matrix(o_quant, "o_quant")
    if not (o_ref.shape == o_cached.shape == o_quant.shape):
        raise ShapeError(
            f"outputs must share one shape, got {o_ref.shape}, "
            f"{o_cached.shape}, {o_quant.shape}"
        )
    e_cache = o_ref - o_cached
    e_quant = o_cached - o_quant
    return ErrorTriple(e_total=e_cache + e_quant, e_cache=e_cache, e_quant=e_quant)


@dataclass(frozen=True)
class CorrectionComparison:
    """Residual statistics of no / direct / decoupled correction, per channel.

    Residuals are against the full-precision reference output on the fitting
    data. ``pearson_r`` correlates reference and uncorrected quantized
    outputs channel by channel (reported as-is, no threshold attached).
    """

    uncorrected_mean: np.ndarray
    uncorrected_var: np.ndarray
    direct_mean: np.ndarray
    direct_var: np.ndarray
    decoupled_mean: np.ndarray
    decoupled_var: np.ndarray
    pearson_r: np.ndarray
    decoupled_win_fraction: float


def compare_corrections(x_ref, x_cached, quant_layer: QuantizedLinear,
                        ref_layer: QuantizedLinear) -> CorrectionComparison:
    """Fit both correction styles on one batch and report their residuals."""
    x_ref = as_matrix(x_ref, "x_ref")
    x_cached = as_matrix(x_cached, "x_cached")
    o_ref = fake_quant_linear(x_ref, ref_layer)
    o_quant_raw = fake_quant_linear(x_cached, quant_layer)

    direct = fit_direct(o_quant_raw, o_ref)
    o_cached = fake_quant_linear(x_cached, ref_layer)
    input_fit, output_fit = fit_decoupled(x_ref, x_cached, o_cached,
                                          quant_layer, ref_layer)
    decoupled_out = output_fit.apply(
        fake_quant_linear(input_fit.apply(x_cached), quant_layer)
    )

    def _stats(residual):
        st = channel_stats(residual)
        return st.means, st.variances

    un_mean, un_var = _stats(o_ref - o_quant_raw)
    di_mean, di_var = _stats(o_ref - direct.apply(o_quant_raw))
    de_mean, de_var = _stats(o_ref - decoupled_out)

    ref_stats = channel_stats(o_ref)
    quant_stats = channel_stats(o_quant_raw)
    cross = np.mean(
        (o_ref - ref_stats.means[None, :]) * (o_quant_raw - quant_stats.means[None, :]),
        axis=0,
    )
    denom = np.sqrt(ref_stats.variances * quant_stats.variances)
    pearson = np.full(cross.shape, np.nan)
    np.divide(cross, denom, out=pearson, where=denom > 0.0)

    return CorrectionComparison(
        uncorrected_mean=un_mean, uncorrected_var=un_var,
        direct_mean=di_mean, direct_var=di_var,
        decoupled_mean=de_mean, decoupled_var=de_var,
        pearson_r=pearson,
        decoupled_win_fraction=float(np.mean(de_var < di_var)),
    )


@dataclass(frozen=True)
class StepCorrection:
    """The corrections applied at one denoising step."""

    step: int
    input_fit: ChannelAffine
    output_fit: ChannelAffine


@dataclass(frozen=True)
class CorrectionSet:
    """Per-step corrections bound to the schedule they were fitted under.

    ``schedule_hash`` ties the set to one schedule artifact; consumers must
    refuse to apply corrections fitted for a different schedule. At dividing
    points the cached input is fresh, so the input fit there is the identity
    and only the quantization correction carries information.
    """

    schedule_hash: str
    per_step: tuple[StepCorrection, ...]

    def __post_init__(self):
        steps = [c.step for c in self.per_step]
        if steps != list(range(len(steps))):
            raise ValueError("per_step must hold steps 0..T-1 in order")

    @property
    def steps(self) -> int:
        return len(self.per_step)


def corrections_to_dict(corrections: CorrectionSet) -> dict:
    return {
        "schedule_hash": corrections.schedule_hash,
        "per_step": [
            {
                "t": c.step,
                "a1": c.input_fit.a.tolist(),
                "b1": c.input_fit.b.tolist(),
                "a2": c.output_fit.a.tolist(),
                "b2": c.output_fit.b.tolist(),
                "degenerate_in": c.input_fit.degenerate.astype(int).tolist(),
                "degenerate_out": c.output_fit.degenerate.astype(int).tolist(),
            }
            for c in corrections.per_step
        ],
    }


def corrections_from_dict(payload: dict) -> CorrectionSet:
    def _affine(entry, a_key, b_key, d_key):
        return ChannelAffine(
            a=np.asarray(entry[a_key], dtype=np.float64),
            b=np.asarray(entry[b_key], dtype=np.float64),
            degenerate=np.asarray(entry[d_key], dtype=bool),
        )

    per_step = tuple(
        StepCorrection(
            step=int(entry["t"]),
            input_fit=_affine(entry, "a1", "b1", "degenerate_in"),
            output_fit=_affine(entry, "a2", "b2", "degenerate_out"),
        )
        for entry in payload["per_step"]
    )
    return CorrectionSet(schedule_hash=payload["schedule_hash"], per_step=per_step)
