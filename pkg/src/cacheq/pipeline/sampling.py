"""Reference and cache-accelerated sampling loops.

Both entry points drive the same step function, so a degenerate schedule
(every step a dividing point) with quantization bypassed reproduces the
reference run bit for bit. Step index t counts sampler invocations in
denoising order: t = 0 consumes the initial noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dps import CacheSchedule, schedule_digest
from ..dec import CorrectionSet
from ..quant import CostEstimate, estimate_cost, fake_quant_linear, fold_correction
from .model import ToyDenoiser

__all__ = [
    "SamplerConfig",
    "CacheState",
    "RunResult",
    "StaleCorrectionsError",
    "sample_reference",
    "sample_accelerated",
    "record_cache_features",
    "run_cost",
]

SAMPLER_KINDS = ("deterministic", "ancestral")
TRUNK_LAYERS = ("f2a", "f2b")


class StaleCorrectionsError(ValueError):
    """Corrections were fitted under a different schedule than the run's."""


@dataclass(frozen=True)
class SamplerConfig:
    """How to drive the sampler: update rule, seed, batch size.

    ``deterministic`` is the eta = 0 update (no per-step noise injection);
    ``ancestral`` re-noises each step from the run's seeded stream.
    """

    kind: str = "deterministic"
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class CacheState:
    """The cached trunk feature and its bookkeeping counters."""

    feature: np.ndarray | None = None
    source_step: int = -1
    recomputes: int = 0
    reuses: int = 0


@dataclass(frozen=True)
class RunResult:
    samples: np.ndarray
    cache: CacheState
    cost: CostEstimate


def _check_corrections(corrections: CorrectionSet, schedule: CacheSchedule,
                       model: ToyDenoiser) -> None:
    if corrections.steps != model.steps:
        raise ValueError(
            f"corrections cover {corrections.steps} steps, model has {model.steps}"
        )
    expected = schedule_digest(schedule)
    if corrections.schedule_hash != expected:
        raise StaleCorrectionsError(
            f"corrections were fitted for schedule {corrections.schedule_hash[:12]}, "
            f"this run uses {expected[:12]}"
        )


def _linear(model: ToyDenoiser, name: str, x: np.ndarray, quant, step: int) -> np.ndarray:
    """One linear layer, through the quant pack when it covers the layer."""
    layer = quant.layers.get(name) if quant is not None else None
    if layer is None:
        out = x @ model.params[f"{name}.w"]
        bias = model.params.get(f"{name}.b")
        return out if bias is None else out + bias
    return fake_quant_linear(x, layer, act_params=quant.act_for(name, step))


def _site_output(model: ToyDenoiser, z: np.ndarray, quant, corrections, step: int) -> np.ndarray:
    """The correction-site layer with input/output corrections applied."""
    fit = corrections.per_step[step] if corrections is not None else None
    if fit is not None:
        z = fit.input_fit.apply(z)
    layer = quant.layers.get("f3a") if quant is not None else None
    if layer is None:
        out = model.site_forward(z)
        return fit.output_fit.apply(out) if fit is not None else out
    if fit is not None:
        layer = fold_correction(layer, fit.output_fit.a, fit.output_fit.b)
    return fake_quant_linear(z, layer, act_params=quant.act_for("f3a", step))


def _update(model: ToyDenoiser, x: np.ndarray, eps_hat: np.ndarray, diff_index: int,
            kind: str, gen: np.random.Generator) -> np.ndarray:
    ab = model.alpha_bars[diff_index]
    ab_prev = model.alpha_bars[diff_index - 1] if diff_index > 0 else 1.0
    if kind == "deterministic":
        x0 = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    beta = model.betas[diff_index]
    mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(model.alphas[diff_index])
    if diff_index == 0:
        return mean
    var = (1.0 - ab_prev) / (1.0 - ab) * beta
    return mean + np.sqrt(var) * gen.standard_normal(x.shape)


def _run(model: ToyDenoiser, config: SamplerConfig,
         schedule: CacheSchedule | None = None,
         quant=None,
         corrections: CorrectionSet | None = None,
         feature_recorder=None,
         act_recorder=None) -> RunResult:
    T = model.steps
    if schedule is not None and schedule.steps != T:
        raise ValueError(f"schedule covers {schedule.steps} steps, model has {T}")
    if corrections is not None:
        if schedule is None:
            raise ValueError("corrections require a cache schedule")
        _check_corrections(corrections, schedule, model)

    is_dividing = np.ones(T, dtype=bool)
    if schedule is not None:
        is_dividing[:] = False
        is_dividing[list(schedule.dividing_points)] = True

    gen = np.random.Generator(np.random.Philox(config.seed))
    x = gen.standard_normal((config.batch_size, model.arch.data_dim))
    cache = CacheState()

    for step in range(T):
        diff_index = T - 1 - step
        temb = model.embed(diff_index, x.shape[0])
        u = np.concatenate([x, temb], axis=1)
        if act_recorder is not None:
            act_recorder("f1", step, u)
        h = np.tanh(_linear(model, "f1", u, quant, step))

        if is_dividing[step]:
            if act_recorder is not None:
                act_recorder("f2a", step, h)
            v = np.tanh(_linear(model, "f2a", h, quant, step))
            if act_recorder is not None:
                act_recorder("f2b", step, v)
            g = np.tanh(_linear(model, "f2b", v, quant, step))
            cache.feature = g
            cache.source_step = step
            cache.recomputes += 1
            if feature_recorder is not None:
                feature_recorder(step, g)
        else:
            g = cache.feature
            cache.reuses += 1

        z = model.site_input(h, g)
        if act_recorder is not None:
            act_recorder("f3a", step, z)
        site = _site_output(model, z, quant, corrections, step)
        y = np.tanh(site)
        if act_recorder is not None:
            act_recorder("f3b", step, y)
        eps_hat = _linear(model, "f3b", y, quant, step)

        x = _update(model, x, eps_hat, diff_index, config.kind, gen)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite state after step {step}")

    return RunResult(samples=x, cache=cache, cost=run_cost(model, cache.recomputes, quant))


def sample_reference(model: ToyDenoiser, config: SamplerConfig, quant=None) -> RunResult:
    """Cache-free run that recomputes the trunk at every step.

    ``quant`` routes the covered layers through fake quantization, so this
    doubles as the quantization-only configuration.
    """
    return _run(model, config, quant=quant)


def sample_accelerated(model: ToyDenoiser, config: SamplerConfig,
                       schedule: CacheSchedule,
                       quant=None,
                       corrections: CorrectionSet | None = None) -> RunResult:
    """Cached run: the trunk feature is recomputed only at dividing points.

    ``quant`` is an optional quantization pack covering some layers;
    ``corrections`` must have been fitted under ``schedule`` (enforced by
    hash). With a degenerate schedule (K == T) and no quantization this
    reproduces sample_reference bit for bit.
    """
    return _run(model, config, schedule=schedule, quant=quant, corrections=corrections)


def record_cache_features(model: ToyDenoiser, config: SamplerConfig, seed: int) -> list[np.ndarray]:
    """Fresh trunk features from one reference run, one matrix per step."""
    recorded: dict[int, np.ndarray] = {}

    def recorder(step, feature):
        recorded[step] = feature.copy()

    _run(model, SamplerConfig(kind=config.kind, seed=seed, batch_size=config.batch_size),
         feature_recorder=recorder)
    return [recorded[t] for t in range(model.steps)]


def run_cost(model: ToyDenoiser, trunk_evaluations: int, quant=None) -> CostEstimate:
    """Per-sample cost of a run that evaluated the trunk ``trunk_evaluations``
    times; all other layers run every step. Quantized layers count at their
    integer widths, the rest at 32/32."""
    if not 0 < trunk_evaluations <= model.steps:
        raise ValueError(
            f"trunk evaluations must lie in [1, {model.steps}], got {trunk_evaluations}"
        )
    shapes = model.arch.layer_shapes()
    macs = model.mac_counts()
    total = CostEstimate(macs=0, bops=0, size_mb=0.0)
    for name, (w_shape, has_bias) in shapes.items():
        evaluations = trunk_evaluations if name in TRUNK_LAYERS else model.steps
        quantized = quant is not None and name in quant.layers
        w_bits = quant.weight_bits if quantized else 32
        a_bits = quant.act_bits if quantized else 32
        params = w_shape[0] * w_shape[1] + (w_shape[1] if has_bias else 0)
        part = estimate_cost(macs[name] * evaluations, w_bits, a_bits, params)
        total = CostEstimate(
            macs=total.macs + part.macs,
            bops=total.bops + part.bops,
            size_mb=total.size_mb + part.size_mb,
        )
    return total
