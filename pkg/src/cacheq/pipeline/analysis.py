"""Teacher-forced error analysis and correction fitting at the site layer.

The analysis pass replays a reference run (the state always advances through
the full-precision, cache-free path) and evaluates the site's counterfactual
quantities side by side at every step: the fresh input, the input with the
stale cached feature, and the configured quantized output. Keeping the state
on the reference trajectory makes the per-step records independent of each
other, and at dividing points the cached quantities coincide with the fresh
ones exactly, so the cache error there is zero by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from ..dps import CacheSchedule, group_spans, schedule_digest
from ..dec import CorrectionSet, StepCorrection, decompose_errors, fit_decoupled
from ..quant import QuantizedLinear
from .model import SITE_LAYER, ToyDenoiser
from .sampling import SamplerConfig, _check_corrections, _site_output, _update

__all__ = [
    "StepRecord",
    "ErrorReport",
    "calibration_pass",
    "fit_correction_set",
    "track_errors",
    "write_error_csv",
    "report_to_dict",
    "group_monotonic_fraction",
]

CSV_HEADER = ("step", "E_o", "E_c", "E_q")


@dataclass(frozen=True)
class StepRecord:
    """Site quantities of one step, all computed from the reference state."""

    step: int
    x_ref: np.ndarray
    x_cached: np.ndarray
    o_ref: np.ndarray
    o_cached: np.ndarray
    o_quant: np.ndarray


def calibration_pass(model: ToyDenoiser, config: SamplerConfig,
                     schedule: CacheSchedule | None = None,
                     quant=None,
                     corrections: CorrectionSet | None = None) -> list[StepRecord]:
    """Replay a reference run and record the site's counterfactuals per step.

    ``o_quant`` in the records reflects whatever ``quant`` and ``corrections``
    configure; with neither it is the cached output itself. Without a
    schedule every step recomputes, which is the quantization-only
    configuration: its cache error is identically zero.
    """
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
    cached = None
    records = []
    for step in range(T):
        diff_index = T - 1 - step
        h = model.stem(x, model.embed(diff_index, x.shape[0]))
        g = model.trunk(h)
        if is_dividing[step]:
            cached = g
        x_ref = model.site_input(h, g)
        # At a dividing point the cached feature IS g, so reuse the arrays
        # and the zero cache error is an identity, not a rounding accident.
        x_cached = x_ref if cached is g else model.site_input(h, cached)
        o_ref = model.site_forward(x_ref)
        o_cached = o_ref if x_cached is x_ref else model.site_forward(x_cached)
        if quant is None and corrections is None:
            o_quant = o_cached
        else:
            o_quant = _site_output(model, x_cached, quant, corrections, step)
        records.append(StepRecord(step=step, x_ref=x_ref, x_cached=x_cached,
                                  o_ref=o_ref, o_cached=o_cached, o_quant=o_quant))
        x = _update(model, x, model.head_from_site(o_ref), diff_index,
                    config.kind, gen)
    return records


def _site_layer_at(model: ToyDenoiser, quant, step: int) -> QuantizedLinear:
    """The site layer a run would apply at ``step``, as a standalone layer."""
    if quant is None or SITE_LAYER not in quant.layers:
        return QuantizedLinear.from_float_bypass(model.params[f"{SITE_LAYER}.w"])
    layer = quant.layers[SITE_LAYER]
    act = quant.act_for(SITE_LAYER, step)
    return layer if act is None else replace(layer, act_params=act)


def fit_correction_set(model: ToyDenoiser, config: SamplerConfig,
                       schedule: CacheSchedule, quant=None,
                       seeds=None) -> CorrectionSet:
    """Fit per-step corrections on teacher-forced calibration records.

    Multiple seeds stack their batches before fitting. The result is bound to
    ``schedule`` by hash, so applying it under any other schedule fails fast.
    """
    if seeds is None:
        seeds = (config.seed,)
    runs = []
    for seed in seeds:
        cfg = SamplerConfig(kind=config.kind, seed=seed, batch_size=config.batch_size)
        runs.append(calibration_pass(model, cfg, schedule, quant=quant))

    ref_layer = QuantizedLinear.from_float_bypass(model.params[f"{SITE_LAYER}.w"])
    per_step = []
    for t in range(model.steps):
        x_ref = np.vstack([run[t].x_ref for run in runs])
        x_cached = np.vstack([run[t].x_cached for run in runs])
        o_cached = np.vstack([run[t].o_cached for run in runs])
        input_fit, output_fit = fit_decoupled(
            x_ref, x_cached, o_cached, _site_layer_at(model, quant, t), ref_layer,
        )
        per_step.append(StepCorrection(step=t, input_fit=input_fit,
                                       output_fit=output_fit))
    return CorrectionSet(schedule_hash=schedule_digest(schedule),
                         per_step=tuple(per_step))


@dataclass(frozen=True)
class ErrorReport:
    """Per-step mean absolute errors at the site, plus a sample-level metric.

    ``e_total`` is the site's overall error (reference output vs configured
    quantized output), split into the caching and quantization parts.
    ``output_probe`` carries the same deviation through the rest of the head
    into the noise prediction. ``metric`` is filled in by callers that also
    measure final sample quality; it is not computed here. ``schedule_hash``
    ties the curves to the schedule they were measured under.
    """

    steps: np.ndarray
    e_total: np.ndarray
    e_cache: np.ndarray
    e_quant: np.ndarray
    output_probe: np.ndarray
    metric: float | None = None
    schedule_hash: str | None = None
    config_hash: str | None = None

    def __post_init__(self):
        n = self.steps.size
        for name in ("e_total", "e_cache", "e_quant", "output_probe"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per step")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")


def track_errors(model: ToyDenoiser, config: SamplerConfig,
                 schedule: CacheSchedule | None = None, quant=None,
                 corrections: CorrectionSet | None = None) -> ErrorReport:
    """Measure per-step site errors of one cache/quant configuration."""
    records = calibration_pass(model, config, schedule, quant=quant,
                               corrections=corrections)
    T = len(records)
    e_total = np.empty(T)
    e_cache = np.empty(T)
    e_quant = np.empty(T)
    probe = np.empty(T)
    for r in records:
        triple = decompose_errors(r.o_ref, r.o_cached, r.o_quant)
        e_total[r.step] = float(np.mean(np.abs(triple.e_total)))
        e_cache[r.step] = float(np.mean(np.abs(triple.e_cache)))
        e_quant[r.step] = float(np.mean(np.abs(triple.e_quant)))
        probe[r.step] = float(np.mean(np.abs(
            model.head_from_site(r.o_quant) - model.head_from_site(r.o_ref)
        )))
    return ErrorReport(steps=np.arange(T), e_total=e_total, e_cache=e_cache,
                       e_quant=e_quant, output_probe=probe,
                       schedule_hash=None if schedule is None
                       else schedule_digest(schedule))


def write_error_csv(report: ErrorReport, path) -> None:
    """Delimited per-step errors, one row per denoising step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(report.steps.size):
            writer.writerow([
                int(report.steps[i]),
                repr(float(report.e_total[i])),
                repr(float(report.e_cache[i])),
                repr(float(report.e_quant[i])),
            ])


def report_to_dict(report: ErrorReport) -> dict:
    return {
        "steps": report.steps.tolist(),
        "E_o": report.e_total.tolist(),
        "E_c": report.e_cache.tolist(),
        "E_q": report.e_quant.tolist(),
        "output_probe": report.output_probe.tolist(),
        "metric": report.metric,
        "schedule_hash": report.schedule_hash,
        "config_hash": report.config_hash,
    }


def group_monotonic_fraction(values: np.ndarray, schedule: CacheSchedule) -> float:
    """Fraction of cache groups over which ``values`` never decreases."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (schedule.steps,):
        raise ValueError("need one value per step")
    spans = group_spans(schedule.dividing_points, schedule.steps)
    good = sum(
        1 for start, end in spans
        if np.all(np.diff(values[start:end + 1]) >= 0)
    )
    return good / len(spans)
