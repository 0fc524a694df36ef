"""The four-way acceleration comparison on one trained model.

Five configurations share one evaluation seed: the full-precision baseline,
quantization alone, uniform caching alone, the two stacked naively, and the
optimized stack (solved schedule, per-group activation ranges, decoupled
corrections). Sample quality is the sliced Wasserstein distance to the
baseline's samples. Calibration and evaluation use disjoint seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..dps import CacheSchedule, cost_matrix, solve, uniform_schedule
from ..dec import CorrectionSet
from ..quant import CostEstimate
from .analysis import ErrorReport, fit_correction_set, track_errors
from .metrics import sliced_wasserstein
from .model import ToyDenoiser
from .quantize import build_quant_pack
from .sampling import SamplerConfig, sample_accelerated, sample_reference
from ..trajectory import capture

__all__ = ["QuadrantSettings", "ConfigOutcome", "QuadrantResult", "run_quadrant", "CONFIG_NAMES"]

CONFIG_NAMES = ("baseline", "quant_only", "cache_only", "combined_naive", "combined_ours")


@dataclass(frozen=True)
class QuadrantSettings:
    """Knobs of the comparison; defaults match the toy model's scale."""

    n_target: int = 5
    weight_bits: int = 8
    act_bits: int = 8
    # Minimal configuration: quantize the correction site only. "all" extends
    # fake quantization to every linear layer; the corrected site stays f3a.
    scope: str = "site"
    kind: str = "deterministic"
    calib_seeds: tuple[int, ...] = (101, 102)
    calib_batch: int = 256
    eval_seed: int = 7
    eval_batch: int = 2048
    errors_batch: int = 512
    n_projections: int = 5000
    metric_seed: int = 11

    def __post_init__(self):
        if self.eval_seed in self.calib_seeds:
            raise ValueError("evaluation seed must not appear in calibration seeds")


@dataclass(frozen=True)
class ConfigOutcome:
    """One configuration's samples, cost, and distance to the baseline."""

    name: str
    samples: np.ndarray
    cost: CostEstimate
    distance: float
    errors: ErrorReport | None = None


@dataclass(frozen=True)
class QuadrantResult:
    outcomes: dict[str, ConfigOutcome]
    dps_schedule: CacheSchedule
    uniform: CacheSchedule
    corrections: CorrectionSet
    settings: QuadrantSettings

    def distances(self) -> dict[str, float]:
        return {name: self.outcomes[name].distance for name in CONFIG_NAMES}

    def ours_beats_naive(self) -> bool:
        d = self.distances()
        return d["combined_ours"] < d["combined_naive"]

    def naive_worse_than_parts(self) -> bool:
        d = self.distances()
        return d["combined_naive"] > max(d["cache_only"], d["quant_only"])


def run_quadrant(model: ToyDenoiser, settings: QuadrantSettings | None = None) -> QuadrantResult:
    if settings is None:
        settings = QuadrantSettings()
    s = settings
    T = model.steps
    calib_cfg = SamplerConfig(kind=s.kind, seed=s.calib_seeds[0], batch_size=s.calib_batch)

    traj = capture(model, calib_cfg, s.calib_seeds)
    costs = cost_matrix(traj, band=2 * s.n_target)
    dps = solve(costs, s.n_target, limits_on=True)
    uniform = uniform_schedule(T, s.n_target, costs)

    # The naive stack reuses the plain quantizer calibrated on cache-free
    # runs; the optimized stack calibrates under its own schedule.
    plain_pack = build_quant_pack(model, s.weight_bits, s.act_bits, calib_cfg,
                                  s.calib_seeds, scope=s.scope)
    tuned_pack = build_quant_pack(model, s.weight_bits, s.act_bits, calib_cfg,
                                  s.calib_seeds, scope=s.scope, schedule=dps)
    corrections = fit_correction_set(model, calib_cfg, dps, quant=tuned_pack,
                                     seeds=s.calib_seeds)

    eval_cfg = SamplerConfig(kind=s.kind, seed=s.eval_seed, batch_size=s.eval_batch)
    runs = {
        "baseline": sample_reference(model, eval_cfg),
        "quant_only": sample_reference(model, eval_cfg, quant=plain_pack),
        "cache_only": sample_accelerated(model, eval_cfg, uniform),
        "combined_naive": sample_accelerated(model, eval_cfg, uniform, quant=plain_pack),
        "combined_ours": sample_accelerated(model, eval_cfg, dps, quant=tuned_pack,
                                            corrections=corrections),
    }

    base_samples = runs["baseline"].samples
    errors_cfg = SamplerConfig(kind=s.kind, seed=s.eval_seed, batch_size=s.errors_batch)
    reports = {
        "cache_only": track_errors(model, errors_cfg, uniform),
        "combined_naive": track_errors(model, errors_cfg, uniform, quant=plain_pack),
        "combined_ours": track_errors(model, errors_cfg, dps, quant=tuned_pack,
                                      corrections=corrections),
    }

    outcomes = {}
    for name in CONFIG_NAMES:
        run = runs[name]
        distance = sliced_wasserstein(base_samples, run.samples,
                                      n_projections=s.n_projections,
                                      seed=s.metric_seed)
        report = reports.get(name)
        if report is not None:
            report = replace(report, metric=distance)
        outcomes[name] = ConfigOutcome(name=name, samples=run.samples,
                                       cost=run.cost, distance=distance,
                                       errors=report)
    return QuadrantResult(outcomes=outcomes, dps_schedule=dps, uniform=uniform,
                          corrections=corrections, settings=settings)
