"""Training-free quantizer calibration for the toy model's linear layers.

Weights come straight from the model (per-output-channel min-max); input
activation ranges are observed on a full-precision calibration run. When a
cache schedule is supplied, activations are calibrated per cache group
(cached inference makes the per-layer statistics piecewise stationary along
the step axis), with a single global range as the fallback policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dps import CacheSchedule, group_spans, schedule_digest
from ..quant import PER_TENSOR, QuantParams, QuantizedLinear, calibrate_minmax
from .model import QUANTIZABLE_LAYERS, SITE_LAYER, ToyDenoiser
from .sampling import SamplerConfig, _run

__all__ = ["QuantPack", "build_quant_pack", "resolve_scope", "pack_to_dict", "pack_from_dict"]

ACT_POLICIES = ("per_group", "global")


def resolve_scope(scope) -> tuple[str, ...]:
    """Map a scope spec to layer names: "site", "all", or an explicit list."""
    if scope == "site":
        return (SITE_LAYER,)
    if scope == "all":
        return QUANTIZABLE_LAYERS
    names = tuple(scope)
    unknown = [n for n in names if n not in QUANTIZABLE_LAYERS]
    if unknown:
        raise ValueError(f"unknown layers in scope: {unknown}")
    return names


@dataclass(frozen=True)
class QuantPack:
    """Quantized layers plus the activation ranges resolved per step."""

    weight_bits: int
    act_bits: int
    scope: tuple[str, ...]
    layers: dict[str, QuantizedLinear]
    act_policy: str
    group_points: tuple[int, ...] | None
    group_acts: dict[str, tuple[QuantParams, ...]] | None
    schedule_hash: str | None

    def __post_init__(self):
        if self.act_policy not in ACT_POLICIES:
            raise ValueError(f"act_policy must be one of {ACT_POLICIES}")
        if self.act_policy == "per_group" and (
            self.group_points is None or self.group_acts is None
        ):
            raise ValueError("per-group policy needs group points and params")

    def act_for(self, name: str, step: int) -> QuantParams | None:
        """Activation params for one layer at one step (None: use the
        layer's own global fallback)."""
        if self.act_policy == "global" or name not in self.layers:
            return None
        group = int(np.searchsorted(np.asarray(self.group_points), step, side="right") - 1)
        return self.group_acts[name][group]


def _range_params(lo: float, hi: float, bits: int) -> QuantParams:
    # calibrate_minmax only consumes the extremes, so a 2-row matrix is enough.
    return calibrate_minmax(np.array([[lo], [hi]]), bits, PER_TENSOR)


def build_quant_pack(model: ToyDenoiser, weight_bits: int, act_bits: int,
                     sampler: SamplerConfig, calib_seeds,
                     scope="all",
                     schedule: CacheSchedule | None = None,
                     act_policy: str | None = None) -> QuantPack:
    """Quantize the scoped layers and calibrate their activation ranges.

    Ranges are observed on full-precision runs (cached when ``schedule`` is
    given, so trunk layers are only seen at the steps where they actually
    run). Multiple calibration seeds widen the observed extremes.
    """
    names = resolve_scope(scope)
    if act_policy is None:
        act_policy = "per_group" if schedule is not None else "global"
    if act_policy == "per_group" and schedule is None:
        raise ValueError("per-group activation calibration needs a schedule")

    T = model.steps
    lo = {n: np.full(T, np.inf) for n in names}
    hi = {n: np.full(T, -np.inf) for n in names}

    def recorder(name, step, x):
        if name in lo:
            lo[name][step] = min(lo[name][step], float(x.min()))
            hi[name][step] = max(hi[name][step], float(x.max()))

    for seed in calib_seeds:
        cfg = SamplerConfig(kind=sampler.kind, seed=seed, batch_size=sampler.batch_size)
        _run(model, cfg, schedule=schedule, act_recorder=recorder)

    layers: dict[str, QuantizedLinear] = {}
    group_acts: dict[str, tuple[QuantParams, ...]] = {}
    spans = group_spans(schedule.dividing_points, T) if schedule is not None else None
    for name in names:
        seen = np.isfinite(lo[name])
        if not seen.any():
            raise ValueError(f"layer {name} was never evaluated during calibration")
        global_act = _range_params(float(lo[name][seen].min()),
                                   float(hi[name][seen].max()), act_bits)
        layers[name] = QuantizedLinear.from_float(
            model.params[f"{name}.w"], weight_bits,
            act_params=global_act, bias=model.params.get(f"{name}.b"),
        )
        if act_policy == "per_group":
            per_group = []
            for start, end in spans:
                window = seen[start:end + 1]
                if not window.any():
                    raise ValueError(
                        f"layer {name} has no activation records in group "
                        f"[{start}, {end}]"
                    )
                per_group.append(_range_params(
                    float(lo[name][start:end + 1][window].min()),
                    float(hi[name][start:end + 1][window].max()), act_bits,
                ))
            group_acts[name] = tuple(per_group)

    return QuantPack(
        weight_bits=weight_bits, act_bits=act_bits, scope=names, layers=layers,
        act_policy=act_policy,
        group_points=schedule.dividing_points if schedule is not None else None,
        group_acts=group_acts if act_policy == "per_group" else None,
        schedule_hash=schedule_digest(schedule) if schedule is not None else None,
    )


def _params_to_dict(params: QuantParams | None):
    if params is None:
        return None
    return {
        "bitwidth": params.bitwidth,
        "scale": params.scale.tolist(),
        "zero_point": params.zero_point.tolist(),
        "granularity": params.granularity,
    }


def _params_from_dict(payload) -> QuantParams | None:
    if payload is None:
        return None
    return QuantParams(
        bitwidth=int(payload["bitwidth"]),
        scale=np.asarray(payload["scale"], dtype=np.float64),
        zero_point=np.asarray(payload["zero_point"], dtype=np.int64),
        granularity=payload["granularity"],
    )


def pack_to_dict(pack: QuantPack) -> dict:
    layers = {}
    for name, layer in pack.layers.items():
        layers[name] = {
            "codes": layer.weights.tolist(),
            "weight_params": _params_to_dict(layer.weight_params),
            "act_params": _params_to_dict(layer.act_params),
            "bias": None if layer.folded_bias is None else layer.folded_bias.tolist(),
        }
    return {
        "weight_bits": pack.weight_bits,
        "act_bits": pack.act_bits,
        "scope": list(pack.scope),
        "act_policy": pack.act_policy,
        "group_points": None if pack.group_points is None else list(pack.group_points),
        "group_acts": None if pack.group_acts is None else {
            name: [_params_to_dict(p) for p in acts]
            for name, acts in pack.group_acts.items()
        },
        "schedule_hash": pack.schedule_hash,
        "layers": layers,
    }


def pack_from_dict(payload: dict) -> QuantPack:
    layers = {}
    for name, entry in payload["layers"].items():
        layers[name] = QuantizedLinear(
            weights=np.asarray(entry["codes"], dtype=np.int64),
            weight_params=_params_from_dict(entry["weight_params"]),
            act_params=_params_from_dict(entry["act_params"]),
            folded_bias=None if entry["bias"] is None
            else np.asarray(entry["bias"], dtype=np.float64),
        )
    group_acts = payload["group_acts"]
    return QuantPack(
        weight_bits=int(payload["weight_bits"]),
        act_bits=int(payload["act_bits"]),
        scope=tuple(payload["scope"]),
        layers=layers,
        act_policy=payload["act_policy"],
        group_points=None if payload["group_points"] is None
        else tuple(int(p) for p in payload["group_points"]),
        group_acts=None if group_acts is None else {
            name: tuple(_params_from_dict(p) for p in acts)
            for name, acts in group_acts.items()
        },
        schedule_hash=payload["schedule_hash"],
    )
